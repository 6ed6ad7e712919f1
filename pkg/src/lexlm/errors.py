"""Exception types shared across the toolkit."""


class NumericError(ArithmeticError):
    """A kernel produced NaN/Inf, or a norm/loss became non-finite.

    Raised eagerly so a training step aborts instead of silently
    propagating bad values.
    """


class FormatError(ValueError):
    """A serialized artifact (checkpoint, vocab file, shard) is malformed."""


class ContextOverflowError(ValueError):
    """A sequence exceeds the model's maximum context length."""


class JudgementParseError(ValueError):
    """A model response contains no recognizable accept/reject label."""
