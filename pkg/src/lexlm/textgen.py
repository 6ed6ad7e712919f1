"""Autoregressive decoding with top-p/temperature sampling, the zero-shot
prompt templates, and accept/reject label extraction.

Generation sessions are independent: a shared immutable model can serve
several, each with its own seeded rng stream.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tokenizer as tok
from .errors import ContextOverflowError, JudgementParseError
from .model import ModelConfig, ModelWeights, forward
from .tensor import no_grad
from .tokenizer import Vocabulary

__all__ = [
    "SamplerConfig",
    "Judgement",
    "DEFAULT_LABEL_SYNONYMS",
    "nucleus",
    "top_p_sample",
    "stream_ids",
    "generate",
    "judgement_prompt",
    "summarization_prompt",
    "parse_judgement",
]


@dataclass
class SamplerConfig:
    top_p: float = 0.9
    temperature: float = 1.0
    max_new_tokens: int = 128
    seed: int = 0
    stop_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be nonnegative")


@dataclass
class Judgement:
    label: int  # 1 = accepted, 0 = rejected
    explanation: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


def nucleus(logits, top_p: float, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Kept token ids and renormalized probabilities of the nucleus.

    Softmax of logits/temperature, sorted descending (ties break toward
    the lower token id); keeps the minimal prefix whose cumulative mass
    reaches top_p, always at least the top token, renormalized to sum 1.
    -inf logits mean "masked out"; NaN or +inf logits are rejected.
    """
    x = np.asarray(getattr(logits, "data", logits), dtype=np.float64).reshape(-1)
    if np.isnan(x).any() or np.isposinf(x).any():
        raise ValueError("logits must be finite (or -inf for masked ids)")
    m = x.max()
    if m == -np.inf:
        raise ValueError("all logits are -inf; nothing to sample")
    z = (x - m) / temperature
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, top_p - 1e-12))
    kept = order[:cut + 1]
    kp = probs[kept]
    return kept, kp / kp.sum()


def top_p_sample(logits, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Draw one token id from the renormalized nucleus."""
    kept, probs = nucleus(logits, cfg.top_p, cfg.temperature)
    edges = np.cumsum(probs)
    i = int(np.searchsorted(edges, rng.random(), side="right"))
    return int(kept[min(i, len(kept) - 1)])


def stream_ids(weights: ModelWeights, config: ModelConfig, vocab: Vocabulary,
               prompt: str, cfg: SamplerConfig):
    """Yield sampled token ids one by one (stop ids end the stream and are
    not yielded). The context budget is checked before any decoding."""
    ids = tok.encode(vocab, prompt)
    if not ids:
        ids = [vocab.bos_id]
    if len(ids) + cfg.max_new_tokens > config.max_context:
        raise ContextOverflowError(
            f"prompt ({len(ids)}) + budget ({cfg.max_new_tokens}) exceeds "
            f"max_context {config.max_context}")
    rng = np.random.default_rng(cfg.seed)
    with no_grad():
        for _ in range(cfg.max_new_tokens):
            logits = forward(weights, config, ids)
            next_id = top_p_sample(logits.data[-1], cfg, rng)
            if next_id in cfg.stop_ids:
                return
            ids.append(next_id)
            yield next_id


def generate(weights: ModelWeights, config: ModelConfig, vocab: Vocabulary,
             prompt: str, cfg: SamplerConfig) -> str:
    """Decode up to max_new_tokens after the prompt; returns only the newly
    generated text. Deterministic for a fixed (prompt, cfg, seed)."""
    return tok.decode(vocab, list(stream_ids(weights, config, vocab, prompt, cfg)))


# ---------------------------------------------------------------------------
# zero-shot prompt templates
# ---------------------------------------------------------------------------

_JUDGEMENT_TEMPLATE = (
    "Analyze the case proceeding and predict whether the appeal/petition "
    "will be accepted (1) or rejected (0).\n"
    "Subsequently provide an explanation behind this prediction with "
    "important textual evidence from the case.\n"
    "### Input: case_proceeding: <case_pro>\n"
    "### Response: "
)

_SUMMARIZATION_TEMPLATE = (
    "You are a legal assistant and your job is to summarize the underneath "
    "case proceeding given in a most concise manner while being safe.\n"
    "Your summary must have the same meaning and not include false "
    "information. Make sure you do not use any external knowledge other "
    "than what is provided to you.\n"
    "Your final output must only be the summarized text.\n"
    "### Case: <case>\n"
    "### Summary: "
)


def judgement_prompt(case_text: str) -> str:
    """Accept/reject prediction prompt with the case substituted verbatim."""
    if not case_text:
        raise ValueError("case text must be non-empty")
    return _JUDGEMENT_TEMPLATE.replace("<case_pro>", case_text)


def summarization_prompt(case_text: str) -> str:
    """Case summarization prompt with the case substituted verbatim."""
    if not case_text:
        raise ValueError("case text must be non-empty")
    return _SUMMARIZATION_TEMPLATE.replace("<case>", case_text)


# ---------------------------------------------------------------------------
# label extraction
# ---------------------------------------------------------------------------

# Configurable synonym table: surface word -> label.
DEFAULT_LABEL_SYNONYMS = {
    "accepted": 1,
    "allowed": 1,
    "rejected": 0,
    "dismissed": 0,
}


def parse_judgement(response: str,
                    synonyms: dict[str, int] = DEFAULT_LABEL_SYNONYMS) -> Judgement:
    """First standalone "1"/"0" or synonym word decides the label; the
    remainder of the text is the explanation."""
    words = "|".join(re.escape(w) for w in synonyms)
    pattern = re.compile(rf"\b(?:(?P<digit>[01])|(?P<word>{words}))\b", re.IGNORECASE)
    m = pattern.search(response)
    if not m:
        raise JudgementParseError("no accept/reject label found in response")
    if m.group("digit") is not None:
        label = int(m.group("digit"))
    else:
        label = synonyms[m.group("word").lower()]
    return Judgement(label=label, explanation=response[m.end():].strip())
