"""Desk-scale autoregressive language-model toolkit for legal text."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ContextOverflowError,
    FormatError,
    JudgementParseError,
    NumericError,
)
