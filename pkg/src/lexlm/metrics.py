"""Lexical summarization metrics, classification scoring, and LLM-judge
prompt formatting/parsing.

Metric tokenization is deliberately simple and documented: lowercase,
split on Unicode whitespace, strip surrounding punctuation. Scores are
comparable across runs of this toolkit, not across papers. All metrics
are pure functions and trivially parallel over example pairs.
"""

from __future__ import annotations

import json
import math
import os
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import FormatError

__all__ = [
    "MetricScore",
    "JudgeScores",
    "metric_tokenize",
    "rouge1",
    "rougeL",
    "bleu",
    "meteor",
    "classification_scores",
    "evaluate_summaries",
    "judge_request",
    "judge_payload",
    "judge_parse",
    "JudgeEndpoint",
    "JUDGE_TOKEN_ENV",
]

METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0

JUDGE_TOKEN_ENV = "LEXLM_JUDGE_TOKEN"


@dataclass
class MetricScore:
    name: str
    value: float
    support: int


@dataclass
class JudgeScores:
    clarity: float
    relevance: float
    completeness: float
    legal_reasoning: float

    def __post_init__(self):
        for f in ("clarity", "relevance", "completeness", "legal_reasoning"):
            v = getattr(self, f)
            if not 0 <= v <= 10:
                raise ValueError(f"{f} score {v} out of range [0, 10]")


def metric_tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip surrounding punctuation."""
    out = []
    for chunk in text.lower().split():
        word = chunk.strip("".join(
            c for c in chunk if unicodedata.category(c).startswith("P")))
        if word:
            out.append(word)
    return out


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# summary metrics
# ---------------------------------------------------------------------------


def rouge1(candidate: str, reference: str) -> float:
    """Unigram-overlap F1 with clipped counts."""
    cand = metric_tokenize(candidate)
    ref = metric_tokenize(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    overlap = sum((Counter(cand) & Counter(ref)).values())
    return _f1(overlap / len(cand), overlap / len(ref))


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rougeL(candidate: str, reference: str) -> float:
    """Longest-common-subsequence F1."""
    cand = metric_tokenize(candidate)
    ref = metric_tokenize(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = _lcs_len(cand, ref)
    return _f1(lcs / len(cand), lcs / len(ref))


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions (n = 1..max_n) times the
    brevity penalty. Orders the candidate is too short to have are skipped;
    beyond n=1 a zero count smooths to 1/(total+1) so a single reference
    does not zero the score out."""
    cand = metric_tokenize(candidate)
    ref = metric_tokenize(reference)
    if not cand:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        total = len(cand) - n + 1
        if total <= 0:
            continue
        matched = sum((_ngrams(cand, n) & _ngrams(ref, n)).values())
        if matched == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = matched / total
        logs.append(math.log(p))
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(sum(logs) / len(logs))


def _leftmost_alignment(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Match each candidate token to the earliest unused equal reference
    token; deterministic, so the chunk count is well defined."""
    used = [False] * len(ref)
    pairs = []
    for i, w in enumerate(cand):
        for j, r in enumerate(ref):
            if not used[j] and r == w:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor(candidate: str, reference: str) -> float:
    """Exact-match harmonic mean of unigram precision/recall with a
    fragmentation penalty: F * (1 - gamma * (chunks/matches)^beta)."""
    cand = metric_tokenize(candidate)
    ref = metric_tokenize(reference)
    pairs = _leftmost_alignment(cand, ref)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    p = matches / len(cand)
    r = matches / len(ref)
    f_mean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    penalty = METEOR_GAMMA * (chunks / matches) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


def evaluate_summaries(pairs: Iterable[tuple[str, str]]) -> dict[str, MetricScore]:
    """Mean of each summary metric over (candidate, reference) pairs."""
    sums = {"rouge1": 0.0, "rougeL": 0.0, "bleu": 0.0, "meteor": 0.0}
    fns = {"rouge1": rouge1, "rougeL": rougeL, "bleu": bleu, "meteor": meteor}
    n = 0
    for cand, ref in pairs:
        for name, fn in fns.items():
            sums[name] += fn(cand, ref)
        n += 1
    if n == 0:
        raise ValueError("no evaluation pairs")
    return {name: MetricScore(name, sums[name] / n, n) for name in sums}


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def classification_scores(predictions: Sequence[int | None],
                          truths: Sequence[int]) -> tuple[float, float]:
    """(accuracy, macro_f1) for binary accept/reject labels.

    None marks an unparseable prediction: wrong for accuracy and a recall
    miss for the true class. Per-class F1 is 0 when undefined.
    """
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not truths:
        raise ValueError("nothing to score")
    correct = sum(1 for p, t in zip(predictions, truths) if p == t)
    f1s = []
    for cls in (0, 1):
        tp = sum(1 for p, t in zip(predictions, truths) if p == cls and t == cls)
        fp = sum(1 for p, t in zip(predictions, truths) if p == cls and t != cls)
        fn = sum(1 for p, t in zip(predictions, truths) if p != cls and t == cls)
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    return correct / len(truths), sum(f1s) / len(f1s)


# ---------------------------------------------------------------------------
# LLM judge formatting / parsing
# ---------------------------------------------------------------------------

_JUDGE_RUBRIC = (
    "You are grading a legal assistant's response. Rate the response on "
    "clarity, relevance, completeness, and legal reasoning in a scale of 10.\n"
    "Reply with only a JSON object of four numbers, e.g. "
    '{"clarity": 0, "relevance": 0, "completeness": 0, "legal_reasoning": 0}.'
)


def judge_request(instruction: str, input_text: str | None, response: str) -> str:
    """Rubric prompt embedding the instruction, optional input, and the
    model response to be judged."""
    if not response:
        raise ValueError("response must be non-empty")
    parts = [_JUDGE_RUBRIC, "", f"Instruction: {instruction}"]
    if input_text:
        parts.append(f"Input: {input_text}")
    parts.append(f"Response: {response}")
    return "\n".join(parts)


def judge_payload(instruction: str, input_text: str | None, response: str) -> dict:
    """Transport-agnostic request body; dispatch lives elsewhere (endpoint
    URL from configuration, bearer token from the LEXLM_JUDGE_TOKEN
    environment variable)."""
    return {"prompt": judge_request(instruction, input_text, response)}


@dataclass
class JudgeEndpoint:
    """Where judge requests would be POSTed. Only formats the request;
    nothing here performs network IO."""

    url: str
    token_env: str = JUDGE_TOKEN_ENV

    def request(self, instruction: str, input_text: str | None, response: str) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return {"method": "POST", "url": self.url, "headers": headers,
                "body": judge_payload(instruction, input_text, response)}


_JSON_OBJECT_RE = re.compile(r"\{.*\}", re.DOTALL)


def judge_parse(reply: str) -> JudgeScores:
    """Extract and range-check the four scores from a judge reply."""
    m = _JSON_OBJECT_RE.search(reply)
    if not m:
        raise FormatError("judge reply contains no JSON object")
    try:
        obj = json.loads(m.group(0))
    except json.JSONDecodeError as exc:
        raise FormatError(f"judge reply JSON is malformed: {exc}") from exc
    fields = {}
    for key in ("clarity", "relevance", "completeness", "legal_reasoning"):
        if key not in obj or not isinstance(obj[key], (int, float)) or isinstance(obj[key], bool):
            raise FormatError(f"judge reply is missing a numeric {key!r}")
        fields[key] = float(obj[key])
    return JudgeScores(**fields)
