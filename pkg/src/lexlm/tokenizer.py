"""Byte-fallback BPE tokenizer with NFC normalization and digit isolation.

Text is treated as UTF-8 bytes; the 256 single bytes are always tokens, so
encoding is total (nothing is ever "unknown"). Whitespace runs attach to
the following word as a leading-space marker; the marker is the literal
space bytes themselves, which keeps decode(encode(s)) byte-exact for every
NFC-normalized string. Decimal digits are hard merge barriers: a digit
never merges with its neighbors, not even the space marker, so each digit
always comes out as its own token.

A trained Vocabulary is immutable and freely shareable across threads.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .errors import FormatError

__all__ = [
    "Vocabulary",
    "N_BYTE_TOKENS",
    "SPECIAL_TOKENS",
    "normalize",
    "pretokenize",
    "train_bpe",
    "encode",
    "decode",
    "vocab_to_text",
    "save_vocab",
    "load_vocab",
]

N_BYTE_TOKENS = 256
SPECIAL_TOKENS = (b"<|bos|>", b"<|eos|>", b"<|pad|>")
FIRST_MERGE_ID = N_BYTE_TOKENS + len(SPECIAL_TOKENS)

_FRAGMENT_RE = re.compile(r"\s*\S+|\s+\Z")
_WS_PREFIX_RE = re.compile(r"(\s*)(\S*)")
_UNIT_RE = re.compile(r"\d|\D+")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token table: 256 byte tokens, then BOS/EOS/PAD, then merged
    tokens in merge-rank order (token id for rank r is FIRST_MERGE_ID + r)."""

    tokens: tuple[bytes, ...]
    merges: tuple[tuple[int, int], ...]
    _merge_lookup: dict[tuple[int, int], tuple[int, int]] = field(
        default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        toks = self.tokens
        if len(toks) < FIRST_MERGE_ID:
            raise ValueError("vocabulary is missing byte or special tokens")
        for b in range(N_BYTE_TOKENS):
            if toks[b] != bytes([b]):
                raise ValueError(f"token {b} is not the single byte 0x{b:02x}")
        for i, s in enumerate(SPECIAL_TOKENS):
            if toks[N_BYTE_TOKENS + i] != s:
                raise ValueError(f"special token {i} must be {s!r}")
        if len(toks) != FIRST_MERGE_ID + len(self.merges):
            raise ValueError("token count does not match merge count")
        if len(set(toks)) != len(toks):
            raise ValueError("duplicate token byte-strings")
        for rank, (left, right) in enumerate(self.merges):
            new_id = FIRST_MERGE_ID + rank
            if not (0 <= left < new_id and 0 <= right < new_id):
                raise ValueError(f"merge {rank} references a later token")
            if toks[new_id] != toks[left] + toks[right]:
                raise ValueError(f"merge {rank} does not concatenate its parents")
            self._merge_lookup[(left, right)] = (rank, new_id)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return N_BYTE_TOKENS

    @property
    def eos_id(self) -> int:
        return N_BYTE_TOKENS + 1

    @property
    def pad_id(self) -> int:
        return N_BYTE_TOKENS + 2

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.bos_id, self.eos_id, self.pad_id))


def normalize(text: str | bytes) -> str:
    """Unicode NFC form of the text; idempotent."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")  # invalid UTF-8 raises here
    return unicodedata.normalize("NFC", text)


def pretokenize(text: str) -> list[str]:
    """Split normalized text into fragments.

    Whitespace runs attach to the following word as a prefix; each decimal
    digit becomes its own fragment (the prefix stays on the first piece).
    Concatenating the fragments reproduces the input exactly.
    """
    fragments: list[str] = []
    for frag in _FRAGMENT_RE.findall(text):
        prefix, content = _WS_PREFIX_RE.match(frag).groups()
        if not content:
            fragments.append(frag)
            continue
        pieces = _UNIT_RE.findall(content)
        pieces[0] = prefix + pieces[0]
        fragments.extend(pieces)
    return fragments


def _merge_units(fragment: str) -> list[bytes]:
    """Independent merge regions of one fragment: digits are barriers, so
    the space marker and every digit form their own unit."""
    return [u.encode("utf-8") for u in _UNIT_RE.findall(fragment)]


def _iter_units(documents: Iterable[str]) -> Iterator[bytes]:
    for doc in documents:
        for frag in pretokenize(normalize(doc)):
            yield from _merge_units(frag)


def _merge_word(word: tuple[int, ...], pair: tuple[int, int], new_id: int) -> tuple[int, ...]:
    """Replace non-overlapping occurrences of pair, left to right."""
    out: list[int] = []
    i = 0
    n = len(word)
    while i < n:
        if i + 1 < n and word[i] == pair[0] and word[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def dedup_tokens(tokens: list[bytes], merges: list[tuple[int, int]]
                 ) -> tuple[list[bytes], list[tuple[int, int]]]:
    """Drop tokens whose byte-string duplicates an earlier one, remapping
    ids densely. Merges that produced a dropped token are dropped too;
    surviving merge operands are remapped to the canonical ids."""
    remap: dict[int, int] = {}
    canonical: dict[bytes, int] = {}
    kept_tokens: list[bytes] = []
    kept_ranks: list[int] = []
    for old_id, tok in enumerate(tokens):
        if tok in canonical:
            remap[old_id] = canonical[tok]
            continue
        new_id = len(kept_tokens)
        canonical[tok] = new_id
        remap[old_id] = new_id
        kept_tokens.append(tok)
        if old_id >= FIRST_MERGE_ID:
            kept_ranks.append(old_id - FIRST_MERGE_ID)
    kept_merges = [(remap[merges[r][0]], remap[merges[r][1]]) for r in kept_ranks]
    return kept_tokens, kept_merges


def train_bpe(corpus: Iterable[str], target_vocab: int) -> Vocabulary:
    """Learn merges by repeatedly fusing the most frequent adjacent pair.

    Stops when the vocabulary reaches target_vocab (which counts the 256
    byte tokens and the specials) or when no pair occurs at least twice.
    Ties break toward the lexicographically smaller concatenated
    byte-string. A pair whose concatenation would duplicate an existing
    token's byte-string is skipped. Counting is a single deterministic
    pass; sharded counting would merge the count maps in shard order.
    """
    if target_vocab <= FIRST_MERGE_ID:
        raise ValueError(f"target_vocab must exceed {FIRST_MERGE_ID}")
    words: dict[tuple[int, ...], int] = {}
    for unit in _iter_units(corpus):
        key = tuple(unit)
        words[key] = words.get(key, 0) + 1
    if not words:
        raise ValueError("empty corpus")

    tokens: list[bytes] = [bytes([b]) for b in range(N_BYTE_TOKENS)] + list(SPECIAL_TOKENS)
    token_set = set(tokens)
    merges: list[tuple[int, int]] = []

    while len(tokens) < target_vocab:
        counts: dict[tuple[int, int], int] = {}
        for word, freq in words.items():
            for pair in zip(word, word[1:]):
                counts[pair] = counts.get(pair, 0) + freq
        candidates = {p: c for p, c in counts.items()
                      if c >= 2 and tokens[p[0]] + tokens[p[1]] not in token_set}
        if not candidates:
            break
        best = min(candidates, key=lambda p: (-candidates[p], tokens[p[0]] + tokens[p[1]]))
        new_id = len(tokens)
        new_tok = tokens[best[0]] + tokens[best[1]]
        tokens.append(new_tok)
        token_set.add(new_tok)
        merges.append(best)
        words = {_merge_word(w, best, new_id): f for w, f in words.items()}

    tokens, merges = dedup_tokens(tokens, merges)
    return Vocabulary(tokens=tuple(tokens), merges=tuple(merges))


def _encode_unit(vocab: Vocabulary, unit: bytes) -> list[int]:
    ids = list(unit)
    lookup = vocab._merge_lookup
    while len(ids) > 1:
        best_rank = None
        best_pair = None
        for pair in zip(ids, ids[1:]):
            hit = lookup.get(pair)
            if hit is not None and (best_rank is None or hit[0] < best_rank):
                best_rank, best_pair = hit[0], pair
        if best_pair is None:
            break
        ids = list(_merge_word(tuple(ids), best_pair, FIRST_MERGE_ID + best_rank))
    return ids


def encode(vocab: Vocabulary, text: str) -> list[int]:
    """normalize -> pretokenize -> per-unit lowest-rank merging.

    Bytes with no merge path stay byte tokens, so any UTF-8 input encodes.
    Deterministic: identical text gives identical ids.
    """
    ids: list[int] = []
    for frag in pretokenize(normalize(text)):
        for unit in _merge_units(frag):
            ids.extend(_encode_unit(vocab, unit))
    return ids


def decode(vocab: Vocabulary, ids: Iterable[int]) -> str:
    """Concatenate token byte-strings and interpret as UTF-8.

    Special tokens contribute nothing. Byte sequences that a sampler cut
    mid-codepoint decode with replacement characters rather than raising.
    """
    parts: list[bytes] = []
    specials = vocab.special_ids
    for i in ids:
        if not 0 <= i < len(vocab.tokens):
            raise IndexError(f"token id {i} out of range")
        if i in specials:
            continue
        parts.append(vocab.tokens[i])
    return b"".join(parts).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# vocabulary file format
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^AYN-BPE v1 vocab=(\d+)$")


def vocab_to_text(vocab: Vocabulary) -> str:
    """Text format: header line `AYN-BPE v1 vocab=<V>`, one hex-escaped
    token per line, `#MERGES`, then `left_id right_id` lines in rank order."""
    lines = [f"AYN-BPE v1 vocab={len(vocab)}"]
    lines.extend(tok.hex() for tok in vocab.tokens)
    lines.append("#MERGES")
    lines.extend(f"{l} {r}" for l, r in vocab.merges)
    return "\n".join(lines) + "\n"


def save_vocab(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(vocab_to_text(vocab))


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty vocabulary file")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise FormatError(f"bad vocabulary header: {lines[0]!r}")
    size = int(m.group(1))
    if len(lines) < 1 + size + 1 or lines[1 + size] != "#MERGES":
        raise FormatError("vocabulary file truncated or missing #MERGES")
    try:
        tokens = tuple(bytes.fromhex(line) for line in lines[1:1 + size])
    except ValueError as exc:
        raise FormatError(f"bad token hex line: {exc}") from exc
    merges = []
    for line in lines[2 + size:]:
        if not line:
            continue
        try:
            left, right = (int(p) for p in line.split())
        except ValueError as exc:
            raise FormatError(f"bad merge line {line!r}") from exc
        merges.append((left, right))
    try:
        return Vocabulary(tokens=tokens, merges=tuple(merges))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
