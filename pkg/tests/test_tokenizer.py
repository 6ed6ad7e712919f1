import unicodedata
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lexlm import tokenizer as tz
from lexlm.errors import FormatError

SAMPLE_CORPUS = [
    "the appeal is allowed and the order of the high court is set aside",
    "the petition is dismissed with costs of 5000 rupees",
    "the appeal is allowed in part under section 302",
]


@pytest.fixture(scope="module")
def vocab():
    return tz.train_bpe(SAMPLE_CORPUS, 300)


# ---------------------------------------------------------------------------
# normalize
# ---------------------------------------------------------------------------


def test_normalize_composes():
    assert tz.normalize("é") == "é"


def test_normalize_ascii_fixed_point():
    assert tz.normalize("plain ascii 123") == "plain ascii 123"


def test_normalize_rejects_bad_bytes():
    with pytest.raises(UnicodeDecodeError):
        tz.normalize(b"\xff\xfe legal")


@given(st.text(max_size=60))
def test_normalize_idempotent(s):
    assert tz.normalize(tz.normalize(s)) == tz.normalize(s)


# ---------------------------------------------------------------------------
# pretokenize
# ---------------------------------------------------------------------------


def test_pretokenize_digit_splitting():
    assert tz.pretokenize("2023") == ["2", "0", "2", "3"]


def test_pretokenize_empty():
    assert tz.pretokenize("") == []


def test_pretokenize_space_marker_attaches():
    assert tz.pretokenize("tax 42") == ["tax", " 4", "2"]


def test_pretokenize_mixed_fragment():
    assert tz.pretokenize("ab12cd") == ["ab", "1", "2", "cd"]


@given(st.text(max_size=80))
def test_pretokenize_is_a_partition(s):
    s = tz.normalize(s)
    assert "".join(tz.pretokenize(s)) == s


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def brute_force_pair_counts(corpus):
    """Independent oracle: count adjacent byte pairs inside merge units."""
    counts = Counter()
    for doc in corpus:
        for frag in tz.pretokenize(tz.normalize(doc)):
            for unit in tz._merge_units(frag):
                for a, b in zip(unit, unit[1:]):
                    counts[(a, b)] += 1
    return counts


def test_first_merge_matches_pair_count_oracle():
    corpus = ["abab abab"]
    counts = brute_force_pair_counts(corpus)
    best = max(counts.items(), key=lambda kv: kv[1])
    assert best == ((ord("a"), ord("b")), 4)
    vocab = tz.train_bpe(corpus, tz.FIRST_MERGE_ID + 1)
    assert vocab.merges[0] == (ord("a"), ord("b"))
    assert vocab.tokens[tz.FIRST_MERGE_ID] == b"ab"


def test_single_byte_corpus_learns_nothing():
    vocab = tz.train_bpe(["a"], 400)
    assert len(vocab) == tz.FIRST_MERGE_ID
    assert vocab.merges == ()


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        tz.train_bpe([], 300)
    with pytest.raises(ValueError):
        tz.train_bpe([""], 300)


def test_target_vocab_bounds():
    with pytest.raises(ValueError):
        tz.train_bpe(["abc"], tz.FIRST_MERGE_ID)


def test_vocab_never_exceeds_target(vocab):
    assert len(vocab) <= 300


def test_vocab_reaches_target_on_rich_corpus():
    # with every pair repeating, training fills the target exactly
    assert len(tz.train_bpe(SAMPLE_CORPUS * 10, 300)) == 300


def test_byte_and_special_layout(vocab):
    assert vocab.tokens[:256] == tuple(bytes([b]) for b in range(256))
    assert vocab.tokens[256:259] == tz.SPECIAL_TOKENS
    assert vocab.bos_id == 256 and vocab.eos_id == 257 and vocab.pad_id == 258


def test_no_duplicate_tokens(vocab):
    assert len(set(vocab.tokens)) == len(vocab.tokens)


def test_merged_tokens_concatenate_parents(vocab):
    for rank, (left, right) in enumerate(vocab.merges):
        assert vocab.tokens[tz.FIRST_MERGE_ID + rank] == vocab.tokens[left] + vocab.tokens[right]


def rank_sweep_segmentation(vocab, unit):
    """Oracle: apply every merge in rank order across the unit."""
    ids = list(unit)
    for rank, pair in enumerate(vocab.merges):
        ids = list(tz._merge_word(tuple(ids), pair, tz.FIRST_MERGE_ID + rank))
    return ids


def test_encode_matches_rank_sweep_oracle(vocab):
    for doc in SAMPLE_CORPUS:
        for frag in tz.pretokenize(tz.normalize(doc)):
            for unit in tz._merge_units(frag):
                assert tz._encode_unit(vocab, unit) == rank_sweep_segmentation(vocab, unit)


def test_dedup_tokens_remaps_densely():
    # synthetic duplicate: two merge paths to the same byte-string "abc"
    tokens = [bytes([b]) for b in range(256)] + list(tz.SPECIAL_TOKENS)
    a, b, c = ord("a"), ord("b"), ord("c")
    tokens += [b"ab", b"abc", b"bc", b"abc"]
    merges = [(a, b), (259, c), (b, c), (a, 261)]
    kept_tokens, kept_merges = tz.dedup_tokens(tokens, merges)
    assert kept_tokens.count(b"abc") == 1
    assert len(kept_tokens) == len(tokens) - 1
    vocab = tz.Vocabulary(tokens=tuple(kept_tokens), merges=tuple(kept_merges))
    assert vocab.tokens[tz.FIRST_MERGE_ID:] == (b"ab", b"abc", b"bc")


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------


def test_encode_empty(vocab):
    assert tz.encode(vocab, "") == []


def test_encode_applies_learned_merge():
    vocab = tz.train_bpe(["abab abab"], tz.FIRST_MERGE_ID + 1)
    assert tz.encode(vocab, "abab") == [tz.FIRST_MERGE_ID, tz.FIRST_MERGE_ID]


def test_unseen_emoji_falls_back_to_bytes(vocab):
    ids = tz.encode(vocab, "\U0001f916")
    assert ids == list("\U0001f916".encode("utf-8"))


def test_decode_empty(vocab):
    assert tz.decode(vocab, []) == ""


def test_decode_skips_specials(vocab):
    ids = [vocab.bos_id] + tz.encode(vocab, "order") + [vocab.eos_id]
    assert tz.decode(vocab, ids) == "order"


def test_decode_range_check(vocab):
    with pytest.raises(IndexError):
        tz.decode(vocab, [len(vocab)])


def test_round_trip_corpus(vocab):
    for doc in SAMPLE_CORPUS:
        assert tz.decode(vocab, tz.encode(vocab, doc)) == doc


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=60))
def test_round_trip_nfc_fuzz(vocab, s):
    s = tz.normalize(s)
    assert tz.decode(vocab, tz.encode(vocab, s)) == s


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=60))
def test_encode_decode_is_nfc_projection(vocab, s):
    assert tz.decode(vocab, tz.encode(vocab, s)) == unicodedata.normalize("NFC", s)


def test_encode_deterministic(vocab):
    text = "the order of 2023 is set aside \U0001f916"
    assert tz.encode(vocab, text) == tz.encode(vocab, text)


def test_ascii_digits_are_single_byte_tokens(vocab):
    for text in ("2023", "tax 42", "a1b2c3", "order 302 of 1947"):
        for i in tz.encode(vocab, text):
            tok = vocab.tokens[i]
            if any(b in b"0123456789" for b in tok):
                assert len(tok) == 1


def test_unicode_digits_never_merge_with_neighbors(vocab):
    # Devanagari and Arabic-Indic digits are multi-byte; their tokens must
    # never span digit boundaries
    text = "०१ rupees ٠١"
    ids = tz.encode(vocab, text)
    for i in ids:
        decoded = vocab.tokens[i].decode("utf-8", errors="ignore")
        digits = [c for c in decoded if c.isdigit()]
        if digits:
            assert len(decoded) == 1


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def test_vocab_file_round_trip(tmp_path, vocab):
    path = tmp_path / "legal.vocab"
    tz.save_vocab(vocab, path)
    loaded = tz.load_vocab(path)
    assert loaded.tokens == vocab.tokens
    assert loaded.merges == vocab.merges
    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert first == f"AYN-BPE v1 vocab={len(vocab)}"


def test_vocab_file_bad_header(tmp_path):
    path = tmp_path / "bad.vocab"
    path.write_text("NOT-A-VOCAB\n", encoding="utf-8")
    with pytest.raises(FormatError):
        tz.load_vocab(path)


def test_vocab_file_truncated(tmp_path, vocab):
    path = tmp_path / "trunc.vocab"
    text = tz.vocab_to_text(vocab)
    path.write_text(text[:len(text) // 2].rsplit("\n", 1)[0], encoding="utf-8")
    with pytest.raises(FormatError):
        tz.load_vocab(path)
