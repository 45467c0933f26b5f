import numpy as np
import pytest

from app.errors import VocabError
from app.vocab import (
    BOS_ID,
    EOS_ID,
    MASK_ID,
    PAD_ID,
    SPECIALS,
    UNK_ID,
    Vocab,
    build_vocab,
    decode,
    encode,
    load_vocab,
)


def test_special_ids_are_fixed():
    assert (PAD_ID, BOS_ID, EOS_ID, UNK_ID, MASK_ID) == (0, 1, 2, 3, 4)
    vocab = build_vocab(["x"])
    assert vocab.id_to_token[:5] == list(SPECIALS)


def test_tokens_ordered_by_frequency_then_spelling():
    vocab = build_vocab(["b a b", "c"])
    assert vocab.id_to_token[5:] == ["b", "a", "c"]


def test_encode_maps_unknown_and_reserved_spellings_to_unk():
    vocab = build_vocab(["a b c"])
    assert encode("a z [MASK] c", vocab) == [vocab.token_to_id["a"], UNK_ID, UNK_ID, vocab.token_to_id["c"]]


def test_reserved_spellings_are_not_admitted():
    vocab = build_vocab(["[EOS] [en] a"], language_tags=["en"])
    assert vocab.id_to_token.count("[EOS]") == 1
    assert vocab.id_to_token == list(SPECIALS) + ["[en]", "a"]
    assert encode("[en]", vocab) == [UNK_ID]


def test_decode_renders_specials_literally():
    vocab = build_vocab(["the gardener watered the flowers"])
    ids = encode("the gardener", vocab) + [EOS_ID]
    assert decode(ids, vocab) == "the gardener [EOS]"


def test_decode_rejects_out_of_range_ids():
    vocab = build_vocab(["a"])
    with pytest.raises(VocabError):
        decode([len(vocab)], vocab)


def test_min_freq_and_max_size():
    vocab = build_vocab(["a a a b b c"], min_freq=2)
    assert vocab.id_to_token[5:] == ["a", "b"]
    capped = build_vocab(["a a a b b c"], max_size=6)
    assert capped.id_to_token[5:] == ["a"]


@pytest.mark.parametrize("lines", [[], ["", "   "]])
def test_empty_corpus_is_rejected(lines):
    with pytest.raises(VocabError):
        build_vocab(lines)


def test_min_freq_must_be_positive():
    with pytest.raises(VocabError):
        build_vocab(["a"], min_freq=0)


def test_vocab_requires_specials_first():
    with pytest.raises(VocabError):
        Vocab(["a", "[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]"])


def test_save_and_load_keep_ids_and_tags(tmp_path):
    vocab = build_vocab(["der hund", "the dog"], language_tags=["en", "de"])
    path = tmp_path / "vocab.txt"
    vocab.save(str(path))
    loaded = load_vocab(str(path), num_tags=vocab.num_tags)
    assert loaded == vocab
    assert loaded.num_tags == 2
    assert loaded.tag_id("de") == vocab.tag_id("de") == 6


def test_load_vocab_rejects_missing_specials(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("a\nb\n", encoding="utf-8")
    with pytest.raises(VocabError):
        load_vocab(str(path))


def test_bracketed_corpus_tokens_encode_the_same_after_reload(tmp_path):
    vocab = build_vocab(["[laughter] a [laughter] b [laughter]"])
    path = str(tmp_path / "vocab.txt")
    vocab.save(path)
    loaded = load_vocab(path, num_tags=vocab.num_tags)
    assert encode("[laughter] a", loaded) == encode("[laughter] a", vocab) == [5, 6]


def test_vocabs_with_different_tag_counts_differ():
    tokens = list(SPECIALS) + ["[en]", "a"]
    assert Vocab(tokens, num_tags=1) != Vocab(tokens, num_tags=0)
    with pytest.raises(VocabError):
        Vocab(tokens, num_tags=3)


@pytest.fixture
def thousand_lines():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(300)]
    # zipf-like frequencies so min_freq actually cuts
    weights = 1.0 / np.arange(1, len(words) + 1)
    weights /= weights.sum()
    return [
        " " * int(rng.integers(0, 2)) + "  ".join(rng.choice(words, size=int(rng.integers(3, 12)), p=weights))
        for _ in range(1000)
    ]


@pytest.mark.parametrize("min_freq", [1, 3, 10])
def test_vocab_size_matches_brute_force_count(thousand_lines, min_freq):
    counts = {}
    for line in thousand_lines:
        for token in line.split():
            counts[token] = counts.get(token, 0) + 1
    expected = len(SPECIALS) + sum(1 for count in counts.values() if count >= min_freq)
    assert len(build_vocab(thousand_lines, min_freq=min_freq)) == expected


def test_built_corpus_encodes_without_unk(thousand_lines):
    vocab = build_vocab(thousand_lines)
    for line in thousand_lines:
        assert UNK_ID not in encode(line, vocab)


def test_decode_inverts_encode_up_to_whitespace(thousand_lines):
    vocab = build_vocab(thousand_lines)
    for line in thousand_lines:
        assert decode(encode(line, vocab), vocab) == " ".join(line.split())
