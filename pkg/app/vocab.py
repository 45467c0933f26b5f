import logging
from collections import Counter

from app.errors import VocabError
from app.utils import read_lines, write_lines, safe_file_operation

PAD, BOS, EOS, UNK, MASK = "[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]"
SPECIALS = (PAD, BOS, EOS, UNK, MASK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, MASK_ID = range(len(SPECIALS))


def language_tag(code):
    """Language tag token for a corpus, e.g. "en" -> "[en]"."""
    return f"[{code}]"


class Vocab:
    """
    Bidirectional token/id map. Ids 0-4 are always [PAD] [BOS] [EOS] [UNK] [MASK];
    language tags, when present, follow the specials.

    Args:
        tokens (list): Every token in id order, specials first.
        num_tags (int): How many language tags follow the specials.
    """

    def __init__(self, tokens, num_tags=0):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise VocabError(f"vocab must start with {SPECIALS}, got {tokens[: len(SPECIALS)]}")
        if len(set(tokens)) != len(tokens):
            duplicates = sorted(t for t, n in Counter(tokens).items() if n > 1)
            raise VocabError(f"duplicate tokens in vocab: {duplicates[:10]}")
        if not 0 <= num_tags <= len(tokens) - len(SPECIALS):
            raise VocabError(f"num_tags {num_tags} does not fit a vocab of {len(tokens)} tokens")
        self.id_to_token = tokens
        self.token_to_id = {token: idx for idx, token in enumerate(tokens)}
        self.num_tags = num_tags

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocab) and (self.id_to_token, self.num_tags) == (other.id_to_token, other.num_tags)

    @property
    def reserved(self):
        return set(self.id_to_token[: len(SPECIALS) + self.num_tags])

    def tag_id(self, code):
        """Id of a language tag, or None if the vocab has no such tag."""
        return self.token_to_id.get(language_tag(code))

    def encode(self, text):
        return encode(text, self)

    def decode(self, ids):
        return decode(ids, self)

    @safe_file_operation
    def save(self, path):
        """One token per line; the line number is the id."""
        write_lines(path, self.id_to_token)
        logging.info(f"Vocab of {len(self)} tokens saved to {path}")


def build_vocab(corpus_lines, min_freq=1, max_size=None, language_tags=()):
    """
    Builds a vocabulary from whitespace-tokenized text.

    Tokens are ordered by (frequency desc, token asc) after the specials and language tags.
    Corpus text that spells a special token or a language tag is not admitted and encodes
    to [UNK].

    Args:
        corpus_lines (iterable): Lines of text.
        min_freq (int): Minimum count for a token to be admitted.
        max_size (int): Maximum vocab size including specials, or None.
        language_tags (iterable): Language codes whose tags are reserved after the specials.

    Returns:
        Vocab: The built vocabulary.
    """
    if min_freq < 1:
        raise VocabError(f"min_freq must be >= 1, got {min_freq}")
    tags = [language_tag(code) for code in dict.fromkeys(language_tags)]
    head = list(SPECIALS) + tags
    if max_size is not None and max_size < len(head):
        raise VocabError(f"max_size {max_size} cannot hold the {len(head)} reserved tokens")

    counts = Counter()
    seen_lines = 0
    for line in corpus_lines:
        seen_lines += 1
        counts.update(line.split())
    if seen_lines == 0 or not counts:
        raise VocabError("cannot build a vocab from an empty corpus")

    reserved = set(head)
    admitted = sorted(
        (token for token, count in counts.items() if count >= min_freq and token not in reserved),
        key=lambda token: (-counts[token], token),
    )
    if max_size is not None:
        admitted = admitted[: max_size - len(head)]
    vocab = Vocab(head + admitted, num_tags=len(tags))
    logging.info(
        f"Built vocab: {len(vocab)} tokens from {seen_lines} lines "
        f"({len(counts)} distinct, min_freq={min_freq})"
    )
    return vocab


def encode(text, vocab):
    """
    Maps whitespace-separated tokens to ids; out-of-vocabulary and reserved spellings map
    to [UNK].

    Args:
        text (str): Input text.
        vocab (Vocab): Vocabulary.

    Returns:
        list: Token ids.
    """
    reserved = vocab.reserved
    lookup = vocab.token_to_id
    return [UNK_ID if token in reserved else lookup.get(token, UNK_ID) for token in text.split()]


def decode(ids, vocab):
    """
    Joins tokens with single spaces; specials are rendered literally.

    Args:
        ids (iterable): Token ids.
        vocab (Vocab): Vocabulary.

    Returns:
        str: Decoded text.
    """
    tokens = []
    for idx in ids:
        idx = int(idx)
        if not 0 <= idx < len(vocab):
            raise VocabError(f"token id {idx} out of range for vocab of size {len(vocab)}")
        tokens.append(vocab.id_to_token[idx])
    return " ".join(tokens)


def load_vocab(path, num_tags=0):
    """
    Loads a vocab file written by `Vocab.save`, checking that the specials head the file.

    The file carries only the tokens; how many language tags follow the specials is
    stored by the caller (the checkpoint manifest keeps it next to the file name).

    Args:
        path (str): Path to the vocab file.
        num_tags (int): Language tags that follow the specials.

    Returns:
        Vocab: The loaded vocabulary.
    """
    tokens = read_lines(path)
    if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
        raise VocabError(f"{path}: the first {len(SPECIALS)} lines must be {SPECIALS}")
    return Vocab(tokens, num_tags=num_tags)
