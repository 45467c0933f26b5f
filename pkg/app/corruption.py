"""
Span corruption and batch assembly.

A sentence x becomes a pair (x_src, x_trg): x_src replaces each masked token with [MASK]
(one [MASK] per token, so positions line up with x), and x_trg is the masked tokens in
order followed by [EOS].
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.errors import DataError
from app.utils import read_lines, safe_file_operation
from app.vocab import BOS_ID, EOS_ID, MASK_ID, PAD_ID, encode

MAX_SPAN = 10


@dataclass(frozen=True)
class SpanSet:
    """Sorted, non-overlapping inclusive (start, end) index pairs into the original sentence."""

    spans: tuple = ()

    def __len__(self):
        return len(self.spans)

    def __iter__(self):
        return iter(self.spans)

    @property
    def covered(self):
        return sum(v_end - u + 1 for u, v_end in self.spans)

    def lengths(self):
        return [v_end - u + 1 for u, v_end in self.spans]

    def positions(self):
        return [i for u, v_end in self.spans for i in range(u, v_end + 1)]

    def validate(self, n):
        previous_end = -1
        for u, v_end in self.spans:
            if not 0 <= u <= v_end < n:
                raise DataError(f"span ({u}, {v_end}) out of bounds for a sequence of length {n}")
            if u <= previous_end:
                raise DataError(f"span ({u}, {v_end}) overlaps or precedes the previous span")
            previous_end = v_end


def parse_spans(text):
    """Reads "1-2,5" as SpanSet(((1, 2), (5, 5))); a bare index is a one-token span."""
    spans = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        start, _, end = part.partition("-")
        try:
            spans.append((int(start), int(end or start)))
        except ValueError as e:
            raise DataError(f"cannot read span {part!r}; expected start-end") from e
    if not spans:
        raise DataError("no spans given")
    return SpanSet(tuple(spans))


@dataclass
class MaskedPair:
    """One pre-training instance."""

    src_ids: List[int]
    trg_ids: List[int]
    span_map: List[int]
    original_ids: List[int]
    line_no: Optional[int] = None
    lang_id: Optional[int] = None

    def reconstruct(self):
        """Writes the target tokens back through the span map into the source."""
        restored = list(self.src_ids)
        for token, position in zip(self.trg_ids[:-1], self.span_map):
            restored[position] = token
        return restored


@dataclass
class ParallelPair:
    """A fine-tuning instance (x, y); the target already ends with [EOS]."""

    src_ids: List[int]
    trg_ids: List[int]
    line_no: Optional[int] = None
    lang_id: Optional[int] = None
    span_map: Optional[List[int]] = field(default=None)


@dataclass
class PretrainBatch:
    """
    Padded matrices for one step. Masks are True on real tokens.

    `trg_in` is `[BOS] + trg[:-1]` per row; `trg_out` is the target itself.
    `lang_ids` holds each row's language tag id (-1 when untagged); it is bookkeeping for
    metrics and inspection, the model does not read it.
    """

    src: np.ndarray
    src_mask: np.ndarray
    trg_in: np.ndarray
    trg_out: np.ndarray
    trg_mask: np.ndarray
    span_maps: list
    lang_ids: np.ndarray
    order: list

    @property
    def rows(self):
        return self.src.shape[0]

    @property
    def num_tokens(self):
        return int(self.src_mask.sum() + self.trg_mask.sum())

    def detection_mask(self):
        """Target positions the discriminator is scored on: real tokens other than [EOS]."""
        return self.trg_mask & (self.trg_out != EOS_ID)


def _split_budget(budget, num_spans, max_span, rng):
    """
    Cuts `budget` into `num_spans` positive lengths at uniformly chosen points, then moves
    any excess over `max_span` one token at a time to random spans that still have room.
    Needs num_spans * max_span >= budget.
    """
    cuts = np.sort(rng.choice(budget - 1, size=num_spans - 1, replace=False)) + 1 if num_spans > 1 else []
    lengths = np.diff(np.concatenate([[0], cuts, [budget]])).astype(int)
    excess = int(np.maximum(lengths - max_span, 0).sum())
    lengths = np.minimum(lengths, max_span)
    for _ in range(excess):
        lengths[rng.choice(np.flatnonzero(lengths < max_span))] += 1
    return [int(x) for x in lengths]


def sample_spans(n, mask_ratio, mean_span, rng, max_span=MAX_SPAN):
    """
    Draws spans to mask in a sequence of length `n`.

    The budget is round(mask_ratio * n) tokens, at least one. Span lengths come from a
    geometric renewal process conditioned to cover the budget exactly in
    round(budget / mean_span) spans (more when `max_span` forces it): the budget is cut at
    uniformly chosen points, and any span over `max_span` hands its excess to spans with
    room. Spans are then placed uniformly at random without overlap.

    Args:
        n (int): Sequence length.
        mask_ratio (float): Fraction of tokens to mask, in [0, 1).
        mean_span (float): Mean span length, >= 1.
        rng (np.random.Generator): Random source.
        max_span (int): Longest allowed span.

    Returns:
        SpanSet: The sampled spans.
    """
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    if mean_span < 1.0:
        raise ValueError(f"mean_span must be >= 1, got {mean_span}")
    if mask_ratio == 0.0:
        return SpanSet(())

    budget = min(n, max(1, int(np.floor(mask_ratio * n + 0.5))))
    num_spans = max(1, int(np.floor(budget / mean_span + 0.5)), -(-budget // max_span))
    num_spans = min(num_spans, budget)
    lengths = _split_budget(budget, num_spans, max_span, rng)

    free = n - budget
    slots = np.sort(rng.choice(free + len(lengths), size=len(lengths), replace=False))
    spans = []
    consumed = 0
    for j, (slot, length) in enumerate(zip(slots, lengths)):
        start = int(slot) - j + consumed
        spans.append((start, start + length - 1))
        consumed += length
    return SpanSet(tuple(spans))


def apply_mask(original_ids, spans, vocab=None):
    """
    Builds the masked pair for one sentence.

    Args:
        original_ids (list): The uncorrupted token ids.
        spans (SpanSet): Spans to mask.
        vocab (Vocab): Optional; when given it must carry [MASK] at the reserved id.

    Returns:
        MaskedPair: Source with [MASK] per masked token, target spans + [EOS].
    """
    if vocab is not None and vocab.id_to_token[MASK_ID] != "[MASK]":
        raise DataError("vocab does not reserve [MASK] at its fixed id")
    original_ids = list(original_ids)
    spans.validate(len(original_ids))
    src_ids = list(original_ids)
    trg_ids = []
    span_map = []
    for u, v_end in spans:
        for position in range(u, v_end + 1):
            src_ids[position] = MASK_ID
            trg_ids.append(original_ids[position])
            span_map.append(position)
    trg_ids.append(EOS_ID)
    return MaskedPair(src_ids=src_ids, trg_ids=trg_ids, span_map=span_map, original_ids=original_ids)


def make_pretrain_pairs(sentences, rng, mask_ratio=0.15, mean_span=3.0, max_span=MAX_SPAN, lang_id=None):
    """
    Corrupts a list of encoded sentences.

    Args:
        sentences (list): (line_no, ids) tuples.
        rng (np.random.Generator): Random source for span sampling.

    Returns:
        list: MaskedPair per sentence, in input order.
    """
    pairs = []
    for line_no, ids in sentences:
        spans = sample_spans(len(ids), mask_ratio, mean_span, rng, max_span=max_span)
        pair = apply_mask(ids, spans)
        pair.line_no = line_no
        pair.lang_id = lang_id
        pairs.append(pair)
    return pairs


def make_parallel_pairs(src_lines, trg_lines, vocab, lang_id=None):
    """
    Encodes aligned parallel text for fine-tuning.

    Args:
        src_lines (list): Source sentences.
        trg_lines (list): Target sentences, same count as the sources.
        vocab (Vocab): Vocabulary.

    Returns:
        list: ParallelPair per line.
    """
    if len(src_lines) != len(trg_lines):
        raise DataError(
            f"parallel files are not aligned: {len(src_lines)} source lines vs {len(trg_lines)} target lines"
        )
    pairs = []
    for line_no, (src, trg) in enumerate(zip(src_lines, trg_lines), start=1):
        src_ids = encode(src, vocab)
        if not src_ids:
            raise DataError(f"line {line_no}: empty source sentence")
        pairs.append(
            ParallelPair(src_ids=src_ids, trg_ids=encode(trg, vocab) + [EOS_ID], line_no=line_no, lang_id=lang_id)
        )
    return pairs


def _pad(rows, width):
    matrix = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        matrix[i, : len(row)] = row
    return matrix


def make_batch(pairs, max_tokens, vocab=None):
    """
    Pads pairs into one batch, rows sorted by source length.

    Args:
        pairs (list): MaskedPair or ParallelPair instances.
        max_tokens (int): Longest source or target a row may hold (the model's position
            budget).
        vocab (Vocab): Unused beyond a [PAD] check; kept so callers pass what they encoded with.

    Returns:
        PretrainBatch: The padded batch.
    """
    if not pairs:
        raise DataError("cannot build a batch from zero pairs")
    if vocab is not None and vocab.id_to_token[PAD_ID] != "[PAD]":
        raise DataError("vocab does not reserve [PAD] at its fixed id")
    for index, pair in enumerate(pairs):
        longest = max(len(pair.src_ids), len(pair.trg_ids))
        if longest > max_tokens:
            where = pair.line_no if pair.line_no is not None else f"#{index}"
            raise DataError(f"line {where}: {longest} tokens exceed the limit of {max_tokens} positions")

    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i].src_ids), i))
    ordered = [pairs[i] for i in order]
    src_rows = [p.src_ids for p in ordered]
    trg_rows = [p.trg_ids for p in ordered]
    trg_in_rows = [[BOS_ID] + list(p.trg_ids[:-1]) for p in ordered]
    src_width = max(len(r) for r in src_rows)
    trg_width = max(len(r) for r in trg_rows)

    src = _pad(src_rows, src_width)
    trg_out = _pad(trg_rows, trg_width)
    return PretrainBatch(
        src=src,
        src_mask=_lengths_mask(src_rows, src_width),
        trg_in=_pad(trg_in_rows, trg_width),
        trg_out=trg_out,
        trg_mask=_lengths_mask(trg_rows, trg_width),
        span_maps=[p.span_map for p in ordered],
        lang_ids=np.array([-1 if p.lang_id is None else p.lang_id for p in ordered], dtype=np.int64),
        order=order,
    )


def _lengths_mask(rows, width):
    lengths = np.array([len(r) for r in rows])
    return np.arange(width)[None, :] < lengths[:, None]


@safe_file_operation
def load_corpus(path):
    """
    Reads a corpus: UTF-8, one sentence per line. Blank lines are skipped.

    Returns:
        list: (line_no, text) tuples with 1-based line numbers.
    """
    sentences = [(i, " ".join(line.split())) for i, line in enumerate(read_lines(path), start=1)]
    kept = [(i, text) for i, text in sentences if text]
    if len(kept) < len(sentences):
        logging.warning(f"Skipped {len(sentences) - len(kept)} blank lines in {path}")
    logging.info(f"Loaded {len(kept)} sentences from {path}")
    return kept
