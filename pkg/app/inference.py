"""
Autoregressive decoding with the encoder and one decoder stack.

The discriminator is not consulted; by default decoding runs through the generator, and
a model fine-tuned in D mode can decode through the discriminator stack instead.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

from app import autograd as ag
from app.config import DecodeConfig, DecoderChoice
from app.errors import ConfigError
from app.model import decoder_logits, encode
from app.vocab import BOS_ID, EOS_ID


@dataclass
class Hypothesis:
    """A decoded sequence (without the leading [BOS]) and its summed log-probability."""

    tokens: list
    log_prob: float

    def normalized(self, length_penalty):
        return self.log_prob / (max(len(self.tokens), 1) ** length_penalty)


def _as_row(src_ids):
    src = np.asarray(src_ids, dtype=np.int64)
    return src[None, :] if src.ndim == 1 else src


def _next_log_probs(H_e, prefixes, params, decoder):
    """Log-probabilities of the next token after each prefix, [rows, vocab] float64."""
    rows = len(prefixes)
    H = ag.Tensor(np.repeat(H_e.data, rows, axis=0))
    logits = decoder_logits(H, np.asarray(prefixes, dtype=np.int64), params, decoder)
    return special.log_softmax(logits.data[:, -1, :].astype(np.float64), axis=-1)


def beam_search(src_ids, params, beam_size=4, max_len=64, length_penalty=1.0, decoder=DecoderChoice.GENERATOR):
    """
    Beam search from [BOS].

    Each step expands every live prefix by every token and keeps the best `beam_size`
    candidates by summed log-probability (stable order, so ties go to the lower id).
    Candidates ending in [EOS] are finished; so is every live prefix once it holds max_len
    tokens. The result maximises log_prob / len ** length_penalty over finished
    hypotheses, len counting [EOS].

    Args:
        src_ids (list | np.ndarray): One source sentence.
        params (ModelParams): Model parameters.
        beam_size (int): Candidates kept per step; 1 is greedy decoding.
        max_len (int): Longest output in tokens.
        length_penalty (float): Exponent α of the length normalisation.
        decoder (DecoderChoice): Decoder stack that drives generation.

    Returns:
        Hypothesis: The best hypothesis.
    """
    if beam_size < 1 or max_len < 1:
        raise ConfigError(f"beam_size and max_len must be >= 1, got {beam_size} and {max_len}")
    if max_len > params.config.max_positions:
        raise ConfigError(f"max_len {max_len} exceeds the model's {params.config.max_positions} positions")

    with ag.no_grad():
        H_e = encode(_as_row(src_ids), None, params)
        live = [Hypothesis([], 0.0)]
        finished = []
        for _ in range(max_len):
            log_probs = _next_log_probs(H_e, [[BOS_ID] + h.tokens for h in live], params, decoder)
            totals = np.array([h.log_prob for h in live])[:, None] + log_probs
            order = np.argsort(-totals.ravel(), kind="stable")[:beam_size]
            vocab_size = log_probs.shape[1]
            next_live = []
            for flat in order:
                row, token = divmod(int(flat), vocab_size)
                candidate = Hypothesis(live[row].tokens + [token], float(totals[row, token]))
                (finished if token == EOS_ID else next_live).append(candidate)
            live = next_live
            if not live:
                break
        finished.extend(live)

    best = finished[0]
    for hypothesis in finished[1:]:
        if hypothesis.normalized(length_penalty) > best.normalized(length_penalty):
            best = hypothesis
    return best


def generate(src_ids, params, decode_config=None):
    """
    Decodes one source sentence.

    Returns:
        list: Output token ids, ending in [EOS] unless max_len cut the output short.
    """
    config = decode_config or DecodeConfig()
    best = beam_search(src_ids, params, config.beam_size, config.max_len, config.length_penalty, config.decoder)
    logging.debug(f"Decoded {len(best.tokens)} tokens, log-prob {best.log_prob:.4f}")
    return best.tokens


def step_log_probs(src_ids, trg_ids, params, decoder=DecoderChoice.GENERATOR):
    """Teacher-forced log-probability of each target token given the gold prefix."""
    trg = np.asarray(trg_ids, dtype=np.int64)
    if trg.ndim != 1 or trg.size == 0:
        raise ConfigError("score needs a non-empty 1-D target")
    with ag.no_grad():
        H_e = encode(_as_row(src_ids), None, params)
        decoder_input = np.concatenate([[BOS_ID], trg[:-1]])[None, :]
        logits = decoder_logits(H_e, decoder_input, params, decoder)
    log_probs = special.log_softmax(logits.data[0].astype(np.float64), axis=-1)
    return log_probs[np.arange(trg.size), trg]


def score(src_ids, trg_ids, params, decoder=DecoderChoice.GENERATOR):
    """
    Total teacher-forced log-probability of `trg_ids` (normally ending in [EOS]).

    Returns:
        float: Sum of per-token log-probabilities.
    """
    return float(step_log_probs(src_ids, trg_ids, params, decoder).sum())


def strip_eos(ids):
    """Tokens before the first [EOS]."""
    ids = list(ids)
    return ids[: ids.index(EOS_ID)] if EOS_ID in ids else ids
