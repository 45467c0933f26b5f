"""
Training objectives.

L_G   masked-span (or target) cross-entropy of the generator under teacher forcing.
L_D   replaced token detection: the discriminator labels each sampled target token
      ORIGINAL or REPLACED.
L_DG  replaced token denoising: the generator regenerates the gold target from a previous
      context corrupted at the discriminator's mistakes.
The pre-training and discriminator-enhanced fine-tuning loss is L_G + λ·L_D + L_DG.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np
from scipy import special

from app import autograd as ag
from app.config import DecoderChoice, FinetuneMode, ObjectiveOptions, ReplacementPolicy
from app.errors import DataError
from app.model import decoder_logits, discriminator_decode, encode, generator_decode
from app.vocab import BOS_ID, PAD_ID

IGNORE = -1


class TokenLabel(IntEnum):
    ORIGINAL = 0
    REPLACED = 1


@dataclass
class SampledTarget:
    """A target sampled from the generator next to the gold target it imitates."""

    sampled_ids: np.ndarray
    gold_ids: np.ndarray
    replaced_labels: np.ndarray
    distributions: np.ndarray
    mask: np.ndarray


@dataclass
class NoisyContext:
    """The gold target with the positions in `replaced_positions` swapped for wrong tokens."""

    noisy_ids: np.ndarray
    replaced_positions: np.ndarray

    @property
    def p(self):
        return int(self.replaced_positions.sum())

    def positions(self):
        return [tuple(int(i) for i in idx) for idx in np.argwhere(self.replaced_positions)]


@dataclass
class TrainStepOutput:
    """Loss breakdown and detection diagnostics for one batch."""

    loss: ag.Tensor
    L_G: float
    L_D: Optional[float] = None
    L_DG: Optional[float] = None
    det_acc: Optional[float] = None
    replaced_rate: Optional[float] = None
    p: int = 0
    sampled: Optional[SampledTarget] = field(default=None, repr=False)
    noisy: Optional[NoisyContext] = field(default=None, repr=False)
    V: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def combined(self):
        return float(self.loss.data)

    def metrics(self, step):
        """The per-step record written to metrics.jsonl."""
        return {
            "step": int(step),
            "L_G": self.L_G,
            "L_D": self.L_D,
            "L_DG": self.L_DG,
            "combined": self.combined,
            "det_acc": self.det_acc,
            "replaced_rate": self.replaced_rate,
            "p": self.p,
        }


def _data(x):
    return x.data if isinstance(x, ag.Tensor) else np.asarray(x)


def combine_losses(L_G, L_D, L_DG, lambda_d):
    """L_G + λ·L_D + L_DG for plain numbers."""
    return L_G + lambda_d * L_D + L_DG


def generator_loss(logits, gold_trg, pad_mask, smoothing=0.0):
    """
    Token-mean label-smoothed cross-entropy over non-pad target positions.

    Args:
        logits (Tensor): [rows, len, vocab].
        gold_trg (np.ndarray): [rows, len] gold ids.
        pad_mask (np.ndarray): True on real tokens.
        smoothing (float): Label smoothing ratio in [0, 1).

    Returns:
        Tensor: Scalar loss.
    """
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if not pad_mask.any():
        raise DataError("generator_loss: every target position is padding")
    targets = np.where(pad_mask, np.asarray(gold_trg, dtype=np.int64), IGNORE)
    return ag.cross_entropy(logits, targets, label_smoothing=smoothing, ignore_index=IGNORE)


def token_distributions(logits, temperature=1.0):
    """Per-position categorical distributions softmax(logits / temperature), float64."""
    return special.softmax(_data(logits).astype(np.float64) / temperature, axis=-1)


def _draw(cdf, u, allowed):
    """Inverse-CDF draw; never returns a zero-probability id."""
    index = int(np.searchsorted(cdf, u, side="right"))
    last = int(np.flatnonzero(allowed)[-1])
    return min(index, last)


def sample_tokens(logits, temperature=1.0, rng=None):
    """
    Draws one token per position from softmax(logits / temperature).

    The draw happens on plain arrays, so no gradient flows through it.

    Args:
        logits (Tensor | np.ndarray): [..., vocab] teacher-forced logits.
        temperature (float): Softmax temperature.
        rng (np.random.Generator): Random source.

    Returns:
        np.ndarray: Sampled ids of shape logits.shape[:-1].
    """
    if rng is None:
        raise ValueError("sample_tokens needs an rng")
    probs = token_distributions(logits, temperature)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])
    ids = (cdf < u[..., None]).sum(axis=-1)
    overflow = ids >= probs.shape[-1]
    if overflow.any():
        last_positive = probs.shape[-1] - 1 - np.argmax((probs > 0)[..., ::-1], axis=-1)
        ids = np.where(overflow, last_positive, ids)
    return ids.astype(np.int64)


def replaced_labels(sampled_ids, gold_ids):
    """REPLACED exactly where the sampled token differs from the gold token."""
    return np.where(np.asarray(sampled_ids) != np.asarray(gold_ids), TokenLabel.REPLACED, TokenLabel.ORIGINAL).astype(
        np.int64
    )


def sample_target(logits, gold_ids, mask, rng, temperature=1.0):
    """
    Samples x̂_trg from teacher-forced generator logits and labels it against the gold target.

    Pad positions keep [PAD] in the sample.
    """
    mask = np.asarray(mask, dtype=bool)
    distributions = token_distributions(logits, temperature)
    sampled = np.where(mask, sample_tokens(logits, temperature, rng), PAD_ID)
    gold = np.asarray(gold_ids, dtype=np.int64)
    return SampledTarget(
        sampled_ids=sampled,
        gold_ids=gold,
        replaced_labels=replaced_labels(sampled, gold),
        distributions=distributions,
        mask=mask,
    )


def detection_loss(V, replaced_labels, mask=None):
    """
    Negated log-likelihood of the detection labels, averaged over masked-in tokens.

    V is the probability of ORIGINAL, so ORIGINAL tokens contribute -log V and REPLACED
    tokens -log(1 - V).
    """
    targets = (np.asarray(replaced_labels) == TokenLabel.ORIGINAL).astype(np.float64)
    return ag.binary_cross_entropy(V, targets, mask)


def misclassified_positions(V, replaced_labels, mask=None, threshold=0.5):
    """
    Positions where the thresholded discriminator disagrees with the true label.

    Args:
        V (Tensor | np.ndarray): Probability of ORIGINAL per token.
        replaced_labels (np.ndarray): TokenLabel values.
        mask (np.ndarray): Positions eligible at all ([EOS] and padding excluded by callers).
        threshold (float): V >= threshold predicts ORIGINAL.

    Returns:
        np.ndarray: Boolean mask of v.
    """
    predicted_original = _data(V) >= threshold
    is_original = np.asarray(replaced_labels) == TokenLabel.ORIGINAL
    wrong = predicted_original != is_original
    if mask is not None:
        wrong &= np.asarray(mask, dtype=bool)
    return wrong


def select_positions(V, labels, mask, policy=ReplacementPolicy.MISCLASSIFIED, threshold=0.5):
    """v under the configured replacement policy."""
    policy = ReplacementPolicy(policy)
    mask = np.asarray(mask, dtype=bool)
    if policy == ReplacementPolicy.MISCLASSIFIED:
        return misclassified_positions(V, labels, mask, threshold)
    if policy == ReplacementPolicy.ALL_SAMPLED:
        return mask.copy()
    return np.zeros_like(mask)


def build_noisy_context(gold_trg, sampled_ids, distributions, v, rng):
    """
    Corrupts the gold target at the positions in v.

    A position whose sample is already wrong takes the sample. A position whose sample is
    correct is resampled from its distribution with the gold token excluded and the rest
    renormalised (uniform over the other tokens if the gold token held all the mass).

    Args:
        gold_trg (np.ndarray): Gold ids.
        sampled_ids (np.ndarray): Sampled ids, same shape.
        distributions (np.ndarray): [..., vocab] probabilities per position.
        v (np.ndarray): Boolean mask of positions to corrupt.
        rng (np.random.Generator): Random source for resampling.

    Returns:
        NoisyContext: The corrupted context.
    """
    gold = np.asarray(gold_trg, dtype=np.int64)
    sampled = np.asarray(sampled_ids, dtype=np.int64)
    distributions = np.asarray(distributions, dtype=np.float64)
    v = np.asarray(v, dtype=bool)
    vocab_size = distributions.shape[-1]
    if v.any() and vocab_size < 2:
        raise DataError("cannot resample a different token from a vocabulary of size 1")

    noisy = gold.copy()
    for index in map(tuple, np.argwhere(v)):
        if sampled[index] != gold[index]:
            noisy[index] = sampled[index]
            continue
        probs = distributions[index].copy()
        probs[gold[index]] = 0.0
        total = probs.sum()
        if total <= 0.0:
            probs = np.ones(vocab_size)
            probs[gold[index]] = 0.0
            total = probs.sum()
        probs /= total
        noisy[index] = _draw(np.cumsum(probs), rng.random(), probs > 0)
    return NoisyContext(noisy_ids=noisy, replaced_positions=v)


def shift_right(ids, mask):
    """Decoder input [BOS] + ids[:-1] per row, with [PAD] wherever the row is padding."""
    ids = np.asarray(ids, dtype=np.int64)
    shifted = np.concatenate([np.full(ids.shape[:-1] + (1,), BOS_ID, dtype=np.int64), ids[..., :-1]], axis=-1)
    return np.where(np.asarray(mask, dtype=bool), shifted, PAD_ID)


def denoising_loss(H_e, noisy_context, gold_trg, params, src_mask=None, trg_mask=None, smoothing=0.0,
                   decoder=DecoderChoice.GENERATOR, training=False, rng=None):
    """
    L_DG: predict the gold target from the noisy previous context.

    The decoder reads [BOS] + noisy[:-1]; noisy tokens are constants.
    """
    gold = np.asarray(gold_trg, dtype=np.int64)
    trg_mask = np.ones(gold.shape, dtype=bool) if trg_mask is None else np.asarray(trg_mask, dtype=bool)
    decoder_input = shift_right(noisy_context.noisy_ids, trg_mask)
    logits = decoder_logits(H_e, decoder_input, params, decoder, src_mask, trg_mask, training, rng)
    return generator_loss(logits, gold, trg_mask, smoothing)


def _detection_stats(V, labels, mask, threshold):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None, None
    predicted_original = _data(V) >= threshold
    is_original = np.asarray(labels) == TokenLabel.ORIGINAL
    det_acc = float((predicted_original == is_original)[mask].mean())
    replaced_rate = float((~is_original)[mask].mean())
    return det_acc, replaced_rate


def _adversarial_step(batch, params, lambda_d, rng, options, training, train_generator, denoise_decoder):
    det_mask = batch.detection_mask()
    H_e = encode(batch.src, batch.src_mask, params, training, rng)

    if train_generator:
        logits = generator_decode(H_e, batch.trg_in, params, batch.src_mask, batch.trg_mask, training, rng)
        L_G = generator_loss(logits, batch.trg_out, batch.trg_mask, options.label_smoothing)
    else:
        with ag.no_grad():
            logits = generator_decode(H_e, batch.trg_in, params, batch.src_mask, batch.trg_mask, training, rng)
            L_G = generator_loss(logits, batch.trg_out, batch.trg_mask, options.label_smoothing)

    sampled = sample_target(logits, batch.trg_out, batch.trg_mask, rng, options.temperature)
    _, V = discriminator_decode(H_e, sampled.sampled_ids, params, batch.src_mask, batch.trg_mask, training, rng)
    L_D = detection_loss(V, sampled.replaced_labels, det_mask)
    loss = ag.scale(L_D, lambda_d)
    if train_generator:
        loss = L_G + loss

    noisy = None
    L_DG = None
    if options.use_denoising:
        v = select_positions(V, sampled.replaced_labels, det_mask, options.replacement_policy, options.threshold)
        noisy = build_noisy_context(batch.trg_out, sampled.sampled_ids, sampled.distributions, v, rng)
        L_DG = denoising_loss(H_e, noisy, batch.trg_out, params, batch.src_mask, batch.trg_mask,
                              options.label_smoothing, denoise_decoder, training, rng)
        loss = loss + L_DG

    det_acc, replaced_rate = _detection_stats(V, sampled.replaced_labels, det_mask, options.threshold)
    return TrainStepOutput(
        loss=loss,
        L_G=float(L_G.data),
        L_D=float(L_D.data),
        L_DG=None if L_DG is None else float(L_DG.data),
        det_acc=det_acc,
        replaced_rate=replaced_rate,
        p=0 if noisy is None else noisy.p,
        sampled=sampled,
        noisy=noisy,
        V=np.array(V.data, copy=True),
    )


def pretrain_loss(batch, params, lambda_d=10.0, rng=None, options=None, training=True):
    """
    L_P = L_G + λ·L_D + L_DG on one corrupted batch.

    One encoder pass feeds a teacher-forced generator pass (L_G), a sampled target, a
    discriminator pass (L_D), the noisy context built from the discriminator's mistakes,
    and a second generator pass on that context (L_DG).

    Args:
        batch (PretrainBatch): Masked pairs.
        params (ModelParams): Model parameters.
        lambda_d (float): Discriminator weight λ.
        rng (np.random.Generator): Drives dropout, sampling and resampling.
        options (ObjectiveOptions): Smoothing, replacement policy, denoising decoder.
        training (bool): Enables dropout.

    Returns:
        TrainStepOutput: Combined loss tensor plus the breakdown.
    """
    if lambda_d < 0:
        raise ValueError(f"lambda_d must be non-negative, got {lambda_d}")
    if rng is None:
        raise ValueError("pretrain_loss needs an rng")
    options = options or ObjectiveOptions()
    return _adversarial_step(batch, params, lambda_d, rng, options, training, True, options.denoise_decoder)


def finetune_loss(pair_batch, params, lambda_d=10.0, mode=FinetuneMode.GD, rng=None, options=None, training=True):
    """
    Fine-tuning loss on unmasked parallel pairs.

    G    L_G only (plain label-smoothed seq2seq).
    G+D  L_G + λ·L_D + L_DG, as in pre-training but without masking.
    D    λ·L_D + L_DG with the denoising pass through the discriminator decoder; the
         generator only supplies samples and is not trained.
    """
    mode = FinetuneMode(mode)
    options = options or ObjectiveOptions(label_smoothing=0.1)
    if mode == FinetuneMode.G:
        H_e = encode(pair_batch.src, pair_batch.src_mask, params, training, rng)
        logits = generator_decode(H_e, pair_batch.trg_in, params, pair_batch.src_mask, pair_batch.trg_mask,
                                  training, rng)
        L_G = generator_loss(logits, pair_batch.trg_out, pair_batch.trg_mask, options.label_smoothing)
        return TrainStepOutput(loss=L_G, L_G=float(L_G.data))
    if rng is None:
        raise ValueError("finetune_loss needs an rng in the D and G+D modes")
    if mode == FinetuneMode.GD:
        return _adversarial_step(pair_batch, params, lambda_d, rng, options, training, True, options.denoise_decoder)
    logging.debug("D-mode fine-tuning: generator frozen, denoising through the discriminator decoder")
    return _adversarial_step(pair_batch, params, lambda_d, rng, options, training, False,
                             DecoderChoice.DISCRIMINATOR)
