import dataclasses
import itertools

import numpy as np
import pytest
from scipy import stats

from create_testdata import TINY_MODEL

from app import autograd as ag
from app.config import FinetuneMode, ModelConfig, ObjectiveOptions, ReplacementPolicy
from app.corruption import make_batch, make_parallel_pairs, make_pretrain_pairs
from app.errors import DataError
from app.model import DETECTION_HEAD, encode, generator_decode, init_params
from app.objectives import (
    TokenLabel,
    build_noisy_context,
    combine_losses,
    detection_loss,
    finetune_loss,
    generator_loss,
    misclassified_positions,
    pretrain_loss,
    replaced_labels,
    sample_target,
    sample_tokens,
    select_positions,
    shift_right,
)
from app.vocab import BOS_ID, EOS_ID, PAD_ID

ORIGINAL, REPLACED = TokenLabel.ORIGINAL, TokenLabel.REPLACED


def pretrain_batch(vocab_size, seed=0, rows=4, length=8):
    rng = np.random.default_rng(seed)
    sentences = [(i, list(rng.integers(5, vocab_size, size=length))) for i in range(1, rows + 1)]
    return make_batch(make_pretrain_pairs(sentences, rng, mask_ratio=0.4), max_tokens=32)


def parallel_batch(vocab):
    pairs = make_parallel_pairs(["a b c", "d e", "f g a b"], ["c b a", "e d", "b a g f"], vocab)
    return make_batch(pairs, max_tokens=32)


def grads_of(params, prefix):
    return {name: params[name].grad for name in params.names() if name.startswith(prefix)}


# --- generator loss and sampling -------------------------------------------------------


@pytest.mark.parametrize("smoothing", [0.0, 0.1])
def test_uniform_logits_cost_log_vocab(smoothing):
    loss = generator_loss(ag.Tensor(np.zeros((2, 3, 8))), np.array([[1, 2, 3], [4, 5, 0]]),
                          np.array([[True, True, True], [True, True, False]]), smoothing)
    assert loss.item() == pytest.approx(np.log(8), rel=1e-6)


def test_confident_correct_logits_cost_nothing():
    logits = np.zeros((1, 2, 8))
    logits[0, 0, 3] = logits[0, 1, 5] = 20.0
    loss = generator_loss(ag.Tensor(logits), np.array([[3, 5]]), np.ones((1, 2), dtype=bool))
    assert loss.item() < 1e-6


def test_generator_loss_rejects_all_padding():
    with pytest.raises(DataError):
        generator_loss(ag.Tensor(np.zeros((1, 2, 4))), np.array([[1, 2]]), np.zeros((1, 2), dtype=bool))


def test_sample_tokens_follows_dominant_logit(rng):
    logits = np.zeros((3, 6))
    logits[np.arange(3), [1, 4, 2]] = 1e6
    assert list(sample_tokens(logits, rng=rng)) == [1, 4, 2]


def test_sample_tokens_uniform_frequencies(rng):
    draws = sample_tokens(np.zeros((10_000, 2)), rng=rng)
    assert abs(draws.mean() - 0.5) <= 0.02


def test_sample_tokens_is_reproducible():
    logits = np.random.default_rng(1).normal(size=(4, 5, 9))
    first = sample_tokens(logits, rng=np.random.default_rng(7))
    second = sample_tokens(logits, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(first, second)


def test_sample_tokens_needs_rng():
    with pytest.raises(ValueError):
        sample_tokens(np.zeros((2, 3)))


def test_sample_target_keeps_padding_and_labels_against_gold(rng):
    logits = np.random.default_rng(2).normal(size=(2, 3, 7))
    gold = np.array([[5, 6, EOS_ID], [5, EOS_ID, PAD_ID]])
    mask = gold != PAD_ID
    sampled = sample_target(logits, gold, mask, rng)
    assert sampled.sampled_ids[1, 2] == PAD_ID
    np.testing.assert_array_equal(sampled.replaced_labels == REPLACED, sampled.sampled_ids != gold)
    np.testing.assert_allclose(sampled.distributions.sum(axis=-1), 1.0)


def test_replaced_labels_match_brute_force_on_small_vocab():
    for length in (1, 2, 3):
        sequences = list(itertools.product(range(5), repeat=length))
        pairs = list(itertools.product(sequences, sequences))
        sampled = np.array([s for s, _ in pairs])
        gold = np.array([g for _, g in pairs])
        labels = replaced_labels(sampled, gold)
        for row, (s, g) in enumerate(pairs):
            expected = [REPLACED if a != b else ORIGINAL for a, b in zip(s, g)]
            assert list(labels[row]) == expected


# --- detection -------------------------------------------------------------------------


def test_detection_loss_at_half_probability():
    V = ag.Tensor(np.full((2, 3), 0.5, dtype=np.float64))
    labels = np.array([[0, 1, 0], [1, 1, 0]])
    assert detection_loss(V, labels).item() == pytest.approx(np.log(2), rel=1e-9)


def test_detection_loss_of_confident_original_is_zero():
    V = ag.Tensor(np.full((1, 4), 1 - 1e-7, dtype=np.float64))
    assert detection_loss(V, np.zeros((1, 4), dtype=np.int64)).item() == pytest.approx(0.0, abs=1e-6)


def test_detection_loss_matches_per_token_sum():
    rng = np.random.default_rng(4)
    V = rng.uniform(0.01, 0.99, size=(3, 5))
    labels = rng.integers(0, 2, size=(3, 5))
    mask = rng.random((3, 5)) < 0.7
    expected = [-(np.log(v) if label == ORIGINAL else np.log(1 - v))
                for v, label, keep in zip(V.ravel(), labels.ravel(), mask.ravel()) if keep]
    loss = detection_loss(ag.Tensor(V), labels, mask)
    assert loss.item() == pytest.approx(sum(expected) / len(expected), rel=1e-9)


@pytest.mark.parametrize(
    "V,expected",
    [([0.9, 0.2], []), ([0.3, 0.8], [0, 1])],
)
def test_misclassified_positions_examples(V, expected):
    v = misclassified_positions(np.array(V), np.array([ORIGINAL, REPLACED]))
    assert list(np.flatnonzero(v)) == expected


def test_misclassified_positions_match_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        V = rng.random(n)
        labels = rng.integers(0, 2, size=n)
        mask = rng.random(n) < 0.8
        v = misclassified_positions(V, labels, mask)
        expected = [keep and ((p >= 0.5) != (label == ORIGINAL)) for p, label, keep in zip(V, labels, mask)]
        assert list(v) == expected


def test_select_positions_policies():
    V = np.array([[0.9, 0.2, 0.7]])
    labels = np.array([[REPLACED, REPLACED, ORIGINAL]])
    mask = np.array([[True, True, False]])
    assert select_positions(V, labels, mask, ReplacementPolicy.MISCLASSIFIED).tolist() == [[True, False, False]]
    assert select_positions(V, labels, mask, ReplacementPolicy.ALL_SAMPLED).tolist() == [[True, True, False]]
    assert not select_positions(V, labels, mask, ReplacementPolicy.NONE).any()


# --- noisy context ---------------------------------------------------------------------


def test_noisy_context_forced_exclusion():
    A, B, C = 5, 6, 7
    distributions = np.zeros((2, 8))
    distributions[0, [A, B]] = 0.5
    distributions[1, C] = 1.0
    noisy = build_noisy_context(np.array([A, B]), np.array([A, C]), distributions, np.array([True, True]),
                                np.random.default_rng(0))
    assert noisy.noisy_ids.tolist() == [B, C]
    assert noisy.p == 2
    assert noisy.positions() == [(0,), (1,)]


def test_empty_v_keeps_gold(rng):
    gold = np.array([[5, 6, EOS_ID]])
    noisy = build_noisy_context(gold, np.array([[7, 6, EOS_ID]]), np.full((1, 3, 8), 1 / 8),
                                np.zeros((1, 3), dtype=bool), rng)
    np.testing.assert_array_equal(noisy.noisy_ids, gold)
    assert noisy.p == 0


def test_resampling_renormalises_without_gold(rng):
    n = 10_000
    distributions = np.tile([0.6, 0.3, 0.1], (n, 1))
    gold = np.zeros(n, dtype=np.int64)
    noisy = build_noisy_context(gold, gold, distributions, np.ones(n, dtype=bool), rng)
    counts = np.bincount(noisy.noisy_ids, minlength=3)
    assert counts[0] == 0
    assert abs(counts[1] / n - 0.75) <= 0.02
    assert stats.chisquare(counts[1:], [0.75 * n, 0.25 * n]).pvalue > 0.01


def test_resampling_falls_back_to_uniform_when_gold_holds_all_mass(rng):
    n = 3000
    distributions = np.tile([0.0, 1.0, 0.0, 0.0], (n, 1))
    gold = np.ones(n, dtype=np.int64)
    noisy = build_noisy_context(gold, gold, distributions, np.ones(n, dtype=bool), rng)
    counts = np.bincount(noisy.noisy_ids, minlength=4)
    assert counts[1] == 0
    assert stats.chisquare(counts[[0, 2, 3]]).pvalue > 0.01


def _every_case(length, vocab_size):
    """Every (gold, sampled, v) combination of the given length, one per row."""
    seqs = np.array(list(itertools.product(range(vocab_size), repeat=length)), dtype=np.int64)
    masks = np.array(list(itertools.product([False, True], repeat=length)), dtype=bool)
    g, s, m = np.meshgrid(np.arange(len(seqs)), np.arange(len(seqs)), np.arange(len(masks)), indexing="ij")
    return seqs[g.ravel()], seqs[s.ravel()], masks[m.ravel()]


def test_noisy_context_over_every_small_case():
    base = np.array([0.4, 0.25, 0.15, 0.12, 0.08])
    rng = np.random.default_rng(11)
    observed = np.zeros((5, 5))
    for length in (1, 2, 3):
        gold, sampled, v = _every_case(length, 5)
        distributions = np.broadcast_to(base, gold.shape + (5,))
        noisy = build_noisy_context(gold, sampled, distributions, v, rng).noisy_ids

        np.testing.assert_array_equal(noisy[~v], gold[~v])
        wrong = v & (sampled != gold)
        np.testing.assert_array_equal(noisy[wrong], sampled[wrong])
        resampled = v & (sampled == gold)
        assert np.all(noisy[resampled] != gold[resampled])
        np.add.at(observed, (gold[resampled], noisy[resampled]), 1)

    cells, expected = [], []
    for g in range(5):
        others = [t for t in range(5) if t != g]
        probs = base[others] / base[others].sum()
        cells.extend(observed[g, others])
        expected.extend(probs * observed[g].sum())
    assert stats.chisquare(cells, expected, ddof=4).pvalue > 0.01


def test_noisy_context_needs_two_tokens(rng):
    with pytest.raises(DataError):
        build_noisy_context(np.array([0]), np.array([0]), np.ones((1, 1)), np.array([True]), rng)


def test_shift_right_pads_where_the_row_ends():
    ids = np.array([[5, 6, EOS_ID], [7, EOS_ID, PAD_ID]])
    shifted = shift_right(ids, ids != PAD_ID)
    assert shifted.tolist() == [[BOS_ID, 5, 6], [BOS_ID, 7, PAD_ID]]


# --- combined losses -------------------------------------------------------------------


def test_combine_losses_arithmetic():
    assert combine_losses(2.0, 0.1, 2.5, 10.0) == pytest.approx(5.5)
    assert combine_losses(2.0, 0.5, 1.0, 10.0) == pytest.approx(8.0)


def test_pretrain_loss_combines_its_terms(tiny_params, tiny_config):
    out = pretrain_loss(pretrain_batch(tiny_config.vocab_size), tiny_params, 10.0, np.random.default_rng(0),
                        training=False)
    assert out.combined == pytest.approx(combine_losses(out.L_G, out.L_D, out.L_DG, 10.0), rel=1e-5)
    assert 0.0 <= out.det_acc <= 1.0
    assert set(out.metrics(3)) == {"step", "L_G", "L_D", "L_DG", "combined", "det_acc", "replaced_rate", "p"}


def test_language_ids_do_not_change_the_loss(tiny_params, tiny_config):
    batch = pretrain_batch(tiny_config.vocab_size)
    tagged = dataclasses.replace(batch, lang_ids=np.full(batch.rows, 5, dtype=np.int64))
    plain = pretrain_loss(batch, tiny_params, 10.0, np.random.default_rng(0), training=False)
    other = pretrain_loss(tagged, tiny_params, 10.0, np.random.default_rng(0), training=False)
    assert plain.combined == other.combined


def test_noisy_tokens_differ_from_gold_exactly_on_v(tiny_params, tiny_config):
    batch = pretrain_batch(tiny_config.vocab_size, seed=3)
    options = ObjectiveOptions(replacement_policy=ReplacementPolicy.ALL_SAMPLED)
    out = pretrain_loss(batch, tiny_params, 10.0, np.random.default_rng(1), options, training=False)
    np.testing.assert_array_equal(out.noisy.noisy_ids != batch.trg_out, out.noisy.replaced_positions)
    assert out.p == int(batch.detection_mask().sum())


def test_empty_v_makes_denoising_equal_to_generator_loss(tiny_params, tiny_config):
    options = ObjectiveOptions(replacement_policy=ReplacementPolicy.NONE)
    out = pretrain_loss(pretrain_batch(tiny_config.vocab_size), tiny_params, 10.0, np.random.default_rng(0),
                        options, training=False)
    assert out.p == 0
    assert out.L_DG == out.L_G


def test_zero_lambda_and_empty_v_doubles_generator_loss(tiny_params, tiny_config):
    options = ObjectiveOptions(replacement_policy=ReplacementPolicy.NONE)
    out = pretrain_loss(pretrain_batch(tiny_config.vocab_size), tiny_params, 0.0, np.random.default_rng(0),
                        options, training=False)
    assert out.combined == pytest.approx(2 * out.L_G, rel=1e-6)


def test_negative_lambda_is_rejected(tiny_params, tiny_config):
    with pytest.raises(ValueError):
        pretrain_loss(pretrain_batch(tiny_config.vocab_size), tiny_params, -1.0, np.random.default_rng(0))


def test_detection_term_sends_no_gradient_into_the_generator(tiny_config):
    batch = pretrain_batch(tiny_config.vocab_size, seed=5)
    options = ObjectiveOptions(use_denoising=False)

    combined_params = init_params(tiny_config, seed=4)
    ag.backward(pretrain_loss(batch, combined_params, 10.0, np.random.default_rng(0), options, False).loss)

    plain_params = init_params(tiny_config, seed=4)
    H_e = encode(batch.src, batch.src_mask, plain_params)
    logits = generator_decode(H_e, batch.trg_in, plain_params, batch.src_mask, batch.trg_mask)
    ag.backward(generator_loss(logits, batch.trg_out, batch.trg_mask))

    for name, grad in grads_of(plain_params, "generator.").items():
        np.testing.assert_allclose(combined_params[name].grad, grad, rtol=1e-5, atol=1e-8)


# --- fine-tuning -----------------------------------------------------------------------


def test_finetune_g_mode_is_label_smoothed_cross_entropy(small_vocab, tiny_params):
    batch = parallel_batch(small_vocab)
    out = finetune_loss(batch, tiny_params, mode=FinetuneMode.G, training=False)
    H_e = encode(batch.src, batch.src_mask, tiny_params)
    logits = generator_decode(H_e, batch.trg_in, tiny_params, batch.src_mask, batch.trg_mask)
    expected = generator_loss(logits, batch.trg_out, batch.trg_mask, smoothing=0.1)
    assert out.combined == pytest.approx(expected.item(), rel=1e-6)
    assert out.L_D is None and out.L_DG is None

    ag.backward(out.loss)
    assert all(g is None for g in grads_of(tiny_params, "discriminator.").values())


def test_finetune_d_mode_trains_only_the_discriminator_side(small_vocab, tiny_params):
    batch = parallel_batch(small_vocab)
    out = finetune_loss(batch, tiny_params, 10.0, FinetuneMode.D, np.random.default_rng(0), training=False)
    assert out.combined == pytest.approx(10.0 * out.L_D + out.L_DG, rel=1e-5)

    ag.backward(out.loss)
    assert all(g is None for g in grads_of(tiny_params, "generator.").values())
    assert tiny_params[DETECTION_HEAD].grad is not None
    assert any(g is not None for g in grads_of(tiny_params, "encoder.").values())


def test_finetune_gd_mode_uses_the_full_objective(small_vocab, tiny_params):
    batch = parallel_batch(small_vocab)
    out = finetune_loss(batch, tiny_params, 10.0, FinetuneMode.GD, np.random.default_rng(0), training=False)
    assert out.combined == pytest.approx(combine_losses(out.L_G, out.L_D, out.L_DG, 10.0), rel=1e-5)
    assert out.L_D > 0


def test_finetune_adversarial_modes_need_rng(small_vocab, tiny_params):
    with pytest.raises(ValueError):
        finetune_loss(parallel_batch(small_vocab), tiny_params, mode=FinetuneMode.GD)


@pytest.mark.parametrize(
    "name,coords",
    [
        (DETECTION_HEAD, None),
        ("encoder.layers.0.self_attn.q.weight", 12),
        ("encoder.layers.1.ffn.fc2.weight", 12),
        ("embed.tokens", 12),
        ("generator.layers.1.cross_attn.v.weight", 12),
        ("discriminator.layers.0.ffn.fc1.bias", 12),
    ],
)
def test_full_pretraining_loss_matches_finite_differences(small_vocab, name, coords):
    config = ModelConfig(vocab_size=len(small_vocab), **{**TINY_MODEL, "enc_layers": 2, "gen_dec_layers": 2})
    params = init_params(config, seed=9).astype(np.float64)
    batch = pretrain_batch(config.vocab_size, seed=2, rows=3, length=6)
    options = ObjectiveOptions(replacement_policy=ReplacementPolicy.ALL_SAMPLED, label_smoothing=0.1)

    def fn(tensor):
        swapped = params.replace(name, tensor)
        return pretrain_loss(batch, swapped, 10.0, np.random.default_rng(5), options, training=False).loss

    assert ag.grad_check(fn, params[name].data, max_coords=coords) < 1e-4
