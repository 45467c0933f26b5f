import os

import numpy as np
import pytest

from create_testdata import TINY_MODEL

from app import autograd as ag
from app.checkpoint import init_optim_state, load_checkpoint
from app.config import ModelConfig, Schedule, TrainConfig, load_corpus_manifest, load_train_config
from app.errors import ConfigError, DataError
from app.model import ModelParams, init_params, model_config_for
from app.trainer import (
    METRICS_NAME,
    Dataset,
    adam_step,
    checkpoint_path,
    clip_grad_norm,
    draw_batch,
    load_pretrain_datasets,
    lr_schedule,
    sample_dataset,
    train,
)
from app.utils import read_jsonl, write_lines


def scalar_params(value):
    return ModelParams({"x": ag.Tensor(np.array([value], dtype=np.float64), requires_grad=True)}, None)


# --- schedule and optimizer ------------------------------------------------------------


@pytest.mark.parametrize(
    "step,expected",
    [(0, 0.0), (5000, 1.5e-4), (10000, 3e-4), (40000, 1.5e-4)],
)
def test_inverse_sqrt_schedule(step, expected):
    assert lr_schedule(step, 3e-4, 10000) == pytest.approx(expected, abs=1e-15)


def test_zero_warmup_is_constant_peak():
    assert lr_schedule(0, 3e-4, 0) == 3e-4
    assert lr_schedule(123, 3e-4, 0) == 3e-4


def test_constant_schedule_holds_after_warmup():
    assert lr_schedule(40000, 3e-4, 10000, Schedule.CONSTANT) == 3e-4


def test_negative_step_is_rejected():
    with pytest.raises(ValueError):
        lr_schedule(-1, 3e-4, 10)


def test_adam_with_constant_gradient_decreases_monotonically():
    params = scalar_params(1.0)
    state = init_optim_state(params)
    values = []
    for _ in range(20):
        params["x"].grad = np.array([1.0])
        adam_step(params, state, lr=0.01)
        values.append(float(params["x"].data[0]))
    assert all(b < a for a, b in zip([1.0] + values, values))
    assert state.step == 20


def reference_adam(x, steps, lr, beta1=0.9, beta2=0.98, eps=1e-6):
    m = v = 0.0
    trajectory = []
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        x -= lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        trajectory.append(x)
    return trajectory


def test_adam_on_quadratic_bowl_follows_the_update_rule():
    params = scalar_params(5.0)
    state = init_optim_state(params)
    trajectory = []
    for _ in range(200):
        params["x"].grad = 2.0 * params["x"].data
        adam_step(params, state, lr=0.1)
        trajectory.append(float(params["x"].data[0]))
    np.testing.assert_allclose(trajectory, reference_adam(5.0, 200, 0.1), rtol=1e-9, atol=1e-12)
    assert abs(trajectory[-1]) < 1.0


def test_adam_with_zero_gradient_only_counts_the_step():
    params = scalar_params(2.0)
    state = init_optim_state(params)
    params["x"].grad = np.zeros(1)
    assert adam_step(params, state, lr=0.1)
    assert params["x"].data[0] == 2.0
    assert state.step == 1


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_adam_skips_non_finite_gradients(bad):
    params = scalar_params(2.0)
    state = init_optim_state(params)
    params["x"].grad = np.array([bad])
    assert not adam_step(params, state, lr=0.1)
    assert params["x"].data[0] == 2.0
    assert state.step == 0
    assert state.m["x"][0] == 0.0


def test_clip_grad_norm_scales_to_the_limit():
    params = ModelParams(
        {"a": ag.Tensor(np.zeros(1), requires_grad=True), "b": ag.Tensor(np.zeros(1), requires_grad=True)}, None
    )
    params["a"].grad = np.array([3.0])
    params["b"].grad = np.array([4.0])
    assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([params["a"].grad[0], params["b"].grad[0]], [0.6, 0.8], rtol=1e-9)


def test_clip_grad_norm_leaves_small_gradients():
    params = scalar_params(0.0)
    params["x"].grad = np.array([0.5])
    clip_grad_norm(params, 1.0)
    assert params["x"].grad[0] == 0.5


# --- dataset sampling ------------------------------------------------------------------


def test_single_dataset_is_always_drawn(rng):
    datasets = [Dataset(name="only")]
    assert {sample_dataset(datasets, rng) for _ in range(100)} == {0}


def test_two_datasets_are_drawn_uniformly(rng):
    datasets = [Dataset(name="en"), Dataset(name="de")]
    draws = [sample_dataset(datasets, rng) for _ in range(10_000)]
    assert abs(np.mean(draws) - 0.5) <= 0.02


def test_dataset_draws_are_reproducible():
    datasets = [Dataset(name=str(i)) for i in range(3)]
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_dataset(datasets, rng_a) for _ in range(50)] == [sample_dataset(datasets, rng_b) for _ in range(50)]


def test_sampling_needs_a_dataset(rng):
    with pytest.raises(DataError):
        sample_dataset([], rng)


def test_manifest_corpora_get_their_language_tags(testdata):
    entries = load_corpus_manifest(testdata["manifest"])
    config = TrainConfig(model=ModelConfig(**TINY_MODEL), corpora=entries, batch_rows=4)
    datasets, vocab = load_pretrain_datasets(config)
    assert [d.lang_id for d in datasets] == [vocab.tag_id("en"), vocab.tag_id("de")] == [5, 6]
    batch = draw_batch(datasets[1], np.random.default_rng(0), config)
    assert set(batch.lang_ids.tolist()) == {6}
    assert batch.rows == 4



def test_shipped_corpus_manifest_loads():
    manifest = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs", "corpora.json")
    entries = load_corpus_manifest(manifest)
    assert [e.language_tag for e in entries] == ["en", "de"]
    assert all(os.path.isfile(e.path) for e in entries)
    config = TrainConfig(model=ModelConfig(**TINY_MODEL), corpora=entries, batch_rows=4)
    datasets, vocab = load_pretrain_datasets(config)
    assert [len(d.sentences) for d in datasets] == [40, 40]
    assert vocab.num_tags == 2

def test_batches_respect_the_token_budget(testdata):
    config = load_train_config(testdata["pretrain_config"], max_tokens=20, batch_rows=8)
    datasets, _ = load_pretrain_datasets(config)
    rng = np.random.default_rng(1)
    for _ in range(20):
        batch = draw_batch(datasets[0], rng, config)
        assert batch.rows == 1 or int(batch.src_mask.sum()) <= 20


def test_pretraining_needs_a_corpus():
    with pytest.raises(ConfigError):
        load_pretrain_datasets(TrainConfig(model=ModelConfig(**TINY_MODEL)))


# --- training runs ---------------------------------------------------------------------


def test_zero_steps_checkpoint_equals_initialisation(testdata, tmp_path):
    config = load_train_config(testdata["pretrain_config"], total_steps=0)
    result = train(config, str(tmp_path / "run"), show_progress=False)
    assert result.checkpoint_dir == checkpoint_path(str(tmp_path / "run"), 0)
    restored = load_checkpoint(result.checkpoint_dir)
    expected = init_params(model_config_for(result.vocab, config.model), seed=config.seed)
    for name in expected.names():
        np.testing.assert_array_equal(restored.params[name].data, expected[name].data)
    assert restored.step == 0
    assert result.metrics == []


def test_training_writes_metrics_and_checkpoints(testdata, tmp_path):
    out = str(tmp_path / "run")
    config = load_train_config(testdata["pretrain_config"])
    result = train(config, out, show_progress=False)
    records = read_jsonl(os.path.join(out, METRICS_NAME))
    assert [r["step"] for r in records] == [1, 2, 3, 4]
    assert records == result.metrics
    for key in ("L_G", "L_D", "L_DG", "combined", "det_acc", "replaced_rate", "p", "lr", "grad_norm"):
        assert key in records[0]
    assert records[0]["lr"] == pytest.approx(config.peak_lr / config.warmup_steps)
    assert all(np.isfinite(r["combined"]) for r in records)
    assert os.path.isdir(checkpoint_path(out, 2))
    assert result.checkpoint_dir == checkpoint_path(out, 4)
    assert load_checkpoint(result.checkpoint_dir).opt_state.step == 4


def test_same_seed_gives_identical_metrics(testdata, tmp_path):
    config = load_train_config(testdata["pretrain_config"])
    first = train(config, str(tmp_path / "a"), show_progress=False)
    second = train(config, str(tmp_path / "b"), show_progress=False)
    assert first.metrics == second.metrics


def test_resume_continues_bit_identically(testdata, tmp_path):
    config = load_train_config(testdata["pretrain_config"], total_steps=6)
    full = train(config, str(tmp_path / "full"), show_progress=False)
    resumed = train(config, str(tmp_path / "resumed"), resume_from=checkpoint_path(str(tmp_path / "full"), 4),
                    show_progress=False)
    assert [r["step"] for r in resumed.metrics] == [5, 6]
    assert resumed.metrics == full.metrics[4:]
    for name in full.params.names():
        np.testing.assert_array_equal(resumed.params[name].data, full.params[name].data)


def test_resume_in_place_drops_the_abandoned_tail(testdata, tmp_path):
    out = str(tmp_path / "run")
    config = load_train_config(testdata["pretrain_config"])
    full = train(config, out, show_progress=False)
    again = train(config, out, resume_from=checkpoint_path(out, 2), show_progress=False)
    assert again.metrics == full.metrics
    assert read_jsonl(os.path.join(out, METRICS_NAME)) == full.metrics


def test_finetune_defaults_follow_the_recipe(testdata):
    config = load_train_config(testdata["finetune_config"])
    assert config.objective.label_smoothing == 0.1
    assert config.peak_lr == 1e-3
    assert TrainConfig(mode="finetune").peak_lr == 1e-4


@pytest.mark.parametrize("mode", ["G", "G+D", "D"])
def test_finetune_modes(testdata, tmp_path, mode):
    config = load_train_config(testdata["finetune_config"], finetune_mode=mode,
                               src_file=testdata["copy_src"], trg_file=testdata["copy_trg"])
    result = train(config, str(tmp_path / mode), show_progress=False)
    assert len(result.metrics) == config.total_steps
    if mode == "G":
        assert all(r["L_D"] is None for r in result.metrics)
    else:
        assert all(r["L_D"] > 0 for r in result.metrics)


def test_finetune_from_a_pretrained_checkpoint_keeps_its_vocab(testdata, tmp_path):
    pretrained = train(load_train_config(testdata["pretrain_config"], total_steps=2), str(tmp_path / "pre"),
                       show_progress=False)
    config = load_train_config(testdata["finetune_config"], src_file=testdata["copy_src"],
                               trg_file=testdata["copy_trg"], init_checkpoint=pretrained.checkpoint_dir)
    result = train(config, str(tmp_path / "fine"), show_progress=False)
    assert result.vocab == pretrained.vocab


def test_misaligned_parallel_files_are_rejected(testdata, tmp_path):
    src, trg = str(tmp_path / "x.src"), str(tmp_path / "x.trg")
    write_lines(src, ["a b", "c d", "e f"])
    write_lines(trg, ["a b", "c d"])
    config = load_train_config(testdata["finetune_config"], src_file=src, trg_file=trg)
    with pytest.raises(DataError, match="3 source lines vs 2 target lines"):
        train(config, str(tmp_path / "run"), show_progress=False)


def test_finetuning_needs_parallel_files(testdata, tmp_path):
    with pytest.raises(ConfigError):
        train(load_train_config(testdata["finetune_config"]), str(tmp_path / "run"), show_progress=False)
