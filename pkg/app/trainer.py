"""
Optimization loop: Adam with warmup, uniform multi-corpus sampling, checkpoints and a
per-step metrics stream.

One RNG, seeded from the config, drives dataset draws, batch rows, span corruption,
dropout and generator sampling in a fixed order, so a (seed, config, corpora) triple
always reproduces the same metrics.jsonl, and a run resumed from a checkpoint continues
exactly where the uninterrupted run would have.
"""

import os
import time
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from app import autograd as ag
from app.checkpoint import init_optim_state, load_checkpoint, save_checkpoint
from app.config import Schedule, TrainMode
from app.corruption import load_corpus, make_batch, make_parallel_pairs, make_pretrain_pairs
from app.errors import ConfigError, DataError
from app.model import init_params, model_config_for
from app.objectives import finetune_loss, pretrain_loss
from app.utils import append_jsonl, ensure_dir, format_seconds, format_time, read_jsonl, read_lines
from app.vocab import build_vocab, encode

METRICS_NAME = "metrics.jsonl"
CHECKPOINTS_DIR = "checkpoints"


@dataclass
class Dataset:
    """
    One training source. Pre-training datasets hold encoded sentences, fine-tuning
    datasets hold parallel pairs.
    """

    name: str
    lang_id: Optional[int] = None
    sentences: List[tuple] = field(default_factory=list)
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs) if self.pairs else len(self.sentences)


@dataclass
class TrainResult:
    checkpoint_dir: str
    metrics: list
    params: object
    vocab: object
    opt_state: object
    step: int


def checkpoint_path(out_dir, step):
    return os.path.join(out_dir, CHECKPOINTS_DIR, f"step_{step:07d}")


def lr_schedule(step, peak_lr, warmup, kind=Schedule.INVERSE_SQRT):
    """
    Learning rate at an optimizer step.

    Linear warmup from 0 to peak_lr over `warmup` steps, then peak_lr * sqrt(warmup / step)
    (inverse square root) or peak_lr (constant). warmup=0 gives peak_lr from step 0.

    Args:
        step (int): Optimizer step, >= 0.
        peak_lr (float): Rate reached at the end of warmup.
        warmup (int): Warmup length in steps.
        kind (Schedule): Decay after warmup.

    Returns:
        float: The learning rate.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if warmup == 0:
        return float(peak_lr)
    if step < warmup:
        return float(peak_lr) * step / warmup
    if Schedule(kind) == Schedule.CONSTANT:
        return float(peak_lr)
    return float(peak_lr) * float(np.sqrt(warmup / step))


def global_grad_norm(params):
    total = 0.0
    for _, tensor in params.items():
        if tensor.grad is not None:
            total += float(np.sum(np.square(tensor.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm):
    """
    Scales every gradient so the global L2 norm is at most `max_norm`.

    Returns:
        float: The norm before clipping (non-finite norms are left for adam_step to skip).
    """
    norm = global_grad_norm(params)
    if np.isfinite(norm) and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for _, tensor in params.items():
            if tensor.grad is not None:
                tensor.grad = (tensor.grad * factor).astype(tensor.grad.dtype)
    return norm


def adam_step(params, opt_state, lr):
    """
    Bias-corrected Adam update in place.

    Parameters without a gradient are treated as having a zero gradient. If any gradient
    holds NaN or inf the whole step is skipped: nothing moves and the counter stays put.

    Args:
        params (ModelParams): Parameters with `.grad` filled by backward.
        opt_state (OptimState): Moments and step counter, updated in place.
        lr (float): Learning rate for this step.

    Returns:
        bool: True if the update was applied.
    """
    for name, tensor in params.items():
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            logging.warning(f"Skipping optimizer step {opt_state.step + 1}: non-finite gradient in {name}")
            return False

    opt_state.step += 1
    beta1, beta2 = opt_state.beta1, opt_state.beta2
    correction1 = 1.0 - beta1 ** opt_state.step
    correction2 = 1.0 - beta2 ** opt_state.step
    for name, tensor in params.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        m = opt_state.m[name]
        v = opt_state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * np.square(grad)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + opt_state.eps)
        tensor.data -= update.astype(tensor.data.dtype)
    return True


def sample_dataset(datasets, rng):
    """Uniform draw of the dataset that supplies the next batch."""
    if not datasets:
        raise DataError("no datasets to sample from")
    return int(rng.integers(len(datasets)))


def _select_rows(items, lengths, rng, batch_rows, max_tokens):
    """Random rows without replacement, stopping before the source-token budget is exceeded."""
    order = rng.choice(len(items), size=min(batch_rows, len(items)), replace=False)
    picked = []
    tokens = 0
    for index in order:
        if picked and tokens + lengths[index] > max_tokens:
            break
        picked.append(items[index])
        tokens += lengths[index]
    return picked


def draw_batch(dataset, rng, config):
    """
    One padded batch from `dataset`: at most batch_rows rows and max_tokens source tokens
    (a single over-long row is still taken on its own).
    """
    if dataset.pairs:
        lengths = [len(p.src_ids) for p in dataset.pairs]
        pairs = _select_rows(dataset.pairs, lengths, rng, config.batch_rows, config.max_tokens)
    else:
        lengths = [len(ids) for _, ids in dataset.sentences]
        sentences = _select_rows(dataset.sentences, lengths, rng, config.batch_rows, config.max_tokens)
        pairs = make_pretrain_pairs(
            sentences, rng, config.mask_ratio, config.mean_span, config.max_span, lang_id=dataset.lang_id
        )
    try:
        return make_batch(pairs, config.model.max_positions)
    except DataError as e:
        raise DataError(f"{dataset.name}: {e}") from e


def load_pretrain_datasets(config, vocab=None):
    """
    Reads every corpus in the config and encodes it.

    Builds the vocab over all corpora (with one language tag per corpus) unless one is
    given, e.g. from an initial checkpoint.

    Returns:
        tuple: (datasets, vocab)
    """
    if not config.corpora:
        raise ConfigError("pre-training needs at least one corpus")
    corpora = [(entry, load_corpus(entry.path)) for entry in config.corpora]
    if vocab is None:
        vocab = build_vocab(
            (text for _, lines in corpora for _, text in lines),
            min_freq=config.min_freq,
            max_size=config.max_vocab,
            language_tags=[entry.language_tag for entry in config.corpora],
        )
    datasets = []
    for entry, lines in corpora:
        if not lines:
            raise DataError(f"{entry.path}: corpus holds no sentences")
        datasets.append(
            Dataset(
                name=entry.path,
                lang_id=vocab.tag_id(entry.language_tag),
                sentences=[(line_no, encode(text, vocab)) for line_no, text in lines],
            )
        )
    return datasets, vocab


def load_finetune_datasets(config, vocab=None):
    """
    Reads the aligned parallel files. The vocab comes from the initial checkpoint when
    there is one, otherwise it is built from both sides.

    Returns:
        tuple: ([dataset], vocab)
    """
    if not config.src_file or not config.trg_file:
        raise ConfigError("fine-tuning needs src_file and trg_file")
    src_lines = read_lines(config.src_file)
    trg_lines = read_lines(config.trg_file)
    if vocab is None:
        vocab = build_vocab(src_lines + trg_lines, min_freq=config.min_freq, max_size=config.max_vocab)
    try:
        pairs = make_parallel_pairs(src_lines, trg_lines, vocab)
    except DataError as e:
        raise DataError(f"{config.src_file}: {e}") from e
    if not pairs:
        raise DataError(f"{config.src_file}: no parallel sentences")
    return [Dataset(name=config.src_file, pairs=pairs)], vocab


def step_loss(config, batch, params, rng, training=True):
    """The objective for one batch under the configured mode."""
    options = config.objective
    if config.mode == TrainMode.PRETRAIN:
        return pretrain_loss(batch, params, options.lambda_d, rng, options, training)
    return finetune_loss(batch, params, options.lambda_d, config.finetune_mode, rng, options, training)


def _restore_metrics(metrics_path, step):
    """Keeps the records of steps <= step; later ones belong to the abandoned tail."""
    if not os.path.exists(metrics_path):
        return []
    kept = [record for record in read_jsonl(metrics_path) if record["step"] <= step]
    os.remove(metrics_path)
    for record in kept:
        append_jsonl(metrics_path, record)
    return kept


def train(config, out_dir, resume_from=None, show_progress=True, console=None):
    """
    Runs training to `config.total_steps`.

    Args:
        config (TrainConfig): Validated run configuration.
        out_dir (str): Output directory; receives metrics.jsonl and checkpoints/step_NNNNNNN.
        resume_from (str): Checkpoint directory to continue from.
        show_progress (bool): Show a rich progress bar.
        console (Console): Console for the progress bar.

    Returns:
        TrainResult: Final checkpoint path, metrics records and the trained state.
    """
    start_time = time.time()
    ensure_dir(out_dir)
    metrics_path = os.path.join(out_dir, METRICS_NAME)
    load_datasets = load_pretrain_datasets if config.mode == TrainMode.PRETRAIN else load_finetune_datasets

    if resume_from:
        state = load_checkpoint(resume_from)
        datasets, vocab = load_datasets(config, state.vocab)
        params, opt_state, rng, start_step = state.params, state.opt_state, state.rng, state.step
        metrics = _restore_metrics(metrics_path, start_step)
        logging.info(f"Resuming {config.mode.value} from {resume_from} at step {start_step}")
    else:
        initial = load_checkpoint(config.init_checkpoint) if config.init_checkpoint else None
        datasets, vocab = load_datasets(config, initial.vocab if initial else None)
        if initial is not None:
            params = initial.params
        else:
            params = init_params(model_config_for(vocab, config.model), seed=config.seed)
        opt_state = init_optim_state(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
        rng = np.random.default_rng(config.seed)
        start_step = 0
        metrics = []
        if os.path.exists(metrics_path):
            os.remove(metrics_path)

    logging.info(
        f"Training {config.mode.value}: {len(datasets)} dataset(s), vocab {len(vocab)}, "
        f"{params.num_parameters()} parameters, steps {start_step + 1}..{config.total_steps}"
    )
    last_checkpoint = None
    if start_step >= config.total_steps:
        last_checkpoint = save_checkpoint(checkpoint_path(out_dir, start_step), params, opt_state, start_step, rng,
                                          vocab, config)

    console = console or Console()
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        console=console,
        transient=True,
        disable=not show_progress,
    ) as progress:
        task = progress.add_task(f"[bold blue]{config.mode.value}", total=config.total_steps, completed=start_step)
        for step in range(start_step + 1, config.total_steps + 1):
            lr = lr_schedule(step, config.peak_lr, config.warmup_steps, config.schedule)
            index = sample_dataset(datasets, rng)
            batch = draw_batch(datasets[index], rng, config)

            params.zero_grad()
            output = step_loss(config, batch, params, rng, training=True)
            ag.backward(output.loss)
            grad_norm = clip_grad_norm(params, config.clip_norm) if config.clip_norm else global_grad_norm(params)
            applied = adam_step(params, opt_state, lr)

            record = output.metrics(step)
            record.update(lr=lr, grad_norm=grad_norm, skipped=not applied, dataset=datasets[index].name)
            append_jsonl(metrics_path, record)
            metrics.append(record)

            if step % config.log_every == 0:
                logging.info(
                    f"step {step}: combined {record['combined']:.4f} L_G {record['L_G']:.4f} "
                    f"L_D {record['L_D']} det_acc {record['det_acc']} lr {lr:.2e} "
                    f"elapsed {format_seconds(time.time() - start_time)}"
                )
            if step % config.checkpoint_every == 0 or step == config.total_steps:
                last_checkpoint = save_checkpoint(checkpoint_path(out_dir, step), params, opt_state, step, rng,
                                                  vocab, config)
            progress.update(task, advance=1, description=f"[bold blue]{config.mode.value} loss {record['combined']:.3f}")

    logging.info(f"Training finished in {format_time(time.time() - start_time)}")
    return TrainResult(
        checkpoint_dir=last_checkpoint,
        metrics=metrics,
        params=params,
        vocab=vocab,
        opt_state=opt_state,
        step=max(start_step, config.total_steps),
    )

