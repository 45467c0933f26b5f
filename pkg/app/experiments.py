"""
Desk-scale experiments on synthetic data.

Each runner writes its corpora, training runs, a report.json and a run manifest under its
output directory and returns the report. The tasks:

    corpus      unique "sentences" over a small word list, for pre-training
    copy        y = x
    noisy copy  x is y with filler words ("uh", "um") inserted; the model must drop them
"""

import os
import time
import logging

import numpy as np

from app.checkpoint import load_checkpoint
from app.config import (
    CorpusEntry,
    DecodeConfig,
    DecoderChoice,
    ExperimentConfig,
    FinetuneMode,
    ModelConfig,
    ObjectiveOptions,
    Strategy,
    TrainConfig,
    TrainMode,
)
from app.corruption import apply_mask, load_corpus, make_batch, make_pretrain_pairs, sample_spans
from app.errors import ConfigError
from app.inference import generate, strip_eos
from app.metrics import evaluate
from app.model import init_params, model_config_for
from app.objectives import TokenLabel, pretrain_loss
from app.trainer import checkpoint_path, train
from app.utils import RunManifest, ensure_dir, format_time, write_json, write_lines
from app.vocab import EOS_ID, build_vocab, decode, encode

WORDS = (
    "the", "a", "gardener", "watered", "flowers", "boy", "girl", "read", "book", "dog", "chased",
    "cat", "old", "man", "saw", "river", "small", "bird", "sang", "song", "green", "tree", "grew",
    "near", "house", "red", "car", "stopped", "at", "light", "blue", "sky",
)
NOISE = ("uh", "um")
REPORT_NAME = "report.json"


# --- synthetic data ---------------------------------------------------------------------


def synthetic_sentences(count, rng, min_len=5, max_len=10, words=WORDS):
    """`count` distinct sentences of uniformly drawn words."""
    sentences = []
    seen = set()
    attempts = 0
    while len(sentences) < count:
        attempts += 1
        if attempts > 100 * count:
            raise ConfigError(f"cannot draw {count} distinct sentences of length {min_len}-{max_len}")
        length = int(rng.integers(min_len, max_len + 1))
        sentence = " ".join(words[i] for i in rng.integers(len(words), size=length))
        if sentence not in seen:
            seen.add(sentence)
            sentences.append(sentence)
    return sentences


def copy_pairs(count, rng, min_len=3, max_len=8, words=WORDS):
    return [(s, s) for s in synthetic_sentences(count, rng, min_len, max_len, words)]


def noisy_copy_pairs(count, rng, noise_rate=0.25, min_len=3, max_len=8, words=WORDS):
    """Pairs (noisy, clean): a filler word follows each clean token with probability noise_rate."""
    pairs = []
    for clean in synthetic_sentences(count, rng, min_len, max_len, words):
        noisy = []
        for token in clean.split():
            noisy.append(token)
            if rng.random() < noise_rate:
                noisy.append(NOISE[int(rng.integers(len(NOISE)))])
        pairs.append((" ".join(noisy), clean))
    return pairs


def write_parallel(directory, name, pairs):
    """Writes <name>.src / <name>.trg and returns both paths."""
    ensure_dir(directory)
    src_path = os.path.join(directory, f"{name}.src")
    trg_path = os.path.join(directory, f"{name}.trg")
    write_lines(src_path, [src for src, _ in pairs])
    write_lines(trg_path, [trg for _, trg in pairs])
    return src_path, trg_path


# --- shared steps -----------------------------------------------------------------------


def _pretrain(settings, work_dir, corpus_path, seed, objective=None, model=None, steps=None):
    config = TrainConfig(
        mode=TrainMode.PRETRAIN,
        model=model or settings.model,
        objective=objective or ObjectiveOptions(),
        corpora=[CorpusEntry(path=corpus_path)],
        total_steps=settings.pretrain_steps if steps is None else steps,
        peak_lr=settings.peak_lr,
        warmup_steps=settings.warmup_steps,
        batch_rows=settings.batch_rows,
        seed=seed,
        checkpoint_every=max(1, settings.pretrain_steps),
    )
    return train(config, work_dir, show_progress=False)


def _finetune(settings, work_dir, src_path, trg_path, seed, mode=FinetuneMode.G, init_checkpoint=None,
              objective=None, checkpoint_every=None):
    config = TrainConfig(
        mode=TrainMode.FINETUNE,
        finetune_mode=mode,
        model=settings.model,
        objective=objective or ObjectiveOptions(label_smoothing=0.1),
        src_file=src_path,
        trg_file=trg_path,
        init_checkpoint=init_checkpoint,
        total_steps=settings.finetune_steps,
        peak_lr=settings.peak_lr,
        warmup_steps=settings.warmup_steps,
        batch_rows=settings.batch_rows,
        seed=seed,
        checkpoint_every=checkpoint_every or max(1, settings.finetune_steps),
    )
    return train(config, work_dir, show_progress=False)


def evaluate_pairs(params, vocab, pairs, decoder=DecoderChoice.GENERATOR):
    """Greedy-decodes every source and scores the outputs against the references."""
    hyps = []
    for src, trg in pairs:
        max_len = min(params.config.max_positions, len(trg.split()) + 4)
        config = DecodeConfig(strategy=Strategy.GREEDY, max_len=max_len, decoder=decoder)
        hyps.append(decode(strip_eos(generate(encode(src, vocab), params, config)), vocab))
    return evaluate(hyps, [trg for _, trg in pairs])


def _decoder_for(mode):
    return DecoderChoice.DISCRIMINATOR if FinetuneMode(mode) == FinetuneMode.D else DecoderChoice.GENERATOR


def _median(values):
    return float(np.median(values)) if values else None


def _finish(out_dir, name, report, started, settings=None):
    report = {"experiment": name, **report}
    if settings is not None:
        report["settings"] = settings.model_dump(mode="json")
    write_json(os.path.join(out_dir, REPORT_NAME), report)
    seed = settings.seeds[0] if settings is not None else report.get("seed")
    RunManifest(command=f"experiment {name}", seed=seed).finish(report=REPORT_NAME).write(out_dir)
    logging.info(f"Experiment {name} finished in {format_time(time.time() - started)}")
    return report


def _setup(out_dir, settings, seed):
    """Per-seed pre-training corpus plus noisy-copy train/test files."""
    rng = np.random.default_rng(seed)
    data_dir = os.path.join(out_dir, f"seed_{seed}", "data")
    ensure_dir(data_dir)
    corpus_path = os.path.join(data_dir, "corpus.txt")
    write_lines(corpus_path, synthetic_sentences(settings.corpus_sentences, rng, words=WORDS + NOISE))
    pairs = noisy_copy_pairs(settings.train_pairs + settings.test_pairs, rng)
    train_pairs, test_pairs = pairs[: settings.train_pairs], pairs[settings.train_pairs:]
    src_path, trg_path = write_parallel(data_dir, "train", train_pairs)
    return corpus_path, (src_path, trg_path), train_pairs, test_pairs


# --- experiments ------------------------------------------------------------------------


def run_overfit(out_dir, seed=1, steps=2000, sentences=64, model=None):
    """
    Memorisation run: pre-train a small model on a 64-sentence corpus, then check that
    the generator reproduces freshly masked spans of the memorised sentences.

    Returns:
        dict: Late-training L_G / detection accuracy and the greedy reproduction rate.
    """
    started = time.time()
    ensure_dir(out_dir)
    model = model or ModelConfig(max_positions=64, dropout=0.0)
    rng = np.random.default_rng(seed)
    corpus_path = os.path.join(out_dir, "corpus.txt")
    write_lines(corpus_path, synthetic_sentences(sentences, rng))
    config = TrainConfig(
        model=model,
        corpora=[CorpusEntry(path=corpus_path)],
        total_steps=steps,
        peak_lr=1e-3,
        warmup_steps=100,
        batch_rows=sentences,
        seed=seed,
        checkpoint_every=max(1, steps),
    )
    result = train(config, os.path.join(out_dir, "run"), show_progress=False)
    metrics = result.metrics
    head, tail = metrics[:100], metrics[-100:]

    mask_rng = np.random.default_rng(seed + 1)
    reproduced = 0
    lines = load_corpus(corpus_path)
    for _, text in lines:
        ids = encode(text, result.vocab)
        pair = apply_mask(ids, sample_spans(len(ids), config.mask_ratio, config.mean_span, mask_rng))
        output = generate(pair.src_ids, result.params, DecodeConfig(strategy=Strategy.GREEDY,
                                                                     max_len=len(pair.trg_ids) + 2))
        reproduced += output == pair.trg_ids

    report = {
        "seed": seed,
        "steps": steps,
        "final_L_G": _median([r["L_G"] for r in tail]),
        "final_det_acc": _median([r["det_acc"] for r in tail if r["det_acc"] is not None]),
        "combined_first": _median([r["combined"] for r in head]),
        "combined_last": _median([r["combined"] for r in tail]),
        "reproduction_rate": reproduced / len(lines),
        "checkpoint": result.checkpoint_dir,
    }
    return _finish(out_dir, "overfit", report, started)


def run_ablation_ladder(out_dir, settings=None):
    """
    Three rungs on the noisy-copy task, fine-tuned from:
        rtd             pre-training with L_G + λ·L_D, fine-tuning G
        rtd_denoise     pre-training with L_G + λ·L_D + L_DG, fine-tuning G
        rtd_denoise_gd  the same checkpoint, fine-tuning G+D

    Returns:
        dict: Per-seed exact match and the median per rung.
    """
    started = time.time()
    settings = settings or ExperimentConfig()
    rungs = {"rtd": [], "rtd_denoise": [], "rtd_denoise_gd": []}
    for seed in settings.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        corpus_path, (src_path, trg_path), _, test_pairs = _setup(out_dir, settings, seed)
        rtd = _pretrain(settings, os.path.join(seed_dir, "pretrain_rtd"), corpus_path, seed,
                        ObjectiveOptions(use_denoising=False))
        full = _pretrain(settings, os.path.join(seed_dir, "pretrain_full"), corpus_path, seed)
        for rung, init, mode in (
            ("rtd", rtd.checkpoint_dir, FinetuneMode.G),
            ("rtd_denoise", full.checkpoint_dir, FinetuneMode.G),
            ("rtd_denoise_gd", full.checkpoint_dir, FinetuneMode.GD),
        ):
            tuned = _finetune(settings, os.path.join(seed_dir, f"finetune_{rung}"), src_path, trg_path, seed,
                              mode, init)
            rungs[rung].append(evaluate_pairs(tuned.params, tuned.vocab, test_pairs)["exact_match"])
    medians = {rung: _median(values) for rung, values in rungs.items()}
    ladder = list(medians.values())
    report = {
        "exact_match": rungs,
        "median": medians,
        "non_decreasing": all(a <= b for a, b in zip(ladder, ladder[1:])),
    }
    logging.info(f"Ablation ladder medians: {medians}")
    return _finish(out_dir, "ablation_ladder", report, started, settings)


def run_finetune_matrix(out_dir, settings=None):
    """
    Fine-tuning modes D, G and G+D from RTD-only and RTD+denoising checkpoints.

    D-mode models decode through the discriminator stack.
    """
    started = time.time()
    settings = settings or ExperimentConfig()
    cells = {}
    for seed in settings.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        corpus_path, (src_path, trg_path), _, test_pairs = _setup(out_dir, settings, seed)
        checkpoints = {
            "rtd": _pretrain(settings, os.path.join(seed_dir, "pretrain_rtd"), corpus_path, seed,
                             ObjectiveOptions(use_denoising=False)).checkpoint_dir,
            "rtd_denoise": _pretrain(settings, os.path.join(seed_dir, "pretrain_full"), corpus_path,
                                     seed).checkpoint_dir,
        }
        for pretraining, init in checkpoints.items():
            for mode in FinetuneMode:
                key = f"{pretraining}/{mode.value}"
                tuned = _finetune(settings, os.path.join(seed_dir, f"finetune_{pretraining}_{mode.name}"),
                                  src_path, trg_path, seed, mode, init)
                score = evaluate_pairs(tuned.params, tuned.vocab, test_pairs, _decoder_for(mode))
                cells.setdefault(key, []).append(score["exact_match"])
    report = {"exact_match": cells, "median": {key: _median(values) for key, values in cells.items()}}
    return _finish(out_dir, "finetune_matrix", report, started, settings)


def run_low_resource(out_dir, settings=None):
    """Pre-trained init on half the parallel data against random init on all of it."""
    started = time.time()
    settings = settings or ExperimentConfig()
    pretrained, scratch = [], []
    for seed in settings.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        corpus_path, (src_path, trg_path), train_pairs, test_pairs = _setup(out_dir, settings, seed)
        half_src, half_trg = write_parallel(os.path.join(seed_dir, "data"), "half",
                                            train_pairs[: len(train_pairs) // 2])
        init = _pretrain(settings, os.path.join(seed_dir, "pretrain"), corpus_path, seed).checkpoint_dir
        tuned = _finetune(settings, os.path.join(seed_dir, "finetune_pretrained_half"), half_src, half_trg, seed,
                          FinetuneMode.GD, init)
        pretrained.append(evaluate_pairs(tuned.params, tuned.vocab, test_pairs)["exact_match"])
        baseline = _finetune(settings, os.path.join(seed_dir, "finetune_scratch_full"), src_path, trg_path, seed,
                             FinetuneMode.G)
        scratch.append(evaluate_pairs(baseline.params, baseline.vocab, test_pairs)["exact_match"])
    report = {
        "pretrained_half": pretrained,
        "scratch_full": scratch,
        "median": {"pretrained_half": _median(pretrained), "scratch_full": _median(scratch)},
    }
    report["pretrained_matches_or_beats"] = report["median"]["pretrained_half"] >= report["median"]["scratch_full"]
    return _finish(out_dir, "low_resource", report, started, settings)


def _steps_to_target(run_dir, steps, pairs, target):
    """First saved step whose greedy exact match reaches `target`, or None."""
    for step in steps:
        state = load_checkpoint(checkpoint_path(run_dir, step))
        if evaluate_pairs(state.params, state.vocab, pairs)["exact_match"] >= target:
            return step
    return None


def run_copy_convergence(out_dir, settings=None, target=0.9, eval_every=20):
    """
    Fine-tunes the copy task from a pre-trained checkpoint and from random init, and counts
    the steps each needs to reach `target` exact match on held-out copies. Runs that never
    get there count as finetune_steps + eval_every.
    """
    started = time.time()
    settings = settings or ExperimentConfig()
    steps = sorted(set(range(eval_every, settings.finetune_steps + 1, eval_every)) | {settings.finetune_steps})
    never = settings.finetune_steps + eval_every
    arms = {"pretrained": [], "scratch": []}
    for seed in settings.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        corpus_path, _, _, _ = _setup(out_dir, settings, seed)
        pairs = copy_pairs(settings.train_pairs + settings.test_pairs, np.random.default_rng(seed + 1000))
        src_path, trg_path = write_parallel(os.path.join(seed_dir, "data"), "copy", pairs[: settings.train_pairs])
        test_pairs = pairs[settings.train_pairs:]
        init = _pretrain(settings, os.path.join(seed_dir, "pretrain"), corpus_path, seed).checkpoint_dir
        for arm, init_checkpoint in (("pretrained", init), ("scratch", None)):
            run_dir = os.path.join(seed_dir, f"copy_{arm}")
            _finetune(settings, run_dir, src_path, trg_path, seed, FinetuneMode.G, init_checkpoint,
                      checkpoint_every=eval_every)
            reached = _steps_to_target(run_dir, steps, test_pairs, target)
            arms[arm].append(never if reached is None else reached)
    medians = {arm: _median(values) for arm, values in arms.items()}
    report = {
        "target": target,
        "steps_to_target": arms,
        "median": medians,
        "pretrained_faster": medians["pretrained"] < min(medians["scratch"], never),
    }
    logging.info(f"Steps to exact match {target}: {medians}")
    return _finish(out_dir, "copy_convergence", report, started, settings)


def _sweep(out_dir, settings, name, values, variant):
    """Pre-train once per value and seed, fine-tune G, report exact match and detection accuracy."""
    started = time.time()
    rows = {}
    for seed in settings.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        corpus_path, (src_path, trg_path), _, test_pairs = _setup(out_dir, settings, seed)
        for value in values:
            objective, model = variant(value)
            run = _pretrain(settings, os.path.join(seed_dir, f"pretrain_{value}"), corpus_path, seed, objective,
                            model)
            tail = [r["det_acc"] for r in run.metrics[-20:] if r["det_acc"] is not None]
            tuned = _finetune(settings, os.path.join(seed_dir, f"finetune_{value}"), src_path, trg_path, seed,
                              FinetuneMode.G, run.checkpoint_dir)
            row = rows.setdefault(str(value), {"exact_match": [], "det_acc": []})
            row["exact_match"].append(evaluate_pairs(tuned.params, tuned.vocab, test_pairs)["exact_match"])
            row["det_acc"].append(_median(tail))
    report = {
        "values": [str(v) for v in values],
        "runs": rows,
        "median_exact_match": {key: _median(row["exact_match"]) for key, row in rows.items()},
    }
    return _finish(out_dir, name, report, started, settings)


def run_lambda_sweep(out_dir, settings=None):
    """Discriminator weight λ over settings.lambda_values."""
    settings = settings or ExperimentConfig()
    return _sweep(out_dir, settings, "lambda_sweep", settings.lambda_values,
                  lambda value: (ObjectiveOptions(lambda_d=value), None))


def run_disc_layer_sweep(out_dir, settings=None):
    """Discriminator decoder depth over settings.disc_layers."""
    settings = settings or ExperimentConfig()
    return _sweep(out_dir, settings, "disc_layer_sweep", settings.disc_layers,
                  lambda value: (None, settings.model.model_copy(update={"disc_dec_layers": value})))


EXPERIMENTS = {
    "overfit": lambda out_dir, settings: run_overfit(out_dir, seed=settings.seeds[0]),
    "ablation": run_ablation_ladder,
    "finetune-matrix": run_finetune_matrix,
    "low-resource": run_low_resource,
    "copy-convergence": run_copy_convergence,
    "lambda-sweep": run_lambda_sweep,
    "disc-layers": run_disc_layer_sweep,
}


# --- batch walkthrough ------------------------------------------------------------------


def inspect_batch(config, corpus_path, seed, checkpoint=None, rows=None, spans=None):
    """
    Runs one pre-training step's forward pass (no update) and renders every stage.

    The model comes from `checkpoint` when given, otherwise from a fresh initialisation
    with config.model over a vocab built from the corpus. A SpanSet in `spans` masks the
    same positions in every row instead of sampling them.

    Returns:
        str: The rendered dump (see format_batch_dump).
    """
    if checkpoint:
        state = load_checkpoint(checkpoint)
        params, vocab = state.params, state.vocab
    else:
        vocab = build_vocab(text for _, text in load_corpus(corpus_path))
        params = init_params(model_config_for(vocab, config.model), seed=seed)
    lines = load_corpus(corpus_path)
    rng = np.random.default_rng(seed)
    sentences = [(line_no, encode(text, vocab)) for line_no, text in lines]
    if rows is not None:
        sentences = sentences[:rows]
    if spans is None:
        pairs = make_pretrain_pairs(sentences, rng, config.mask_ratio, config.mean_span, config.max_span)
    else:
        pairs = []
        for line_no, ids in sentences:
            pair = apply_mask(ids, spans, vocab)
            pair.line_no = line_no
            pairs.append(pair)
    batch = make_batch(pairs, params.config.max_positions)
    output = pretrain_loss(batch, params, config.objective.lambda_d, rng, config.objective, training=False)
    return format_batch_dump(batch, [pairs[i] for i in batch.order], output, vocab, config.objective.threshold)


def _row(label, cells, width):
    return f"  {label:<10}" + " ".join(cell.ljust(width) for cell in cells).rstrip()


def format_batch_dump(batch, ordered_pairs, output, vocab, threshold=0.5):
    """
    Text walkthrough of one batch: source with [MASK], gold target, sampled target
    (* marks tokens that differ from gold), true and predicted ORIGINAL/REPLACED labels,
    the misclassified positions v (^) and the noisy context built from them (! marks
    corrupted tokens).
    """
    out = []
    for row, pair in enumerate(ordered_pairs):
        n = int(batch.trg_mask[row].sum())
        gold = [vocab.id_to_token[i] for i in batch.trg_out[row, :n]]
        sampled = output.sampled.sampled_ids[row, :n]
        labels = output.sampled.replaced_labels[row, :n]
        V = output.V[row, :n]
        v = output.noisy.replaced_positions[row, :n] if output.noisy is not None else np.zeros(n, dtype=bool)
        noisy = output.noisy.noisy_ids[row, :n] if output.noisy is not None else batch.trg_out[row, :n]
        scored = [int(t) != EOS_ID for t in batch.trg_out[row, :n]]

        sampled_cells = [vocab.id_to_token[t] + ("*" if lab == TokenLabel.REPLACED else "") for t, lab in
                         zip(sampled, labels)]
        true_cells = ["R" if lab == TokenLabel.REPLACED else "O" if s else "-" for lab, s in zip(labels, scored)]
        pred_cells = [("O" if p >= threshold else "R") if s else "-" for p, s in zip(V, scored)]
        v_cells = ["^" if flag else "" for flag in v]
        noisy_cells = [vocab.id_to_token[t] + ("!" if flag else "") for t, flag in zip(noisy, v)]
        width = max(len(c) for c in gold + sampled_cells + noisy_cells)

        out.append(f"row {row} (line {pair.line_no})")
        out.append(f"  {'original':<10}" + decode(pair.original_ids, vocab))
        out.append(f"  {'source':<10}" + decode(pair.src_ids, vocab))
        out.append(_row("gold", gold, width))
        out.append(_row("sampled", sampled_cells, width))
        out.append(_row("label", true_cells, width))
        out.append(_row("predicted", pred_cells, width))
        out.append(_row("v", v_cells, width))
        out.append(_row("noisy", noisy_cells, width))
        out.append("")
    out.append(
        f"L_G {output.L_G:.4f}  L_D {output.L_D:.4f}  L_DG "
        f"{'-' if output.L_DG is None else f'{output.L_DG:.4f}'}  combined {output.combined:.4f}  "
        f"det_acc {output.det_acc}  |v| {output.p}"
    )
    return "\n".join(out)
