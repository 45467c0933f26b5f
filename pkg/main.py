import os
import functools
import sys
import time
import logging
from enum import Enum
from logging.handlers import RotatingFileHandler
from typing import Optional

import typer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from app import autograd as ag
from app.checkpoint import load_checkpoint
from app.config import (
    DecodeConfig,
    DecoderChoice,
    FinetuneMode,
    Strategy,
    TrainMode,
    load_corpus_manifest,
    load_environment,
    load_experiment_config,
    load_train_config,
)
from app.corruption import parse_spans
from app.errors import GanLMError
from app.experiments import EXPERIMENTS, REPORT_NAME, inspect_batch
from app.inference import generate, strip_eos
from app.metrics import evaluate
from app.plotting import plot_metrics
from app.trainer import METRICS_NAME, train
from app.utils import (
    RunManifest,
    cleanup_old_logs,
    dump_json,
    ensure_dir,
    format_time,
    read_lines,
    write_file,
    write_json,
    write_lines,
)
from app.vocab import decode, encode

console = Console()
cli = typer.Typer(add_completion=False, help="GanLM: pre-train, fine-tune and decode a dual-decoder transformer.")

IO_EXIT_CODE = 3


class Experiment(str, Enum):
    OVERFIT = "overfit"
    ABLATION = "ablation"
    FINETUNE_MATRIX = "finetune-matrix"
    LOW_RESOURCE = "low-resource"
    COPY_CONVERGENCE = "copy-convergence"
    LAMBDA_SWEEP = "lambda-sweep"
    DISC_LAYERS = "disc-layers"


def setup_logging(logs_dir="./logs"):
    """
    Set up logging configuration for the application.

    Args:
        logs_dir (str): Directory of the rotating application.log.
    """
    ensure_dir(logs_dir)
    log_file = os.path.join(logs_dir, "application.log")

    file_handler = RotatingFileHandler(log_file, maxBytes=10 * 1024 * 1024, backupCount=5)
    file_handler.setLevel(logging.DEBUG)
    file_formatter = logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")
    file_handler.setFormatter(file_formatter)

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)

    # Remove all existing handlers
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()

    # Add only the file handler
    root_logger.addHandler(file_handler)


def _fail(message, code):
    logging.error(message)
    console.print(f"Error: {message}", style="bold red")
    raise typer.Exit(code=code)


def _guarded(func):
    """Maps the error taxonomy onto exit codes: 2 usage/config/data, 3 IO, 4 numeric."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except GanLMError as e:
            _fail(str(e), e.exit_code)
        except OSError as e:
            _fail(f"{e.__class__.__name__}: {e}", IO_EXIT_CODE)

    return wrapper


def _summary(title, rows):
    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Item")
    table.add_column("Value")
    for key, value in rows:
        table.add_row(key, str(value))
    console.print(Panel(title, border_style="bold green"))
    console.print(table)


@cli.callback()
def main(ctx: typer.Context):
    """
    Loads .env settings, configures file logging and the optional non-finite checks.
    """
    settings = load_environment()
    setup_logging(settings["log_dir"])
    cleanup_old_logs(settings["log_dir"], settings["log_max_age_days"])
    ctx.with_resource(ag.checked(settings["checked"]))
    logging.info(f"Command: {' '.join(sys.argv[1:]) or ctx.invoked_subcommand}")


def _run_training(config, config_path, out, resume, command):
    manifest = RunManifest(command=command, config_path=config_path, seed=config.seed)
    console.print(Panel.fit(f"Starting {config.mode.value} for {config.total_steps} steps...",
                            border_style="bold blue"))
    started = time.time()
    result = train(config, out, resume_from=resume, console=console)
    last = result.metrics[-1] if result.metrics else {}
    manifest.finish(checkpoint=result.checkpoint_dir, metrics=METRICS_NAME, steps=result.step).write(out)
    _summary(
        f"{config.mode.value} completed.",
        [
            ("checkpoint", result.checkpoint_dir),
            ("steps", result.step),
            ("final combined loss", last.get("combined")),
            ("final L_G", last.get("L_G")),
            ("final det_acc", last.get("det_acc")),
            ("time", format_time(time.time() - started)),
        ],
    )
    return result


@cli.command()
@_guarded
def pretrain(
    config: str = typer.Option(..., "--config", help="JSON training config."),
    out: str = typer.Option(..., "--out", help="Output directory."),
    corpus_manifest: Optional[str] = typer.Option(None, "--corpus-manifest", help="JSON list of {path, language_tag}."),
    seed: Optional[int] = typer.Option(None, "--seed"),
    resume: Optional[str] = typer.Option(None, "--resume", help="Checkpoint directory to continue from."),
):
    """Pre-train with L_G + λ·L_D + L_DG on span-corrupted corpora."""
    overrides = {"mode": TrainMode.PRETRAIN.value, "seed": seed}
    if corpus_manifest:
        overrides["corpora"] = [entry.model_dump() for entry in load_corpus_manifest(corpus_manifest)]
    train_config = load_train_config(config, **overrides)
    _run_training(train_config, config, out, resume, "pretrain")


@cli.command()
@_guarded
def finetune(
    config: str = typer.Option(..., "--config", help="JSON training config."),
    out: str = typer.Option(..., "--out", help="Output directory."),
    src_file: Optional[str] = typer.Option(None, "--src-file"),
    trg_file: Optional[str] = typer.Option(None, "--trg-file"),
    init_checkpoint: Optional[str] = typer.Option(None, "--init-checkpoint"),
    mode: Optional[FinetuneMode] = typer.Option(None, "--mode", help="G, D or G+D."),
    seed: Optional[int] = typer.Option(None, "--seed"),
    resume: Optional[str] = typer.Option(None, "--resume"),
):
    """Fine-tune on aligned parallel files (G, D or G+D)."""
    train_config = load_train_config(
        config,
        mode=TrainMode.FINETUNE.value,
        src_file=src_file,
        trg_file=trg_file,
        init_checkpoint=init_checkpoint,
        finetune_mode=mode.value if mode else None,
        seed=seed,
    )
    _run_training(train_config, config, out, resume, "finetune")


def _decode_lines(lines, state, decode_config):
    outputs = []
    for line in lines:
        ids = generate(encode(line, state.vocab), state.params, decode_config)
        outputs.append(decode(strip_eos(ids), state.vocab))
    return outputs


def _decode_config(beam, max_len, length_penalty, decoder):
    strategy = Strategy.GREEDY if beam == 1 else Strategy.BEAM
    return DecodeConfig(strategy=strategy, beam_size=beam, max_len=max_len, length_penalty=length_penalty,
                        decoder=decoder)


@cli.command(name="generate")
@_guarded
def generate_cmd(
    checkpoint: str = typer.Option(..., "--checkpoint"),
    input: str = typer.Option(..., "--input", help="One source sentence per line."),
    output: str = typer.Option(..., "--output", help="Output text file."),
    beam: int = typer.Option(4, "--beam", min=1),
    max_len: int = typer.Option(64, "--max-len", min=1),
    length_penalty: float = typer.Option(1.0, "--length-penalty", min=0.0),
    decoder: DecoderChoice = typer.Option(DecoderChoice.GENERATOR, "--decoder"),
):
    """Decode every input line; the discriminator is not used."""
    state = load_checkpoint(checkpoint)
    lines = read_lines(input)
    outputs = _decode_lines(lines, state, _decode_config(beam, max_len, length_penalty, decoder))
    out_dir = os.path.dirname(os.path.abspath(output))
    ensure_dir(out_dir)
    write_file(output, "".join(f"{line}\n" for line in outputs))
    RunManifest(command="generate").finish(checkpoint=checkpoint, input=input, output=output,
                                           lines=len(outputs)).write(out_dir)
    console.print(f"Decoded {len(outputs)} lines to {output}")


@cli.command(name="eval")
@_guarded
def eval_cmd(
    checkpoint: str = typer.Option(..., "--checkpoint"),
    src: str = typer.Option(..., "--src"),
    ref: str = typer.Option(..., "--ref"),
    out: str = typer.Option("./output/eval", "--out", help="Directory for report.json and the run manifest."),
    beam: int = typer.Option(4, "--beam", min=1),
    max_len: int = typer.Option(64, "--max-len", min=1),
    decoder: DecoderChoice = typer.Option(DecoderChoice.GENERATOR, "--decoder"),
):
    """Exact match and corpus BLEU of decoded sources against references, as JSON on stdout."""
    state = load_checkpoint(checkpoint)
    src_lines, ref_lines = read_lines(src), read_lines(ref)
    hyps = _decode_lines(src_lines, state, _decode_config(beam, max_len, 1.0, decoder))
    report = evaluate(hyps, ref_lines)
    ensure_dir(out)
    write_json(os.path.join(out, REPORT_NAME), report)
    write_lines(os.path.join(out, "hypotheses.txt"), hyps)
    RunManifest(command="eval").finish(checkpoint=checkpoint, src=src, ref=ref).write(out)
    typer.echo(dump_json(report), nl=False)


@cli.command()
@_guarded
def plot(
    metrics: str = typer.Option(..., "--metrics", help="metrics.jsonl from a training run."),
    out: str = typer.Option(..., "--out", help="Target .svg file."),
):
    """SVG line chart of L_G, L_D, L_DG and the combined loss against step."""
    out_dir = os.path.dirname(os.path.abspath(out))
    ensure_dir(out_dir)
    counts = plot_metrics(metrics, out)
    RunManifest(command="plot").finish(metrics=metrics, svg=out, points=counts).write(out_dir)
    console.print(f"Plotted {', '.join(counts)} to {out}")


@cli.command(name="inspect-batch")
@_guarded
def inspect_batch_cmd(
    config: str = typer.Option(..., "--config"),
    corpus: str = typer.Option(..., "--corpus"),
    seed: int = typer.Option(1, "--seed"),
    checkpoint: Optional[str] = typer.Option(None, "--checkpoint", help="Model to inspect; fresh init if omitted."),
    rows: Optional[int] = typer.Option(None, "--rows", min=1),
    spans: Optional[str] = typer.Option(None, "--spans", help="Fixed spans for every row, e.g. \"1-2,5\"."),
    out: str = typer.Option("./output/inspect", "--out"),
):
    """Walk one batch through masking, sampling, detection and context corruption."""
    train_config = load_train_config(config, seed=seed)
    fixed = parse_spans(spans) if spans else None
    dump = inspect_batch(train_config, corpus, seed, checkpoint=checkpoint, rows=rows, spans=fixed)
    ensure_dir(out)
    write_file(os.path.join(out, "batch.txt"), dump + "\n")
    RunManifest(command="inspect-batch", config_path=config, seed=seed).finish(corpus=corpus).write(out)
    console.print(dump, markup=False, highlight=False)


@cli.command()
@_guarded
def experiment(
    name: Experiment = typer.Argument(..., help="Which experiment to run."),
    out: str = typer.Option(..., "--out"),
    config: Optional[str] = typer.Option(None, "--config", help="JSON experiment settings."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Run a single seed instead of the configured ones."),
):
    """Desk-scale experiments on synthetic data; writes report.json."""
    settings = load_experiment_config(config, seeds=[seed] if seed is not None else None)
    ensure_dir(out)
    report = EXPERIMENTS[name.value](out, settings)
    console.print(Panel(f"Experiment {name.value} completed.", border_style="bold green"))
    console.print(dump_json({k: v for k, v in report.items() if k != "settings"}), markup=False, highlight=False)


if __name__ == "__main__":
    cli()
