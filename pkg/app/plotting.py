"""
Loss curves from a metrics.jsonl stream, written as SVG.
"""

import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.errors import DataError  # noqa: E402
from app.utils import read_jsonl, safe_file_operation  # noqa: E402

PLOT_KEYS = ("L_G", "L_D", "L_DG", "combined")


def series(records, keys=PLOT_KEYS):
    """
    Step/value pairs per key, skipping records where the key is missing or null.

    Returns:
        dict: key -> (steps, values) for every key with at least one value.
    """
    out = {}
    for key in keys:
        points = [(r["step"], r[key]) for r in records if r.get(key) is not None]
        if points:
            steps, values = zip(*points)
            out[key] = (list(steps), list(values))
    return out


@safe_file_operation
def plot_metrics(metrics_path, out_path, keys=PLOT_KEYS):
    """
    Draws one line per loss key against the training step.

    Each line carries its key as the SVG element id, and the x-axis label states the step
    range found in the data.

    Args:
        metrics_path (str): metrics.jsonl written by training.
        out_path (str): Target .svg file.
        keys (tuple): Metric keys to draw.

    Returns:
        dict: key -> number of points drawn.
    """
    records = read_jsonl(metrics_path)
    if not records:
        raise DataError(f"{metrics_path}: no metrics records to plot")
    data = series(records, keys)
    if not data:
        raise DataError(f"{metrics_path}: none of {', '.join(keys)} has a value")
    steps = [r["step"] for r in records]
    first, last = min(steps), max(steps)

    with plt.rc_context({"svg.fonttype": "none", "svg.hashsalt": "ganlm"}):
        fig, ax = plt.subplots(figsize=(8, 5))
        for key, (xs, ys) in data.items():
            (line,) = ax.plot(xs, ys, label=key, linewidth=1.2)
            line.set_gid(key)
        ax.set_xlabel(f"step ({first} to {last})")
        ax.set_ylabel("loss")
        ax.set_title("training losses")
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logging.info(f"Plotted {len(data)} series over steps {first}..{last} to {out_path}")
    return {key: len(xs) for key, (xs, _) in data.items()}
