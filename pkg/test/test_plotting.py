import pytest

from app.errors import DataError
from app.plotting import PLOT_KEYS, plot_metrics, series
from app.utils import append_jsonl, write_file


def write_metrics(path, records):
    for record in records:
        append_jsonl(path, record)


def test_plot_writes_one_line_per_key(tmp_path):
    metrics = str(tmp_path / "metrics.jsonl")
    write_metrics(metrics, [
        {"step": s, "L_G": 3.0 / s, "L_D": 0.5, "L_DG": 3.2 / s, "combined": 8.0 / s} for s in range(3, 11)
    ])
    out = str(tmp_path / "losses.svg")
    counts = plot_metrics(metrics, out)
    assert counts == {key: 8 for key in PLOT_KEYS}
    svg = open(out, encoding="utf-8").read()
    for key in PLOT_KEYS:
        assert f'id="{key}"' in svg
    assert "step (3 to 10)" in svg


def test_plot_is_reproducible(tmp_path):
    metrics = str(tmp_path / "metrics.jsonl")
    write_metrics(metrics, [{"step": s, "L_G": 1.0 / s, "combined": 2.0 / s} for s in range(1, 5)])
    plot_metrics(metrics, str(tmp_path / "a.svg"))
    plot_metrics(metrics, str(tmp_path / "b.svg"))
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_null_values_are_skipped():
    records = [{"step": 1, "L_G": 2.0, "L_D": None}, {"step": 2, "L_G": 1.5, "L_D": None}]
    assert series(records) == {"L_G": ([1, 2], [2.0, 1.5])}


def test_empty_metrics_file_is_a_data_error(tmp_path):
    metrics = tmp_path / "metrics.jsonl"
    write_file(str(metrics), "")
    with pytest.raises(DataError):
        plot_metrics(str(metrics), str(tmp_path / "out.svg"))


def test_metrics_without_losses_are_a_data_error(tmp_path):
    metrics = str(tmp_path / "metrics.jsonl")
    write_metrics(metrics, [{"step": 1, "lr": 0.1}])
    with pytest.raises(DataError):
        plot_metrics(metrics, str(tmp_path / "out.svg"))
