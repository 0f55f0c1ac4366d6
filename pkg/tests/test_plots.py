import numpy as np

from dualpath.plots import plot_loss_curves, plot_recall
from dualpath.retrieval import RecallReport


def _history():
    rows = []
    for epoch in range(1, 4):
        for step in range(2):
            rows.append([epoch, 2 * (epoch - 1) + step + 1, 1 / epoch, 0.5, 0, 0, 0.2, 1.5 / epoch])
    return np.array(rows, dtype=float)


def test_loss_curves_written(tmp_path):
    out = plot_loss_curves(_history(), tmp_path / "sub" / "loss.png", title="t")
    assert out.exists() and out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert [p.name for p in out.parent.iterdir()] == ["loss.png"]


def test_recall_plot_reproducible(tmp_path):
    reports = {"a": RecallReport({1: 5.0, 25: 60.0}, 10), "b": RecallReport({1: 2.0, 25: 30.0}, 10)}
    a = plot_recall(reports, tmp_path / "a.png").read_bytes()
    b = plot_recall(reports, tmp_path / "b.png").read_bytes()
    assert a == b
