"""Static plots of training logs and metric reports."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402

LOSS_CURVES = ("l_total", "l_det", "l_pred", "l_refine")


def loss_figure(history: list[dict]):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    epochs = [row["epoch"] for row in history]
    for key in LOSS_CURVES:
        if all(key in row for row in history):
            ax.plot(epochs, [row[key] for row in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig


def metric_figure(report: dict):
    names = list(MetricReport.FIELDS)
    values = [report[n] for n in names]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.bar(names, values, color="tab:blue")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    return fig


def _save(fig, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    # strip the creation date so re-runs overwrite bit-identically
    fig.savefig(out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return out_path


def plot_loss_log(history: list[dict], out_path: str | Path) -> Path:
    return _save(loss_figure(history), out_path)


def plot_metric_report(report: dict, out_path: str | Path) -> Path:
    return _save(metric_figure(report), out_path)


def plot_file(in_path: str | Path, out_path: str | Path) -> Path:
    """Dispatch on file content: a loss log (list) or a metric report (dict)."""
    in_path = Path(in_path)
    if not in_path.exists():
        raise FileNotFoundError(f"no log or report at {in_path}")
    with open(in_path) as fh:
        data = json.load(fh)
    if isinstance(data, list):
        return plot_loss_log(data, out_path)
    if isinstance(data, dict):
        return plot_metric_report(data, out_path)
    raise ValueError(f"unrecognised plot input in {in_path}")
