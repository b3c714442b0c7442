"""Training-curve figures and a markdown summary from ``metrics.jsonl`` logs."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import EpochMetrics, read_metrics  # noqa: E402

PANELS = (
    ("Loss", ("loss",)),
    ("Accuracy", ("accuracy",)),
    ("F1 / precision / recall", ("f1_macro", "precision_macro", "recall_macro")),
)
_STYLES = {"train": "-", "val": "--"}


class EmptyLogError(ValueError):
    pass


def find_logs(run_dir) -> dict[str, Path]:
    """Map model name to its metrics log.

    A run directory either holds ``metrics.jsonl`` itself or one subdirectory
    per model (``cnn/metrics.jsonl``, ``vit/metrics.jsonl``).
    """
    run_dir = Path(run_dir)
    if (run_dir / "metrics.jsonl").is_file():
        return {run_dir.name or "model": run_dir / "metrics.jsonl"}
    return {p.parent.name: p for p in sorted(run_dir.glob("*/metrics.jsonl"))}


def load_runs(run_dir) -> dict[str, list[EpochMetrics]]:
    logs = find_logs(run_dir)
    if not logs:
        raise EmptyLogError(f"no epochs logged: no metrics.jsonl under {run_dir}")
    runs = {}
    for name, path in logs.items():
        rows = read_metrics(path)
        if not rows:
            raise EmptyLogError(f"no epochs logged in {path}")
        runs[name] = rows
    return runs


def _series(rows, split, key):
    pts = [(r.epoch, getattr(r, key)) for r in rows if r.split == split]
    return [p[0] for p in pts], [p[1] for p in pts]


def plot_curves(runs: Mapping[str, list[EpochMetrics]], path) -> plt.Figure:
    """Three panels (loss, accuracy, F1/precision/recall), train and val per model."""
    fig, axes = plt.subplots(1, len(PANELS), figsize=(5 * len(PANELS), 4), constrained_layout=True)
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ax, (title, keys) in zip(axes, PANELS):
        for m, (name, rows) in enumerate(runs.items()):
            for k, key in enumerate(keys):
                for split, style in _STYLES.items():
                    xs, ys = _series(rows, split, key)
                    if not xs:
                        continue
                    label = f"{name} {split}" if len(keys) == 1 else f"{name} {split} {key.split('_')[0]}"
                    ax.plot(xs, ys, style, color=colors[(m * len(keys) + k) % len(colors)], marker=".", label=label)
        ax.set_title(title)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.savefig(path, dpi=110)
    return fig


def summary_table(runs: Mapping[str, list[EpochMetrics]]) -> str:
    lines = [
        "| model | epochs | final val acc | best val acc (epoch) | final val loss | final val F1 |",
        "|---|---|---|---|---|---|",
    ]
    for name, rows in runs.items():
        val = [r for r in rows if r.split == "val"]
        if not val:
            raise EmptyLogError(f"no validation epochs logged for {name}")
        best = max(val, key=lambda r: r.accuracy)
        last = val[-1]
        lines.append(
            f"| {name} | {last.epoch} | {last.accuracy:.4f} | {best.accuracy:.4f} ({best.epoch}) "
            f"| {last.loss:.4f} | {last.f1_macro:.4f} |"
        )
    return "\n".join(lines) + "\n"


def write_report(run_dir, out_dir=None) -> tuple[Path, Path]:
    """Render ``curves.png`` and ``summary.md`` for every model log under ``run_dir``."""
    runs = load_runs(run_dir)
    out_dir = Path(out_dir or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = out_dir / "curves.png"
    fig = plot_curves(runs, curves)
    plt.close(fig)
    summary = out_dir / "summary.md"
    summary.write_text("# Training summary\n\n" + summary_table(runs) + "\n![curves](curves.png)\n")
    return curves, summary
