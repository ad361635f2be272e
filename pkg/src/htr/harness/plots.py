"""SVG figures rendered from run directories."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from htr.errors import InvalidArgumentError  # noqa: E402
from htr.harness.metrics import MetricsRow, column, read_csv  # noqa: E402

PathLike = Union[str, Path]


def _line_plot(runs: Mapping[str, Sequence[MetricsRow]], metric: str, ylabel: str, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, log in runs.items():
        xs, ys = column(log, metric)
        if xs:
            ax.plot(xs, ys, label=label, marker="." if len(xs) < 30 else None)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(ylabel)
    if len(runs) > 1:
        ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_reward_signal(runs: Mapping[str, Sequence[MetricsRow]], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, log in runs.items():
        for metric, style in (("hindsight_nonzero_reward_fraction", "-"), ("real_nonzero_reward_fraction", "--")):
            xs, ys = column(log, metric)
            if xs:
                kind = "hindsight" if metric.startswith("hindsight") else "real"
                ax.plot(xs, ys, style, label=f"{label} {kind}" if len(runs) > 1 else kind)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("fraction of nonzero-reward transitions")
    ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_prior_rollouts(positions: np.ndarray, goals: np.ndarray, success_radius: float, path: Path) -> Path:
    """Paths of pre-adaptation episodes over the goal semicircle."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for p in positions:
        ax.plot(p[:, 0], p[:, 1], lw=0.5, alpha=0.3, color="tab:blue")
    ax.scatter(positions[:, -1, 0], positions[:, -1, 1], s=4, color="tab:blue")
    for g in goals:
        ax.add_patch(plt.Circle(g, success_radius, fill=False, color="tab:red", lw=0.6))
    ax.set_aspect("equal")
    ax.set_title(f"{len(positions)} pre-adaptation trajectories")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def _discover(root: Path) -> dict[str, list[MetricsRow]]:
    runs = {}
    if (root / "metrics.csv").exists():
        runs[root.name] = read_csv(root / "metrics.csv")
    for csv_path in sorted(root.glob("*/metrics.csv")):
        runs[csv_path.parent.name] = read_csv(csv_path)
    return runs


def emit_plots(root: PathLike, out_dir: PathLike = None, success_radius: float = 0.2) -> list[Path]:
    """Render every figure the runs under ``root`` support; returns the written paths."""
    root = Path(root)
    out = Path(out_dir) if out_dir is not None else root
    out.mkdir(parents=True, exist_ok=True)
    runs = _discover(root)
    if not runs:
        raise InvalidArgumentError(f"no metrics.csv found under {root}")
    written = [
        _line_plot(runs, "avg_test_adaptation_return", "test adaptation return (sparse)", out / "adaptation_return.svg"),
        _line_plot(runs, "mean_hindsight_task_distance", "mean relabelled task distance", out / "hindsight_distance.svg"),
        plot_reward_signal(runs, out / "reward_signal.svg"),
    ]
    for npz in sorted([*root.glob("prior_rollouts.npz"), *root.glob("*/prior_rollouts.npz")]):
        with np.load(npz) as data:
            name = "prior_rollouts.svg" if npz.parent == root else f"prior_rollouts_{npz.parent.name}.svg"
            written.append(plot_prior_rollouts(data["positions"], data["goals"], success_radius, out / name))
    return written
