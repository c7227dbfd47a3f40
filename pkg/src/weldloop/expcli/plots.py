"""SVG plots rebuilt purely from the run's CSV files."""

from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from weldloop.expcli.runner import read_csv  # noqa: E402

plt.rcParams["svg.hashsalt"] = "weldloop"


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_returns(out: Path) -> Path:
    train = read_csv(out / "train_returns.csv")
    test = read_csv(out / "test_returns.csv")
    baseline = read_csv(out / "baseline.csv")
    best = max(float(r["mean_return"]) for r in baseline) if baseline else None
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2), sharey=True)
    for ax, rows, title in ((axes[0], train, "Train episode returns"), (axes[1], test, "Test episode returns")):
        ax.plot([int(r["episode"]) for r in rows], [float(r["return"]) for r in rows], color="tab:blue")
        if best is not None:
            ax.axhline(best, color="tab:red", linestyle="--", label="optimal constant power")
        ax.set_title(title)
        ax.set_xlabel("episode")
    axes[0].set_ylabel("return")
    axes[1].legend(loc="lower right")
    return _save(fig, out / "returns.svg")


def plot_trace(path: Path) -> Path:
    rows = read_csv(path)
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(steps, [float(r["OR"]) for r in rows], color="tab:blue", label="OR")
    ax.set_xlabel("step")
    ax.set_ylabel("OR [V]")
    ax2 = ax.twinx()
    ax2.plot(steps, [float(r["power"]) for r in rows], color="tab:red", label="power")
    ax2.set_ylabel("power [W]")
    ax.set_title(path.stem)
    return _save(fig, path.with_suffix(".svg"))


def plot_losses(out: Path) -> Path | None:
    rows = read_csv(out / "losses.csv")
    if not rows:
        return None
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    x = range(len(rows))
    axes[0].plot(x, [float(r["critic1_loss"]) for r in rows], label="critic1", lw=0.6)
    axes[0].plot(x, [float(r["critic2_loss"]) for r in rows], label="critic2", lw=0.6)
    axes[0].set_yscale("log")
    axes[0].legend()
    axes[1].plot(x, [float(r["actor_loss"]) for r in rows], lw=0.6)
    axes[1].set_title("actor loss")
    axes[2].plot(x, [float(r["alpha"]) for r in rows], lw=0.6)
    axes[2].set_title("alpha")
    for ax in axes:
        ax.set_xlabel("gradient step")
    return _save(fig, out / "losses.svg")


def _trace_number(path: Path) -> int:
    m = re.search(r"(\d+)$", path.stem)
    return int(m.group(1)) if m else -1


def plot_dir(out_dir) -> list[Path]:
    out = Path(out_dir)
    written = [plot_returns(out)]
    traces = sorted(out.glob("trace_ep*.csv"), key=_trace_number)
    written += [plot_trace(p) for p in traces]
    loss = plot_losses(out)
    if loss is not None:
        written.append(loss)
    return written
