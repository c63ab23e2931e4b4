"""Report figures from a metrics stream."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("total", "sig", "dec", "cons", "mask")


def _by_branch(records: list[dict]) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    for r in records:
        out.setdefault(r.get("branch", "main"), []).append(r)
    return out


def _smooth(values: list[float], window: int) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def _colors(branches) -> dict[str, str]:
    cycle = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    return {b: cycle[i % len(cycle)] for i, b in enumerate(branches)}


def plot_losses(records: list[dict], path, window: int = 20) -> Path:
    keys = [k for k in LOSS_KEYS if any(k in r for r in records)]
    groups = _by_branch(records)
    colors = _colors(groups)
    fig, axes = plt.subplots(len(keys), 1, figsize=(7, 2.2 * len(keys)), sharex=True, squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        for branch, recs in groups.items():
            pts = [(r["step"], r[key]) for r in recs if key in r]
            if pts:
                steps, vals = zip(*pts)
                ax.plot(steps, _smooth(list(vals), window), label=branch, lw=1, color=colors[branch])
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
    for ax in axes[:, 0]:
        ax.legend(fontsize=7, loc="upper right")
    axes[-1, 0].set_xlabel("step")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_lr(records: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 2.5))
    for branch, recs in _by_branch(records).items():
        ax.plot([r["step"] for r in recs], [r["lr"] for r in recs], label=branch, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_eval(results: dict[str, dict], path) -> Path:
    """Bar chart of recall@1 and zero-shot accuracy per checkpoint."""
    names = list(results)
    metrics = ("recall_at_1", "zero_shot_acc")
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(names)), 3))
    width = 0.8 / len(metrics)
    for j, m in enumerate(metrics):
        ax.bar([i + j * width for i in range(len(names))], [results[n].get(m, 0.0) for n in names],
               width, label=m)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(names))], names, fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_report(records: list[dict], out_dir, evals: dict[str, dict] | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    if records:
        paths += [plot_losses(records, out_dir / "loss.png"), plot_lr(records, out_dir / "lr.png")]
    if evals:
        paths.append(plot_eval(evals, out_dir / "eval.png"))
    return paths
