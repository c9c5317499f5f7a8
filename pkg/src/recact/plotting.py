"""SVG emission for benchmark records. OOM entries show up as missing bars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .harness import BenchRecord


def _grouped_bars(ax, groups: dict[str, dict[int, float | None]], xticks: list[int], ylabel: str):
    width = 0.8 / max(len(groups), 1)
    for i, (mode, vals) in enumerate(sorted(groups.items())):
        xs, ys = [], []
        for j, x in enumerate(xticks):
            v = vals.get(x)
            if v is None:
                continue  # missing bar: OOM or not measured
            xs.append(j + i * width)
            ys.append(v)
        ax.bar(xs, ys, width=width, label=mode)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(xticks))])
    ax.set_xticklabels([str(x) for x in xticks])
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    ax.legend(fontsize=8)


def _collect(records: list[BenchRecord], xfield: str, yfield: str):
    groups: dict[str, dict[int, float | None]] = {}
    xticks: list[int] = []
    for r in records:
        x = getattr(r, xfield)
        if x not in xticks:
            xticks.append(x)
        y = getattr(r, yfield) if r.status == "ok" else None
        groups.setdefault(f"{r.backbone}/{r.mode}", {})[x] = y
    return groups, sorted(xticks)


def plot_latency(records: list[BenchRecord], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    groups, xticks = _collect(records, "context_timesteps", "mean_s")
    _grouped_bars(ax, groups, xticks, "mean per-step latency [s]")
    ax.set_xlabel("context length [timesteps]")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_throughput(records: list[BenchRecord], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    groups, xticks = _collect(records, "batch", "throughput_sps")
    _grouped_bars(ax, groups, xticks, "inference steps / s")
    ax.set_xlabel("batch size (parallel environments)")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_state_bytes(records: list[BenchRecord], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    by_mode: dict[str, list[tuple[int, int]]] = {}
    for r in records:
        by_mode.setdefault(f"{r.backbone}/{r.mode}", []).append((r.context_timesteps, r.state_bytes))
    for mode, pts in sorted(by_mode.items()):
        pts = sorted(set(pts))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("context length [timesteps]")
    ax.set_ylabel("carried state [bytes]")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def emit(records: list[BenchRecord], out_dir, stem: str) -> list[Path]:
    """CSV plus one SVG per metric; returns the written paths."""
    from .harness import emit_csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{stem}.csv"]
    emit_csv(records, paths[0])
    paths.append(plot_latency(records, out_dir / f"{stem}_latency.svg"))
    paths.append(plot_throughput(records, out_dir / f"{stem}_throughput.svg"))
    paths.append(plot_state_bytes(records, out_dir / f"{stem}_state_bytes.svg"))
    return paths
