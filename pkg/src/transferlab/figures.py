"""File-output figure rendering.

Every renderer takes already-computed rows or arrays and writes a PNG next
to the delimited output; nothing here recomputes results. The Agg backend is
forced so the functions work headless.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def render_convergence(curves: dict[str, tuple[list[int], list[float]]],
                       path, ylabel: str = "mean AUC",
                       threshold: float | None = None) -> Path:
    """One line per run: x = step, y = the tracked metric."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name in sorted(curves):
        steps, values = curves[name]
        ax.plot(steps, values, label=name, linewidth=1.4)
    if threshold is not None:
        ax.axhline(threshold, color="gray", linestyle="--", linewidth=1.0,
                   label=f"threshold {threshold:g}")
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if curves:
        ax.legend(fontsize=8)
    return _finish(fig, path)


def render_steps_to_threshold(summary: dict[str, int | None], path,
                              threshold_label: str = "") -> Path:
    """Bar per run; runs that never reached the threshold get a hatched
    full-height bar."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    names = sorted(summary)
    reached = [summary[n] for n in names]
    finite = [v for v in reached if v is not None]
    ceiling = max(finite) * 1.15 if finite else 1.0
    for i, name in enumerate(names):
        v = summary[name]
        if v is None:
            ax.bar(i, ceiling, color="none", edgecolor="firebrick", hatch="//")
        else:
            ax.bar(i, v, color="steelblue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("steps to threshold" + (f" ({threshold_label})" if threshold_label else ""))
    ax.grid(True, axis="y", alpha=0.3)
    return _finish(fig, path)


def render_similarity_by_layer(rows: list[dict], path) -> Path:
    """rows: dicts with pair, layer, mean_similarity, std_similarity.
    Layers keep their first-seen order (network order)."""
    layers: list[str] = []
    for row in rows:
        if row["layer"] not in layers:
            layers.append(row["layer"])
    pairs = sorted({row["pair"] for row in rows})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for pair in pairs:
        ys, es, xs = [], [], []
        for i, layer in enumerate(layers):
            match = [r for r in rows if r["pair"] == pair and r["layer"] == layer]
            if match:
                xs.append(i)
                ys.append(float(match[0]["mean_similarity"]))
                es.append(float(match[0]["std_similarity"]))
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=pair)
    ax.set_xticks(range(len(layers)))
    ax.set_xticklabels(layers, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean similarity")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return _finish(fig, path)


def filter_montage(kernel: np.ndarray) -> np.ndarray:
    """(K, K, C_in, C_out) conv kernel -> uint8 grayscale montage.

    Each output filter is averaged over input channels, min-max scaled to
    0..255 on its own (constant filters map to 128), then tiled row-major
    into a near-square grid with 1px separators.
    """
    if kernel.ndim != 4:
        raise ValueError(f"expected (K, K, C_in, C_out) kernel, got {kernel.shape}")
    k = kernel.shape[0]
    n = kernel.shape[3]
    tiles = kernel.mean(axis=2)  # (K, K, C_out)
    cols = math.ceil(n ** 0.5)
    rows = (n + cols - 1) // cols
    canvas = np.full((rows * (k + 1) + 1, cols * (k + 1) + 1), 255, dtype=np.uint8)
    for i in range(n):
        tile = tiles[:, :, i].astype(np.float64)
        lo, hi = tile.min(), tile.max()
        if hi > lo:
            img = np.round((tile - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            img = np.full((k, k), 128, dtype=np.uint8)
        r, c = divmod(i, cols)
        y, x = r * (k + 1) + 1, c * (k + 1) + 1
        canvas[y:y + k, x:x + k] = img
    return canvas


def render_filter_montage(kernel: np.ndarray, path) -> Path:
    canvas = filter_montage(kernel)
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(canvas, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
    ax.set_axis_off()
    return _finish(fig, path)
