"""Synthetic image tasks with group structure, plus group-aware splitting.

Two generators share the same background machinery (a smooth per-group
texture plus per-image noise, so images within a group correlate the way
repeat scans of one subject would):

* local-dots: the target is the number of small high-saturation dots,
  graded 0..K and encoded cumulatively (label g means "grade >= g+1"), so
  the signal is local texture, not global layout;
* global-shape: one large centered shape per image, one-hot labels, so the
  signal is global layout. Used for donor pretraining.

Every example is generated from its own labeled stream: row i depends only
on (seed, i, its group), never on how many rows were drawn before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import load_container, save_container
from .rng import rng_derive, rng_permutation

GENERATOR_VERSION = "1"
IMAGES_PER_GROUP = 5

_SHAPES = ("disk", "square", "triangle", "plus", "ring", "diamond")


@dataclass
class SynthTaskConfig:
    kind: str
    n: int
    seed: int
    image_size: int = 64
    num_classes: int = 5
    dot_radius: int = 2
    dots_per_class: int = 4
    noise_level: float = 0.08


@dataclass
class DatasetBundle:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N, K) float32 binary
    group_ids: np.ndarray  # (N,) int64
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def validate(self) -> None:
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if self.images.dtype != np.float32:
            raise ValueError(f"images must be float32, got {self.images.dtype}")
        if self.n > 0:
            lo, hi = float(self.images.min()), float(self.images.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"image values outside [0, 1]: [{lo}, {hi}]")
        if self.labels.ndim != 2 or self.labels.shape[0] != self.n:
            raise ValueError(f"labels must be (N, K), got {self.labels.shape}")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")
        if self.group_ids.shape != (self.n,):
            raise ValueError(f"group_ids must be (N,), got {self.group_ids.shape}")

    def save(self, path: str | Path) -> None:
        self.validate()
        save_container(
            path,
            {
                "images": self.images,
                "labels": self.labels,
                "group_ids": self.group_ids.astype(np.float64),
            },
            self.metadata,
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetBundle":
        tensors, metadata = load_container(path)
        bundle = cls(
            images=tensors["images"].astype(np.float32, copy=False),
            labels=tensors["labels"].astype(np.float32, copy=False),
            group_ids=tensors["group_ids"].astype(np.int64),
            metadata=metadata,
        )
        bundle.validate()
        return bundle


def _upsample_linear(coarse: np.ndarray, size: int) -> np.ndarray:
    """Separable linear interpolation of a small square grid up to size."""
    k = coarse.shape[0]
    pos = np.linspace(0.0, k - 1.0, size)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, k - 1)
    frac = pos - lo
    rows = coarse[lo] * (1 - frac)[:, None] + coarse[hi] * frac[:, None]
    return rows[:, lo] * (1 - frac)[None, :] + rows[:, hi] * frac[None, :]


def _background(config, group_stream, example_stream):
    size = config.image_size
    coarse = group_stream.gen.uniform(-1.0, 1.0, size=(5, 5))
    tint = group_stream.gen.uniform(-0.04, 0.04, size=3)
    base = 0.5 + 0.18 * _upsample_linear(coarse, size)
    img = base[:, :, None] + tint[None, None, :]
    img = img + config.noise_level * example_stream.gen.uniform(-1.0, 1.0, size=(size, size, 3))
    return img


def _check_geometry(config) -> int:
    margin = config.dot_radius + 1
    if config.image_size - 2 * margin < 2:
        raise ValueError(
            f"infeasible geometry: dot radius {config.dot_radius} leaves no "
            f"room in a {config.image_size}px image"
        )
    return margin


def synth_local_dots(config: SynthTaskConfig) -> DatasetBundle:
    """Counting task: grade g in 0..K places g * dots_per_class dots."""
    if config.n < 1:
        raise ValueError("need n >= 1")
    if config.num_classes < 1:
        raise ValueError("need num_classes >= 1")
    margin = _check_geometry(config)
    size, k_classes = config.image_size, config.num_classes
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((config.n, size, size, 3), dtype=np.float32)
    labels = np.zeros((config.n, k_classes), dtype=np.float32)
    group_ids = np.arange(config.n, dtype=np.int64) // IMAGES_PER_GROUP
    for i in range(config.n):
        ex = rng_derive(config.seed, f"dots/example/{i}")
        grp = rng_derive(config.seed, f"dots/group/{group_ids[i]}")
        grade = int(ex.gen.integers(0, k_classes + 1))
        img = _background(config, grp, ex)
        for _ in range(grade * config.dots_per_class):
            cy, cx = ex.gen.integers(margin, size - margin, size=2)
            jit = ex.gen.uniform(-0.05, 0.05)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= config.dot_radius**2
            img[mask] = np.array([0.92 + jit, 0.12, 0.16])
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i, : grade] = 1.0  # cumulative: label g == (grade >= g+1)
    bundle = DatasetBundle(images, labels, group_ids, _metadata(config))
    bundle.validate()
    return bundle


def synth_global_shape(config: SynthTaskConfig) -> DatasetBundle:
    """Layout task: one large centered shape, one-hot class labels."""
    if config.n < 1:
        raise ValueError("need n >= 1")
    if not 1 <= config.num_classes <= len(_SHAPES):
        raise ValueError(
            f"global-shape supports 1..{len(_SHAPES)} classes, got {config.num_classes}"
        )
    size, k_classes = config.image_size, config.num_classes
    if size < 16:
        raise ValueError("infeasible geometry: global-shape needs >= 16px images")
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((config.n, size, size, 3), dtype=np.float32)
    labels = np.zeros((config.n, k_classes), dtype=np.float32)
    group_ids = np.arange(config.n, dtype=np.int64) // IMAGES_PER_GROUP
    for i in range(config.n):
        ex = rng_derive(config.seed, f"shape/example/{i}")
        grp = rng_derive(config.seed, f"shape/group/{group_ids[i]}")
        cls = int(ex.gen.integers(0, k_classes))
        img = _background(config, grp, ex)
        radius = size * (0.26 + 0.06 * ex.gen.uniform())
        cy, cx = size / 2 + ex.gen.uniform(-size / 12, size / 12, size=2)
        mask = _shape_mask(_SHAPES[cls], yy, xx, cy, cx, radius)
        # same red-marker palette as the dots task so the two tasks share
        # low-level statistics while differing in layout
        lift = np.array([0.42, -0.30, -0.26]) + 0.05 * ex.gen.uniform(-1, 1, size=3)
        img = np.where(mask[:, :, None], img + lift[None, None, :], img)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i, cls] = 1.0
    bundle = DatasetBundle(images, labels, group_ids, _metadata(config))
    bundle.validate()
    return bundle


def _shape_mask(shape, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return (np.abs(dy) <= r * 0.82) & (np.abs(dx) <= r * 0.82)
    if shape == "triangle":
        # upward triangle: below the apex, inside the two slanted edges
        return (dy >= -r) & (dy <= r * 0.6) & (np.abs(dx) <= (dy + r) * 0.58)
    if shape == "plus":
        return ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)
        )
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (r * 0.55) ** 2)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.15
    raise ValueError(f"unknown shape {shape!r}")


def _metadata(config) -> dict[str, str]:
    return {
        "kind": config.kind,
        "seed": str(config.seed),
        "generator_version": GENERATOR_VERSION,
        "image_size": str(config.image_size),
        "num_classes": str(config.num_classes),
        "dot_radius": str(config.dot_radius),
        "dots_per_class": str(config.dots_per_class),
        "noise_level": str(config.noise_level),
        "images_per_group": str(IMAGES_PER_GROUP),
        # fixed constants the [0,1] pixel values are already centered around
        "norm_mean": "0.5",
        "norm_std": "0.25",
    }


def synth_dataset(config: SynthTaskConfig) -> DatasetBundle:
    if config.kind == "local-dots":
        return synth_local_dots(config)
    if config.kind == "global-shape":
        return synth_global_shape(config)
    raise ValueError(f"unknown dataset kind {config.kind!r}")


def _take(bundle: DatasetBundle, idx: np.ndarray, extra_meta: dict[str, str]) -> DatasetBundle:
    meta = dict(bundle.metadata)
    meta.update(extra_meta)
    return DatasetBundle(
        images=bundle.images[idx].copy(),
        labels=bundle.labels[idx].copy(),
        group_ids=bundle.group_ids[idx].copy(),
        metadata=meta,
    )


def split_by_group(bundle: DatasetBundle, test_fraction: float, seed: int
                   ) -> tuple[DatasetBundle, DatasetBundle]:
    """Split into (train, test) with every group wholly on one side.

    Groups are shuffled deterministically, then assigned to the test side
    greedily while that improves |test_size - fraction * n|; both sides are
    guaranteed non-empty. With equal group sizes the realized fraction lands
    within one group of the target.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    groups, counts = np.unique(bundle.group_ids, return_counts=True)
    if groups.size < 2:
        raise ValueError("need at least two groups to split")
    order = rng_permutation(rng_derive(seed, "split/groups"), groups.size)
    target = test_fraction * bundle.n
    chosen: list[int] = []
    test_count = 0
    for j in order:
        if len(chosen) + 1 == groups.size:
            break  # never empty the train side
        if abs(test_count + counts[j] - target) < abs(test_count - target):
            chosen.append(int(groups[j]))
            test_count += int(counts[j])
    if not chosen:
        # target smaller than every group: take the smallest shuffled group
        j = min(order[:-1], key=lambda j: counts[j])
        chosen.append(int(groups[j]))
    test_mask = np.isin(bundle.group_ids, chosen)
    train = _take(bundle, np.flatnonzero(~test_mask), {"split": "train"})
    test = _take(bundle, np.flatnonzero(test_mask), {"split": "test"})
    return train, test


def subset_by_group(bundle: DatasetBundle, n: int, seed: int) -> DatasetBundle:
    """Keep whole groups until about n examples are selected, original order."""
    if not 0 <= n <= bundle.n:
        raise ValueError(f"subset size must be in [0, {bundle.n}], got {n}")
    if n == 0:
        return _take(bundle, np.arange(0), {"subset": "0"})
    if n == bundle.n:
        return _take(bundle, np.arange(bundle.n), {})
    groups, counts = np.unique(bundle.group_ids, return_counts=True)
    order = rng_permutation(rng_derive(seed, "subset/groups"), groups.size)
    chosen = []
    count = 0
    for j in order:
        if count >= n:
            break
        chosen.append(groups[j])
        count += int(counts[j])
    idx = np.flatnonzero(np.isin(bundle.group_ids, chosen))
    return _take(bundle, idx, {"subset": str(n)})
