"""Graph execution and the training loop.

The engine walks a ModelGraph against a WeightStore: forward (train or
inference mode), backward with an optional trainable-layer restriction (the
pass stops below the lowest trainable layer), minibatch training with
deterministic epoch shuffles, and AUC evaluation. All data-dependent
randomness comes from labeled streams keyed by the config seed, so a run is
a pure function of (graph, weights, data, config).
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetBundle
from .inits import WeightStore
from .layers import (
    BN_MOMENTUM,
    BatchNormState,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    global_avgpool_backward,
    global_avgpool_forward,
    maxpool_backward,
    maxpool_forward,
    multilabel_bce,
    relu_backward,
    relu_forward,
)
from .metrics import auc_roc
from .models import CONV_BN_RELU, DENSE_HEAD, GLOBAL_AVGPOOL, MAXPOOL, ModelGraph
from .optim import LrSchedule, OptimizerState, lr_at, optimizer_step
from .rng import rng_derive, rng_permutation


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    schedule: LrSchedule | None = None  # overrides lr when set
    momentum: float = 0.9
    batch: int = 8
    steps: int = 1000
    eval_every: int = 100
    eval_batch: int = 64
    seed: int = 0
    flip_augment: bool = False
    stop_metric: str = ""  # "" | "mean" | "class:<i>"
    stop_value: float = 0.0


@dataclass
class LogEntry:
    step: int
    loss: float
    aucs: np.ndarray  # (K,) float64, NaN where a class had one label only
    lr: float


@dataclass
class TrainingLog:
    entries: list[LogEntry] = field(default_factory=list)
    class_count: int = 0
    config_fingerprint: str = ""
    wall_seconds: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["step", "loss"] + [f"auc_{k}" for k in range(self.class_count)] + ["lr"]
        buf.write(",".join(cols) + "\n")
        for e in self.entries:
            cells = [str(e.step), repr(float(e.loss))]
            cells += [repr(float(a)) for a in e.aucs]
            cells.append(repr(float(e.lr)))
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "TrainingLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = lines[0].split(",")
        if header[:2] != ["step", "loss"] or header[-1] != "lr":
            raise ValueError(f"unrecognized log header {lines[0]!r}")
        k = len(header) - 3
        log = cls(class_count=k)
        for ln in lines[1:]:
            cells = ln.split(",")
            log.entries.append(
                LogEntry(
                    step=int(cells[0]),
                    loss=float(cells[1]),
                    aucs=np.array([float(c) for c in cells[2 : 2 + k]]),
                    lr=float(cells[-1]),
                )
            )
        return log


def entry_metric(entry: LogEntry, which: str) -> float:
    """"mean" -> mean AUC ignoring undefined classes; "class:<i>" -> one AUC."""
    if which == "mean":
        if entry.aucs.size == 0 or not np.isfinite(entry.aucs).any():
            return float("nan")
        return float(np.nanmean(entry.aucs))
    if which.startswith("class:"):
        return float(entry.aucs[int(which.split(":", 1)[1])])
    raise ValueError(f"unknown metric {which!r}")


def steps_to_threshold(log: TrainingLog, which: str = "mean", value: float = 0.85):
    """Smallest logged step whose metric reaches ``value``; None if never.

    Resolution is the eval cadence: thresholds are only observable at logged
    steps.
    """
    for entry in log.entries:
        metric = entry_metric(entry, which)
        if np.isfinite(metric) and metric >= value:
            return entry.step
    return None


# ---------------------------------------------------------------------------
# graph execution


def _bn_state(store: WeightStore, name: str) -> BatchNormState:
    return BatchNormState(
        gamma=store[f"{name}/gamma"],
        beta=store[f"{name}/beta"],
        moving_mean=store[f"{name}/moving_mean"],
        moving_var=store[f"{name}/moving_var"],
    )


def forward_graph(graph: ModelGraph, store: WeightStore, x: np.ndarray, mode: str,
                  infer_bn: frozenset[str] = frozenset(), capture: str | None = None):
    """Run the graph. Returns (out, caches, batch_stats).

    ``infer_bn`` names conv layers whose batch norm runs in inference mode
    even when mode == "train" (frozen layers must not see batch statistics).
    With ``capture`` set, returns right after that layer: (activation, None,
    None).
    """
    caches = []
    batch_stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    h = x
    for layer in graph.layers:
        if layer.kind == CONV_BN_RELU:
            h, conv_cache = conv2d_forward(h, store[f"{layer.name}/kernel"])
            bn_mode = "infer" if (mode == "infer" or layer.name in infer_bn) else "train"
            h, bn_cache, stats = batchnorm_forward(h, _bn_state(store, layer.name), bn_mode)
            if stats is not None:
                batch_stats[layer.name] = stats
            h, relu_cache = relu_forward(h)
            caches.append((layer, (conv_cache, bn_cache, relu_cache)))
        elif layer.kind == MAXPOOL:
            h, cache = maxpool_forward(h)
            caches.append((layer, cache))
        elif layer.kind == GLOBAL_AVGPOOL:
            h, cache = global_avgpool_forward(h)
            caches.append((layer, cache))
        elif layer.kind == DENSE_HEAD:
            h, cache = dense_forward(h, store[f"{layer.name}/weight"], store[f"{layer.name}/bias"])
            caches.append((layer, cache))
        else:  # pragma: no cover - validate_graph rejects these
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        if capture == layer.name:
            return h, None, None
    if capture is not None:
        raise ValueError(f"capture layer {capture!r} not in graph")
    return h, caches, batch_stats


def backward_graph(graph: ModelGraph, caches, dout: np.ndarray,
                   trainable: frozenset[str] | None = None,
                   need_input_grad: bool = False):
    """Backpropagate dout through the cached forward pass.

    Returns (grads, dinput). Gradients are produced only for layers in
    ``trainable`` (None = everything); the walk stops below the lowest
    trainable parameter layer unless the input gradient was requested.
    """
    if trainable is None:
        trainable = frozenset(l.name for l in graph.layers)
    param_idx = [i for i, (layer, _) in enumerate(caches)
                 if layer.name in trainable and layer.kind in (CONV_BN_RELU, DENSE_HEAD)]
    lowest = 0 if need_input_grad else min(param_idx, default=len(caches))
    grads: dict[str, np.ndarray] = {}
    d = dout
    for i in range(len(caches) - 1, -1, -1):
        if i < lowest:
            break
        layer, cache = caches[i]
        if layer.kind == CONV_BN_RELU:
            conv_cache, bn_cache, relu_cache = cache
            d = relu_backward(d, relu_cache)
            d, dgamma, dbeta = batchnorm_backward(d, bn_cache)
            need_dx = i > lowest or need_input_grad
            d, dkernel = conv2d_backward(d, conv_cache, need_dx=need_dx)
            if layer.name in trainable:
                grads[f"{layer.name}/gamma"] = dgamma
                grads[f"{layer.name}/beta"] = dbeta
                grads[f"{layer.name}/kernel"] = dkernel
        elif layer.kind == MAXPOOL:
            d = maxpool_backward(d, cache)
        elif layer.kind == GLOBAL_AVGPOOL:
            d = global_avgpool_backward(d, cache)
        elif layer.kind == DENSE_HEAD:
            d, dweight, dbias = dense_backward(d, cache)
            if layer.name in trainable:
                grads[f"{layer.name}/weight"] = dweight
                grads[f"{layer.name}/bias"] = dbias
    dinput = d if (need_input_grad and lowest == 0) else None
    return grads, dinput


def evaluate(graph: ModelGraph, store: WeightStore, bundle: DatasetBundle,
             batch: int = 64) -> tuple[np.ndarray, float]:
    """Inference-mode pass over the bundle.

    Returns (per-class AUC, mean loss). Logits serve as ranking scores (the
    sigmoid is monotone, AUC is rank-based). Classes with a single label
    value get NaN.
    """
    n = bundle.n
    k = bundle.labels.shape[1]
    logits = np.empty((n, k), dtype=np.float64)
    total_loss = 0.0
    for start in range(0, n, batch):
        stop = min(start + batch, n)
        out, _, _ = forward_graph(graph, store, bundle.images[start:stop], "infer")
        logits[start:stop] = out
        loss, _ = multilabel_bce(out, bundle.labels[start:stop])
        total_loss += loss * (stop - start)
    aucs = np.full(k, np.nan)
    for j in range(k):
        col = bundle.labels[:, j]
        pos = int(col.sum())
        if 0 < pos < n:
            aucs[j] = auc_roc(logits[:, j], col)
    return aucs, total_loss / n


def _validate_freeze_mask(store: WeightStore, graph: ModelGraph, mask: dict[str, bool]):
    extra = set(mask) - set(store.entries)
    missing = set(store.entries) - set(mask)
    if extra or missing:
        raise ValueError(
            f"freeze mask must cover the store exactly; extra={sorted(extra)}, "
            f"missing={sorted(missing)}"
        )
    frozen_layers = set()
    for layer in graph.layers:
        flags = {name: mask[name] for name in store.entries if name.startswith(f"{layer.name}/")}
        if not flags:
            continue
        values = set(flags.values())
        if len(values) != 1:
            raise ValueError(f"freeze mask splits layer {layer.name}: {flags}")
        if not values.pop():
            frozen_layers.add(layer.name)
    return frozen_layers


def train(graph: ModelGraph, store: WeightStore, train_bundle: DatasetBundle,
          config: TrainConfig, eval_bundle: DatasetBundle | None = None,
          freeze_mask: dict[str, bool] | None = None
          ) -> tuple[WeightStore, TrainingLog]:
    """Train a copy of ``store``; the input store is never mutated.

    Logging happens at step 0, every ``eval_every`` steps and at the final
    step; the logged loss is the mean train loss since the previous logged
    step (at step 0: the loss of the first batch before any update). With a
    stop metric set, training ends at the first logged step at or above
    ``stop_value``. Frozen layers keep every tensor, including moving
    statistics, bitwise untouched, and their batch norm runs in inference
    mode.
    """
    if train_bundle.n < config.batch:
        raise ValueError(f"dataset ({train_bundle.n}) smaller than batch ({config.batch})")
    if config.batch < 2:
        raise ValueError("batch must be >= 2 for train-mode batch norm")
    if config.steps < 0 or config.eval_every < 1:
        raise ValueError("need steps >= 0 and eval_every >= 1")
    store = store.copy()
    if freeze_mask is None:
        frozen_layers: set[str] = set()
    else:
        frozen_layers = _validate_freeze_mask(store, graph, freeze_mask)
    trainable = frozenset(l.name for l in graph.layers if l.name not in frozen_layers)
    infer_bn = frozenset(frozen_layers)

    schedule = config.schedule or LrSchedule(kind="constant", base_lr=config.lr)
    opt = OptimizerState(kind=config.optimizer, momentum=config.momentum)
    k_classes = graph.num_classes
    log = TrainingLog(class_count=k_classes)
    start_time = time.monotonic()

    # deterministic batch supply: one shuffle per epoch, tail dropped
    epoch = 0
    cursor = 0
    perm = rng_permutation(rng_derive(config.seed, f"train/epoch/{epoch}"), train_bundle.n)

    def next_batch_idx():
        nonlocal epoch, cursor, perm
        if cursor + config.batch > train_bundle.n:
            epoch += 1
            cursor = 0
            perm = rng_permutation(rng_derive(config.seed, f"train/epoch/{epoch}"), train_bundle.n)
        idx = perm[cursor : cursor + config.batch]
        cursor += config.batch
        return idx

    def batch_arrays(idx, step):
        x = train_bundle.images[idx]
        if config.flip_augment:
            flips = rng_derive(config.seed, f"train/flip/{step}").gen.random(len(idx)) < 0.5
            if flips.any():
                x = x.copy()
                x[flips] = x[flips, :, ::-1, :]
        return x, train_bundle.labels[idx]

    def log_point(step, window):
        if eval_bundle is not None:
            aucs, _ = evaluate(graph, store, eval_bundle, config.eval_batch)
        else:
            aucs = np.full(k_classes, np.nan)
        loss = float(np.mean(window)) if window else float("nan")
        log.entries.append(LogEntry(step=step, loss=loss, aucs=aucs, lr=lr_at(schedule, step)))
        if config.stop_metric:
            metric = entry_metric(log.entries[-1], config.stop_metric)
            return bool(np.isfinite(metric) and metric >= config.stop_value)
        return False

    # step-0 entry: first batch loss under train-mode statistics, no update
    x0, y0 = batch_arrays(perm[: config.batch], 0)
    logits0, _, _ = forward_graph(graph, store, x0, "train", infer_bn)
    loss0, _ = multilabel_bce(logits0, y0)
    stopped = log_point(0, [loss0])

    window: list[float] = []
    step = 0
    while not stopped and step < config.steps:
        step += 1
        x, y = batch_arrays(next_batch_idx(), step)
        logits, caches, batch_stats = forward_graph(graph, store, x, "train", infer_bn)
        loss, dlogits = multilabel_bce(logits, y)
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        window.append(loss)
        grads, _ = backward_graph(graph, caches, dlogits, trainable)
        optimizer_step(opt, store.entries, grads, lr_at(schedule, step))
        for name, (mean, var) in batch_stats.items():
            mm = store[f"{name}/moving_mean"]
            mv = store[f"{name}/moving_var"]
            mm[...] = (BN_MOMENTUM * mm + (1.0 - BN_MOMENTUM) * mean).astype(np.float32)
            mv[...] = (BN_MOMENTUM * mv + (1.0 - BN_MOMENTUM) * var).astype(np.float32)
        if step % config.eval_every == 0 or step == config.steps:
            stopped = log_point(step, window)
            window = []
    log.wall_seconds = time.monotonic() - start_time
    return store, log
