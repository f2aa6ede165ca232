"""Config-driven experiment runner.

A config is a flat mapping of dotted keys to strings, read from ``key =
value`` text files and/or command-line overrides. The fully resolved config
(defaults + file + overrides, canonicalized) is fingerprinted; each
experiment owns the directory ``<out_root>/<fingerprint>`` holding the
resolved ``config``, ``manifest.json``, ``log.csv``, ``result.json`` and the
init/final checkpoints. Re-running an existing fingerprint returns the
stored result unless forced. Validation reports every problem at once,
before any compute.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DatasetBundle,
    SynthTaskConfig,
    split_by_group,
    subset_by_group,
    synth_dataset,
)
from .engine import TrainConfig, TrainingLog, evaluate, steps_to_threshold, train
from .inits import BN_VARIANTS, init_store
from .models import build_cbr, graph_fingerprint, slim
from .optim import LrSchedule
from .transfusion import NO_BOUNDARY, apply_freeze, boundary_index, transfuse


class ValidationError(Exception):
    """Bad config or flags; every detected problem is in the message."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


class ExperimentError(RuntimeError):
    """A sub-operation failed; the message names the stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[stage {stage}] {cause}")
        self.stage = stage
        self.cause = cause


# every known key with its default; "" means unset
DEFAULTS: dict[str, str] = {
    "graph.variant": "cbr-tiny-desk",
    "graph.input": "64x64x3",
    "graph.classes": "5",
    "init.scheme": "random",
    "init.donor": "",
    "init.boundary": "none",
    "init.rest": "random",
    "init.freeze_variant": "prefix-random",
    "init.bn": "bn-identity",
    "init.bn_stats": "copy",
    "init.slim_from": "",
    "init.width_factor": "0.5",
    "data.kind": "local-dots",
    "data.path": "",
    "data.n": "6000",
    "data.subset": "",
    "data.seed": "",
    "data.test_fraction": "0.2",
    "data.dot_radius": "2",
    "data.dots_per_class": "4",
    "data.noise": "0.08",
    "train.optimizer": "adam",
    "train.lr": "0.001",
    "train.batch": "8",
    "train.steps": "1000",
    "train.momentum": "0.9",
    "train.flip": "false",
    "train.stop_at_threshold": "false",
    "train.schedule": "constant",
    "train.warmup_epochs": "0",
    "train.decay_epochs": "",
    "train.decay_factor": "10",
    "train.steps_per_epoch": "0",
    "eval.every": "100",
    "eval.batch": "64",
    "threshold.metric": "mean",
    "threshold.value": "0.85",
    "seed": "",
}

_SCHEMES = ("random", "meanvar", "sample", "shuffle", "gabor-conv1",
            "transfuse", "freeze", "slim", "checkpoint")
_DONOR_SCHEMES = ("meanvar", "sample", "shuffle", "transfuse", "slim", "checkpoint")
_FREEZE_MAP = {
    "full": "full_pretrained",
    "prefix-random": "prefix_pretrained_rest_random",
    "random": "random_baseline",
}


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and #-comments ignored."""
    out: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw!r}")
            continue
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    if problems:
        raise ValidationError(problems)
    return out


def read_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def _canon_int(v, lo=None):
    n = int(v)
    if lo is not None and n < lo:
        raise ValueError(f"must be >= {lo}")
    return str(n)


def _canon_float(v, lo=None):
    f = float(v)
    if not math.isfinite(f):
        raise ValueError("must be finite")
    if lo is not None and f < lo:
        raise ValueError(f"must be >= {lo}")
    return repr(f)


def _canon_bool(v):
    if v.lower() in ("true", "1", "yes"):
        return "true"
    if v.lower() in ("false", "0", "no"):
        return "false"
    raise ValueError("must be true or false")


def _canon_choice(options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {options}")
        return v
    return check


def _canon_shape(v):
    parts = v.lower().split("x")
    dims = tuple(int(p) for p in parts)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError("must look like HxWxC")
    return "x".join(str(d) for d in dims)


_CANON = {
    "graph.variant": str,
    "graph.input": _canon_shape,
    "graph.classes": lambda v: _canon_int(v, 1),
    "init.scheme": _canon_choice(_SCHEMES),
    "init.donor": str,
    "init.boundary": str,
    "init.rest": _canon_choice(("random", "meanvar", "sample", "shuffle", "gabor-conv1")),
    "init.freeze_variant": _canon_choice(tuple(_FREEZE_MAP)),
    "init.bn": _canon_choice(BN_VARIANTS),
    "init.bn_stats": _canon_choice(("copy", "reset")),
    "init.slim_from": str,
    "init.width_factor": lambda v: _canon_float(v),
    "data.kind": _canon_choice(("local-dots", "global-shape", "file")),
    "data.path": str,
    "data.n": lambda v: _canon_int(v, 1),
    "data.subset": lambda v: v if v == "" else _canon_int(v, 1),
    "data.seed": lambda v: v if v == "" else _canon_int(v),
    "data.test_fraction": lambda v: _canon_float(v),
    "data.dot_radius": lambda v: _canon_int(v, 1),
    "data.dots_per_class": lambda v: _canon_int(v, 1),
    "data.noise": lambda v: _canon_float(v, 0.0),
    "train.optimizer": _canon_choice(("adam", "sgd")),
    "train.lr": lambda v: _canon_float(v, 0.0),
    "train.batch": lambda v: _canon_int(v, 2),
    "train.steps": lambda v: _canon_int(v, 0),
    "train.momentum": lambda v: _canon_float(v, 0.0),
    "train.flip": _canon_bool,
    "train.stop_at_threshold": _canon_bool,
    "train.schedule": _canon_choice(("constant", "warmup-step")),
    "train.warmup_epochs": lambda v: _canon_float(v, 0.0),
    "train.decay_epochs": str,
    "train.decay_factor": lambda v: _canon_float(v),
    "train.steps_per_epoch": lambda v: _canon_int(v, 0),
    "eval.every": lambda v: _canon_int(v, 1),
    "eval.batch": lambda v: _canon_int(v, 1),
    "threshold.metric": str,
    "threshold.value": lambda v: _canon_float(v),
    "seed": lambda v: _canon_int(v),
}


def resolve_config(overrides: dict[str, str]) -> dict[str, str]:
    """Defaults overlaid with overrides, canonicalized; all problems at once."""
    problems = []
    for key in overrides:
        if key not in DEFAULTS:
            problems.append(f"unknown config key {key!r}")
    cfg = dict(DEFAULTS)
    cfg.update({k: v for k, v in overrides.items() if k in DEFAULTS})
    resolved = {}
    for key, value in cfg.items():
        if value == "":
            resolved[key] = ""
            continue
        try:
            resolved[key] = _CANON[key](value)
        except (ValueError, TypeError) as exc:
            problems.append(f"{key} = {value!r}: {exc}")
    if cfg.get("seed", "") == "":
        problems.append("seed: required (stochastic commands take no hidden entropy)")

    scheme = resolved.get("init.scheme", "random")
    if scheme in _DONOR_SCHEMES and not resolved.get("init.donor"):
        problems.append(f"init.donor: required for init.scheme = {scheme}")
    if scheme == "slim" and not resolved.get("init.slim_from"):
        problems.append("init.slim_from: required for init.scheme = slim")
    metric = resolved.get("threshold.metric", "mean")
    if metric not in ("mean", "none") and not metric.startswith("class:"):
        problems.append(f"threshold.metric = {metric!r}: must be mean, none, or class:<i>")
    if resolved.get("data.kind") == "file" and not resolved.get("data.path"):
        problems.append("data.path: required for data.kind = file")
    fraction = float(resolved.get("data.test_fraction", "0.2") or 0.2)
    if not 0.0 < fraction < 1.0:
        problems.append(f"data.test_fraction = {fraction}: must be in (0, 1)")
    if problems:
        raise ValidationError(problems)
    return resolved


def config_fingerprint(resolved: dict[str, str]) -> str:
    payload = "\n".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def config_to_text(resolved: dict[str, str]) -> str:
    return "".join(f"{k} = {resolved[k]}\n" for k in sorted(resolved))


@dataclass
class ExperimentResult:
    fingerprint: str
    config: dict[str, str]
    log: TrainingLog
    final_aucs: list[float]
    steps_to_threshold: int | None
    out_dir: Path
    checkpoint_path: Path
    cached: bool = False
    extras: dict = field(default_factory=dict)


def _graph_from_config(cfg):
    shape = tuple(int(d) for d in cfg["graph.input"].split("x"))
    return build_cbr(cfg["graph.variant"], shape, int(cfg["graph.classes"]))


def _dataset_from_config(cfg, graph):
    seed = int(cfg["data.seed"]) if cfg["data.seed"] else int(cfg["seed"])
    if cfg["data.kind"] == "file":
        bundle = DatasetBundle.load(cfg["data.path"])
    else:
        bundle = synth_dataset(
            SynthTaskConfig(
                kind=cfg["data.kind"],
                n=int(cfg["data.n"]),
                seed=seed,
                image_size=graph.input_shape[0],
                num_classes=graph.num_classes,
                dot_radius=int(cfg["data.dot_radius"]),
                dots_per_class=int(cfg["data.dots_per_class"]),
                noise_level=float(cfg["data.noise"]),
            )
        )
    if bundle.images.shape[1:] != tuple(graph.input_shape):
        raise ValueError(
            f"dataset images {bundle.images.shape[1:]} do not fit graph input "
            f"{graph.input_shape}"
        )
    if bundle.labels.shape[1] != graph.num_classes:
        raise ValueError(
            f"dataset has {bundle.labels.shape[1]} classes, graph expects "
            f"{graph.num_classes}"
        )
    train_side, test_side = split_by_group(bundle, float(cfg["data.test_fraction"]), seed)
    if cfg["data.subset"]:
        train_side = subset_by_group(train_side, int(cfg["data.subset"]), seed)
    return train_side, test_side


def _load_donor(cfg):
    if not cfg["init.donor"]:
        return None, None
    donor_graph, donor_store, _ = load_checkpoint(cfg["init.donor"])
    return donor_graph, donor_store


def _init_from_config(cfg, graph):
    """Returns (graph, store, freeze_mask or None). May replace the graph
    (slim hybrids)."""
    scheme = cfg["init.scheme"]
    seed = int(cfg["seed"])
    boundary = cfg["init.boundary"]
    donor_graph, donor_store = _load_donor(cfg)
    if scheme in ("random", "meanvar", "sample", "shuffle", "gabor-conv1"):
        store = init_store(graph, scheme, seed, donor=donor_store, bn_variant=cfg["init.bn"])
        return graph, store, None
    if scheme == "checkpoint":
        if donor_graph is None:
            raise ValueError("init.scheme = checkpoint needs init.donor")
        if graph_fingerprint(donor_graph) != graph_fingerprint(graph):
            raise ValueError("checkpoint graph does not match configured graph")
        return graph, donor_store, None
    if scheme == "transfuse":
        store = transfuse(donor_store, donor_graph, graph, _none(boundary),
                          cfg["init.rest"], seed, cfg["init.bn_stats"])
        return graph, store, None
    if scheme == "freeze":
        variant = _FREEZE_MAP[cfg["init.freeze_variant"]]
        store, mask = apply_freeze(variant, donor_store, donor_graph, graph,
                                   _none(boundary), seed)
        return graph, store, mask
    if scheme == "slim":
        slim_graph = slim(graph, cfg["init.slim_from"], float(cfg["init.width_factor"]))
        b_idx = boundary_index(graph, _none(boundary))
        s_idx = boundary_index(graph, cfg["init.slim_from"])
        if b_idx > s_idx:
            raise ValueError(
                f"slim_from {cfg['init.slim_from']!r} must be at or after the "
                f"boundary {boundary!r}"
            )
        rest = cfg["init.rest"]
        store = transfuse(donor_store, donor_graph, slim_graph, _none(boundary),
                          rest, seed, cfg["init.bn_stats"])
        return slim_graph, store, None
    raise ValueError(f"unknown init scheme {scheme!r}")


def _none(boundary):
    return None if boundary in NO_BOUNDARY else boundary


def _train_config(cfg, n_train):
    schedule = None
    if cfg["train.schedule"] == "warmup-step":
        spe = int(cfg["train.steps_per_epoch"])
        if spe == 0:
            spe = max(1, n_train // int(cfg["train.batch"]))
        decay = tuple(float(e) for e in cfg["train.decay_epochs"].split(",") if e.strip())
        schedule = LrSchedule(
            kind="warmup_step",
            base_lr=float(cfg["train.lr"]),
            warmup_epochs=float(cfg["train.warmup_epochs"]),
            decay_epochs=decay,
            decay_factor=float(cfg["train.decay_factor"]),
            steps_per_epoch=spe,
        )
    stop_metric = ""
    if cfg["train.stop_at_threshold"] == "true" and cfg["threshold.metric"] != "none":
        stop_metric = cfg["threshold.metric"]
    return TrainConfig(
        optimizer=cfg["train.optimizer"],
        lr=float(cfg["train.lr"]),
        schedule=schedule,
        momentum=float(cfg["train.momentum"]),
        batch=int(cfg["train.batch"]),
        steps=int(cfg["train.steps"]),
        eval_every=int(cfg["eval.every"]),
        eval_batch=int(cfg["eval.batch"]),
        seed=int(cfg["seed"]),
        flip_augment=cfg["train.flip"] == "true",
        stop_metric=stop_metric,
        stop_value=float(cfg["threshold.value"]),
    )


def load_result(out_dir) -> ExperimentResult:
    out_dir = Path(out_dir)
    summary = json.loads((out_dir / "result.json").read_text())
    log = TrainingLog.from_csv((out_dir / "log.csv").read_text())
    log.config_fingerprint = summary["fingerprint"]
    cfg = read_config(out_dir / "config")
    return ExperimentResult(
        fingerprint=summary["fingerprint"],
        config=cfg,
        log=log,
        final_aucs=summary["final_aucs"],
        steps_to_threshold=summary["steps_to_threshold"],
        out_dir=out_dir,
        checkpoint_path=out_dir / "final.tnsr",
        cached=True,
        extras=summary,
    )


def run_experiment(overrides: dict[str, str], out_root, force: bool = False
                   ) -> ExperimentResult:
    """Resolve, fingerprint, run and persist one experiment."""
    cfg = resolve_config(overrides)  # ValidationError propagates untouched
    fingerprint = config_fingerprint(cfg)
    out_dir = Path(out_root) / fingerprint
    if not force and (out_dir / "result.json").exists():
        return load_result(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError:
            raise
        except Exception as exc:
            raise ExperimentError(name, exc) from exc

    graph = stage("graph", _graph_from_config, cfg)
    train_side, test_side = stage("data", _dataset_from_config, cfg, graph)
    graph, store, mask = stage("init", _init_from_config, cfg, graph)
    seed = int(cfg["seed"])
    stage("persist-init", save_checkpoint, out_dir / "init.tnsr", graph, store,
          0, "none", seed)
    tc = _train_config(cfg, train_side.n)
    final_store, log = stage("train", train, graph, store, train_side, tc,
                             test_side, mask)
    log.config_fingerprint = fingerprint

    metric = cfg["threshold.metric"]
    reached = None
    if metric != "none":
        reached = steps_to_threshold(log, metric, float(cfg["threshold.value"]))
    if log.entries and np.isfinite(log.entries[-1].aucs).any():
        final_aucs = [float(a) for a in log.entries[-1].aucs]
    else:
        aucs, _ = stage("final-eval", evaluate, graph, final_store, test_side,
                        tc.eval_batch)
        final_aucs = [float(a) for a in aucs]

    def persist():
        (out_dir / "config").write_text(config_to_text(cfg))
        (out_dir / "manifest.json").write_text(
            json.dumps(
                {
                    "fingerprint": fingerprint,
                    "config": cfg,
                    "package_version": __version__,
                    "trainable_mask": mask,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        log.write_csv(out_dir / "log.csv")
        save_checkpoint(out_dir / "final.tnsr", graph, final_store,
                        log.entries[-1].step if log.entries else 0,
                        tc.optimizer, seed)
        mean_auc = float(np.nanmean(final_aucs)) if np.isfinite(final_aucs).any() else None
        (out_dir / "result.json").write_text(
            json.dumps(
                {
                    "fingerprint": fingerprint,
                    "steps_to_threshold": reached,
                    "threshold_metric": metric,
                    "threshold_value": float(cfg["threshold.value"]),
                    "final_aucs": final_aucs,
                    "final_mean_auc": mean_auc,
                    "class_count": log.class_count,
                    "wall_seconds": log.wall_seconds,
                    "checkpoint": "final.tnsr",
                    "init_checkpoint": "init.tnsr",
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )

    stage("persist", persist)
    return ExperimentResult(
        fingerprint=fingerprint,
        config=cfg,
        log=log,
        final_aucs=final_aucs,
        steps_to_threshold=reached,
        out_dir=out_dir,
        checkpoint_path=out_dir / "final.tnsr",
        cached=False,
    )
