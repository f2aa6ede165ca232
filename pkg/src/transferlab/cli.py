"""Command-line surface.

Every subcommand writes its outputs under ``--out`` plus a manifest of the
resolved parameters, so any run can be reproduced from its output directory
alone. Exit codes: 0 success, 1 validation error (including bad flags),
2 runtime failure.

Experiment commands (train, eval, transfuse, freeze, slim) share one config
space: keys come from a ``--config`` file, then repeated ``--set key=value``
overrides, then the command's own flags, highest last. ``--sweep
key=v1,v2`` fans the final config out over the listed values (multiple
sweeps form a grid); the independent runs go through a small worker pool.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cca import (
    CcaSamplingConfig,
    report_to_csv,
    similarity_report,
    top_two_conv_layers,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .container import ContainerError, load_container, save_container
from .data import DatasetBundle, SynthTaskConfig, synth_dataset
from .engine import TrainingLog, entry_metric
from .experiment import (
    ExperimentError,
    ValidationError,
    read_config,
    run_experiment,
)
from .figures import (
    filter_montage,
    render_convergence,
    render_filter_montage,
    render_similarity_by_layer,
    render_steps_to_threshold,
)
from .gabor import GaborConfig, gabor_bank
from .inits import BN_VARIANTS, init_store
from .models import build_cbr

_GRAY = "conv kernels average input channels before rendering"


class _Parser(argparse.ArgumentParser):
    """Usage problems become ValidationError so main() can exit 1."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, params: dict) -> None:
    clean = {k: v for k, v in params.items()
             if not callable(v) and k not in ("func", "command")}
    payload = {
        "command": command,
        "package_version": __version__,
        "parameters": {k: clean[k] for k in sorted(clean)},
    }
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit grayscale raster; the header is a single text line."""
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"expected a 2-D uint8 image, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode("ascii"))
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# experiment family


def _collect_overrides(args, forced: dict[str, str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    if getattr(args, "config", None):
        overrides.update(read_config(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key, value in forced.items():
        if value is not None:
            overrides[key] = str(value)
    return overrides


def _sweep_assignments(args) -> list[dict[str, str]]:
    axes = []
    for item in getattr(args, "sweep", None) or []:
        if "=" not in item:
            raise ValidationError(f"--sweep expects key=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ValidationError(f"--sweep {key}: no values")
        axes.append([(key.strip(), v) for v in vals])
    if not axes:
        return [{}]
    return [dict(combo) for combo in itertools.product(*axes)]


def _run_experiments(args, forced: dict[str, str]) -> int:
    base = _collect_overrides(args, forced)
    jobs = [dict(base, **assignment) for assignment in _sweep_assignments(args)]
    out_root = _out_dir(args)

    def one(overrides):
        return run_experiment(overrides, out_root, force=args.force)

    if len(jobs) == 1:
        results = [one(jobs[0])]
    else:
        with ThreadPoolExecutor(max_workers=min(4, len(jobs))) as pool:
            results = list(pool.map(one, jobs))
    for result in results:
        state = "cached" if result.cached else "done"
        reached = result.steps_to_threshold
        print(f"{state} {result.out_dir} steps_to_threshold="
              f"{reached if reached is not None else 'absent'}")
    return 0


def cmd_train(args) -> int:
    forced = {}
    if args.seed is not None:
        forced["seed"] = args.seed
    if args.steps is not None:
        forced["train.steps"] = args.steps
    return _run_experiments(args, forced)


def cmd_eval(args) -> int:
    forced = {
        "init.scheme": "checkpoint",
        "init.donor": args.checkpoint,
        "train.steps": "0",
    }
    if args.seed is not None:
        forced["seed"] = args.seed
    return _run_experiments(args, forced)


def cmd_transfuse(args) -> int:
    forced = {
        "init.scheme": "transfuse",
        "init.donor": args.donor,
        "init.boundary": args.boundary,
        "init.rest": args.rest,
        "init.bn_stats": args.bn_stats,
    }
    if args.seed is not None:
        forced["seed"] = args.seed
    if args.steps is not None:
        forced["train.steps"] = args.steps
    return _run_experiments(args, forced)


def cmd_freeze(args) -> int:
    forced = {
        "init.scheme": "freeze",
        "init.freeze_variant": args.variant,
        "init.boundary": args.L,
    }
    if args.donor is not None:
        forced["init.donor"] = args.donor
    if args.seed is not None:
        forced["seed"] = args.seed
    if args.steps is not None:
        forced["train.steps"] = args.steps
    return _run_experiments(args, forced)


def cmd_slim(args) -> int:
    forced = {
        "init.scheme": "slim",
        "init.donor": args.donor,
        "init.boundary": args.boundary,
        "init.slim_from": args.slim_from,
        "init.width_factor": args.width,
    }
    if args.seed is not None:
        forced["seed"] = args.seed
    if args.steps is not None:
        forced["train.steps"] = args.steps
    return _run_experiments(args, forced)


# ---------------------------------------------------------------------------
# data and inits


def cmd_synth_data(args) -> int:
    out = _out_dir(args)
    config = SynthTaskConfig(
        kind=args.kind,
        n=args.n,
        seed=args.seed,
        image_size=args.size,
        num_classes=args.classes,
        dot_radius=args.dot_radius,
        dots_per_class=args.dots_per_class,
        noise_level=args.noise,
    )
    bundle = synth_dataset(config)
    path = out / "dataset.tnsr"
    bundle.save(path)
    _write_manifest(out, "synth-data", vars(args) | {"file": path.name})
    print(f"{path} n={bundle.n} classes={bundle.labels.shape[1]}")
    return 0


def cmd_init(args) -> int:
    out = _out_dir(args)
    shape = tuple(int(d) for d in args.input.lower().split("x"))
    if len(shape) != 3:
        raise ValidationError("--input must look like HxWxC")
    graph = build_cbr(args.variant, shape, args.classes)
    donor = None
    if args.donor:
        donor_graph, donor_store, _ = load_checkpoint(args.donor)
        donor = donor_store
    store = init_store(graph, args.scheme, args.seed, donor=donor, bn_variant=args.bn)
    path = out / "init.tnsr"
    save_checkpoint(path, graph, store, 0, "none", args.seed)
    _write_manifest(out, "init", vars(args) | {"file": path.name})
    print(f"{path} digest={store.digest()}")
    return 0


def cmd_gabor(args) -> int:
    out = _out_dir(args)
    config = GaborConfig(
        n_angles=args.n_angles,
        sigmas=tuple(float(s) for s in args.sigmas.split(",")),
        frequencies=tuple(float(f) for f in args.freqs.split(",")),
        kernel_resize=args.resize,
        kernel_crop=args.crop,
    )
    bank = gabor_bank(config)
    path = out / "bank.tnsr"
    save_container(path, {"bank": bank.astype(np.float32)},
                   {"n_filters": str(bank.shape[0]), "size": str(bank.shape[1])})
    # montage expects (K, K, C_in, C_out)
    kernel = bank.transpose(1, 2, 0)[:, :, np.newaxis, :]
    write_pgm(out / "montage.pgm", filter_montage(kernel))
    render_filter_montage(kernel, out / "montage.png")
    _write_manifest(out, "gabor", vars(args) | {"file": path.name})
    print(f"{path} filters={bank.shape[0]} size={bank.shape[1]}")
    return 0


# ---------------------------------------------------------------------------
# analysis


def cmd_cca(args) -> int:
    out = _out_dir(args)
    if len(args.checkpoints) < 2:
        raise ValidationError("--checkpoints needs at least two paths "
                              "(repeat one path for a self-comparison)")
    loaded = [load_checkpoint(p) for p in args.checkpoints]
    graph0 = loaded[0][0]
    if args.layers == "top2":
        layers = top_two_conv_layers(graph0)
    elif args.layers == "all":
        layers = [l.name for l in graph0.layers if l.kind == "conv_bn_relu"]
    else:
        layers = [l.strip() for l in args.layers.split(",") if l.strip()]
    bundle = DatasetBundle.load(args.data)
    images = bundle.images
    if args.n is not None:
        if not 1 <= args.n <= bundle.n:
            raise ValidationError(f"--n must be in [1, {bundle.n}]")
        images = images[: args.n]
    config = CcaSamplingConfig(p=args.p, d=args.d, reps=args.reps,
                               variance_threshold=args.threshold,
                               epsilon=args.epsilon)
    names = [Path(p).stem or f"ckpt{i}" for i, p in enumerate(args.checkpoints)]
    pairs = []
    for i in range(1, len(loaded)):
        label = f"{names[0]}_vs_{names[i]}"
        if len(loaded) > 2 and names[1:].count(names[i]) > 1:
            label = f"{label}_{i}"  # duplicate basenames would merge rows
        pairs.append((label, (loaded[0][0], loaded[0][1]), (loaded[i][0], loaded[i][1])))
    rows = similarity_report(graph0, pairs, layers, images, config, args.seed)
    (out / "report.csv").write_text(report_to_csv(rows))
    render_similarity_by_layer(rows, out / "similarity_by_layer.png")
    _write_manifest(out, "cca", {
        "checkpoints": list(args.checkpoints),
        "layers": layers,
        "data": args.data,
        "n": args.n,
        "p": args.p,
        "d": args.d,
        "reps": args.reps,
        "threshold": args.threshold,
        "epsilon": args.epsilon,
        "seed": args.seed,
    })
    print(out / "report.csv")
    return 0


def cmd_export_filters(args) -> int:
    out = _out_dir(args)
    graph, store, _ = load_checkpoint(args.checkpoint)
    kinds = {l.name: l.kind for l in graph.layers}
    if kinds.get(args.layer) != "conv_bn_relu":
        raise ValidationError(f"--layer must name a conv layer, got {args.layer!r}")
    kernel = store[f"{args.layer}/kernel"]
    n = kernel.shape[3]
    width = len(str(n - 1))
    for i in range(n):
        tile = kernel[:, :, :, i].mean(axis=2).astype(np.float64)
        lo, hi = tile.min(), tile.max()
        if hi > lo:
            img = np.round((tile - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            img = np.full(tile.shape, 128, dtype=np.uint8)
        write_pgm(out / f"filter_{i:0{width}d}.pgm", img)
    write_pgm(out / "montage.pgm", filter_montage(kernel))
    render_filter_montage(kernel, out / "montage.png")
    _write_manifest(out, "export-filters", vars(args) | {"filters": n, "note": _GRAY})
    print(f"{out} filters={n}")
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    runs = []
    for d in args.dirs:
        d = Path(d)
        log_path = d / "log.csv"
        result_path = d / "result.json"
        if not log_path.exists() or not result_path.exists():
            raise FileNotFoundError(f"{d}: not an experiment directory (missing logs)")
        log = TrainingLog.from_csv(log_path.read_text())
        summary = json.loads(result_path.read_text())
        runs.append((d.name, log, summary))

    k_max = max(log.class_count for _, log, _ in runs)
    lines = ["run,step,loss,auc_mean," +
             ",".join(f"auc_{j}" for j in range(k_max)) + ",lr"]
    curves: dict[str, tuple[list[int], list[float]]] = {}
    for name, log, _ in runs:
        xs, ys = [], []
        for e in log.entries:
            mean = entry_metric(e, "mean")
            cells = [name, str(e.step), repr(float(e.loss)), repr(float(mean))]
            cells += [repr(float(a)) for a in e.aucs]
            cells += [""] * (k_max - log.class_count)
            cells.append(repr(float(e.lr)))
            lines.append(",".join(cells))
            if np.isfinite(mean):
                xs.append(e.step)
                ys.append(float(mean))
        curves[name] = (xs, ys)
    (out / "curves.csv").write_text("\n".join(lines) + "\n")

    summary_lines = ["run,steps_to_threshold"]
    threshold_by_run: dict[str, int | None] = {}
    threshold_value = None
    for name, _, summary in runs:
        reached = summary.get("steps_to_threshold")
        threshold_by_run[name] = reached
        threshold_value = summary.get("threshold_value", threshold_value)
        summary_lines.append(f"{name},{reached if reached is not None else 'absent'}")
    (out / "summary.csv").write_text("\n".join(summary_lines) + "\n")

    render_convergence(curves, out / "convergence.png", threshold=threshold_value)
    render_steps_to_threshold(threshold_by_run, out / "steps_to_threshold.png")
    _write_manifest(out, "report", {"dirs": [str(d) for d in args.dirs]})
    print(f"{out / 'curves.csv'}")
    print(f"{out / 'summary.csv'}")
    return 0


def cmd_inspect(args) -> int:
    tensors, metadata = load_container(args.path)
    for key in sorted(metadata):
        if key == "graph":
            continue  # long JSON blob; fingerprint identifies it
        print(f"meta {key}={metadata[key]}")
    for name, arr in tensors.items():
        digest = hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]
        shape = "x".join(str(d) for d in arr.shape)
        print(f"{name} {arr.dtype} {shape} {digest}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def _add_experiment_flags(p, seed_required=False):
    p.add_argument("--config", help="config file of key = value lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                   help="fan out over values of a key (repeatable, forms a grid)")
    p.add_argument("--seed", type=int, required=seed_required,
                   help="master seed (required unless the config sets one)")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--out", required=True, help="root directory for experiment dirs")
    p.add_argument("--force", action="store_true", help="re-run even if cached")


def build_parser() -> _Parser:
    parser = _Parser(prog="transferlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--kind", required=True, choices=("local-dots", "global-shape"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--dot-radius", type=int, default=2)
    p.add_argument("--dots-per-class", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run a training experiment")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (a 0-step experiment)")
    p.add_argument("--checkpoint", required=True)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfuse", help="train from a donor weight prefix")
    p.add_argument("--donor", required=True)
    p.add_argument("--boundary", default="none",
                   help="last layer copied from the donor (none = pure re-init)")
    p.add_argument("--rest", default="random",
                   choices=("random", "meanvar", "sample", "shuffle", "gabor-conv1"))
    p.add_argument("--bn-stats", default="copy", choices=("copy", "reset"))
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_transfuse)

    p = sub.add_parser("freeze", help="train with a frozen prefix")
    p.add_argument("--variant", required=True,
                   choices=("full", "prefix-random", "random"))
    p.add_argument("--L", default="none", help="freeze boundary layer")
    p.add_argument("--donor", help="donor checkpoint (not used by variant=random)")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_freeze)

    p = sub.add_parser("slim", help="train a narrow-suffix hybrid")
    p.add_argument("--donor", required=True)
    p.add_argument("--boundary", default="none")
    p.add_argument("--slim-from", required=True, dest="slim_from")
    p.add_argument("--width", type=float, default=0.5)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_slim)

    p = sub.add_parser("init", help="materialize an initialization checkpoint")
    p.add_argument("--variant", default="cbr-tiny-desk")
    p.add_argument("--input", default="64x64x3")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--scheme", default="random",
                   choices=("random", "meanvar", "sample", "shuffle", "gabor-conv1"))
    p.add_argument("--donor")
    p.add_argument("--bn", default="bn-identity", choices=BN_VARIANTS)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("gabor", help="generate the synthetic oriented-filter bank")
    p.add_argument("--n-angles", type=int, default=16)
    p.add_argument("--sigmas", default="2")
    p.add_argument("--freqs", default="0.08,0.16,0.25,0.32")
    p.add_argument("--resize", type=int, default=10)
    p.add_argument("--crop", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gabor)

    p = sub.add_parser("cca", help="per-layer similarity between checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True,
                   help="first path is compared against each of the rest")
    p.add_argument("--layers", default="top2",
                   help='"top2", "all", or a comma list of conv layers')
    p.add_argument("--data", required=True, help="dataset .tnsr file")
    p.add_argument("--n", type=int, help="use only the first n images")
    p.add_argument("--p", type=int, default=10000)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.99)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cca)

    p = sub.add_parser("export-filters", help="write conv filters as grayscale images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_filters)

    p = sub.add_parser("report", help="merge experiment logs into CSV + figures")
    p.add_argument("dirs", nargs="+", help="experiment directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="list tensors and digests in a container")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ExperimentError, ContainerError, FileNotFoundError, ValueError,
            RuntimeError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
