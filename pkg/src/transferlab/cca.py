"""CCA / SVCCA numerical core and conv-activation subsampling.

The conv pipeline follows the patch procedure: choose just enough datapoints
n' that n'*h*w patches reach the target p, flatten spatial positions into the
sample axis, and draw at most d channels per side. Repetitions share the
patch plan between the two networks (same columns) but draw channels
independently; each repetition derives its own stream, so the aggregate is
independent of execution order.

All linear algebra runs in float64. Whitening uses the symmetric
eigendecomposition of the regularized auto-covariance: with eigenpairs
(V, w) of S + epsilon*I, the inverse square root is V diag(w^-1/2) V^T.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .container import save_container
from .engine import forward_graph
from .inits import WeightStore
from .models import ModelGraph, layer_shapes
from .rng import RngStream, rng_derive


class ConditioningError(RuntimeError):
    """Auto-covariance too close to singular for a stable inverse sqrt."""


@dataclass
class CcaSamplingConfig:
    p: int = 10000
    d: int = 64
    reps: int = 10
    variance_threshold: float = 0.99
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.p < 10 * self.d:
            raise ValueError(f"need p >= 10*d for conditioning, got p={self.p}, d={self.d}")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if not 0.0 < self.variance_threshold <= 1.0:
            raise ValueError("variance_threshold must be in (0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class ActivationMatrix:
    values: np.ndarray  # (d, m) float64
    layer: str = ""
    checkpoint_id: str = ""
    plan_id: str = ""


@dataclass
class CcaResult:
    correlations: np.ndarray  # descending, in [0, 1]
    similarity: float
    reps_mean: float | None = None
    reps_std: float | None = None
    retained: tuple[int, int] | None = None
    similarities: list[float] = field(default_factory=list)


def _check_matrix(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"{name} must be 2-D (neurons x samples), got {mat.shape}")
    if not np.isfinite(mat).all():
        raise ValueError(f"{name} contains non-finite values")
    return mat


def _inv_sqrt(cov: np.ndarray, epsilon: float) -> np.ndarray:
    d = cov.shape[0]
    w, v = np.linalg.eigh(cov + epsilon * np.eye(d))
    if w[0] <= 0.0 or w[0] < w[-1] * 1e-12:
        raise ConditioningError(
            f"auto-covariance nearly singular (eigenvalues {w[0]:.3e}..{w[-1]:.3e}); "
            "raise epsilon or reduce dimensions"
        )
    return (v * (1.0 / np.sqrt(w))) @ v.T


def cca(X, Y, epsilon: float = 1e-6) -> CcaResult:
    """Canonical correlations between row spaces of X (d1 x m) and Y (d2 x m).

    Rows are centered; correlations are the singular values of
    Sxx^-1/2 Sxy Syy^-1/2 with epsilon*I added to each auto-covariance,
    clipped to [0, 1], descending.
    """
    X = _check_matrix(X, "X")
    Y = _check_matrix(Y, "Y")
    m = X.shape[1]
    if Y.shape[1] != m:
        raise ValueError(f"sample axes differ: {X.shape} vs {Y.shape}")
    if m <= max(X.shape[0], Y.shape[0]):
        raise ValueError(f"need more samples than neurons: m={m}, d={max(X.shape[0], Y.shape[0])}")
    Xc = X - X.mean(axis=1, keepdims=True)
    Yc = Y - Y.mean(axis=1, keepdims=True)
    denom = m - 1
    sxx = (Xc @ Xc.T) / denom
    syy = (Yc @ Yc.T) / denom
    sxy = (Xc @ Yc.T) / denom
    t = _inv_sqrt(sxx, epsilon) @ sxy @ _inv_sqrt(syy, epsilon)
    sing = np.linalg.svd(t, compute_uv=False)
    corrs = np.clip(np.sort(sing)[::-1], 0.0, 1.0)
    return CcaResult(correlations=corrs, similarity=float(corrs.mean()))


def _svd_reduce(mat: np.ndarray, threshold: float) -> tuple[np.ndarray, int]:
    """Project onto top singular directions covering >= threshold of the
    squared-singular-value mass. Returns (k x m matrix, k)."""
    centered = mat - mat.mean(axis=1, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    mass = s * s
    total = mass.sum()
    if total == 0.0:
        raise ConditioningError("zero-variance matrix: nothing to correlate")
    frac = np.cumsum(mass) / total
    k = int(np.searchsorted(frac, threshold - 1e-15) + 1)
    k = min(k, s.size)
    return s[:k, None] * vt[:k], k


def svcca(X, Y, variance_threshold: float = 0.99, epsilon: float = 1e-6) -> CcaResult:
    """CCA after per-matrix SVD truncation.

    threshold=1.0 keeps every direction with nonzero singular value, which
    matches plain cca on full-rank input (the projection is then an
    orthogonal change of basis, to which CCA is exactly invariant).
    """
    X = _check_matrix(X, "X")
    Y = _check_matrix(Y, "Y")
    if Y.shape[1] != X.shape[1]:
        raise ValueError(f"sample axes differ: {X.shape} vs {Y.shape}")
    if X.shape[1] <= max(X.shape[0], Y.shape[0]):
        raise ValueError("need more samples than neurons")
    xr, kx = _svd_reduce(X, variance_threshold)
    yr, ky = _svd_reduce(Y, variance_threshold)
    result = cca(xr, yr, epsilon)
    result.retained = (kx, ky)
    return result


# ---------------------------------------------------------------------------
# conv activation sampling


def _patch_count(p: int, h: int, w: int, n: int) -> int:
    return min(n, math.ceil(p / (h * w)))


def _build_matrix(acts: np.ndarray, img_idx: np.ndarray, channels: np.ndarray) -> np.ndarray:
    """(len(channels), len(img_idx)*h*w) matrix: spatial positions join the
    sample axis, channels are the correlated units."""
    sub = acts[img_idx][:, :, :, channels]  # (n', h, w, c')
    n2, h, w, c2 = sub.shape
    return sub.reshape(n2 * h * w, c2).T.astype(np.float64)


def _plan_id(img_idx: np.ndarray, channels: np.ndarray) -> str:
    hsh = hashlib.sha256()
    hsh.update(np.ascontiguousarray(img_idx, dtype=np.int64).tobytes())
    hsh.update(np.ascontiguousarray(channels, dtype=np.int64).tobytes())
    return hsh.hexdigest()[:12]


def sample_conv_activations(acts: np.ndarray, config: CcaSamplingConfig,
                            stream: RngStream) -> ActivationMatrix:
    """One draw of the patch procedure on an (n, h, w, c) activation tensor."""
    if acts.ndim != 4:
        raise ValueError(f"expected (n, h, w, c) activations, got {acts.shape}")
    n, h, w, c = acts.shape
    if c < 1:
        raise ValueError("need at least one channel")
    n_sel = _patch_count(config.p, h, w, n)
    img_idx = np.sort(stream.gen.permutation(n)[:n_sel])
    if c > config.d:
        channels = np.sort(stream.gen.choice(c, size=config.d, replace=False))
    else:
        channels = np.arange(c)
    m = n_sel * h * w
    if m <= channels.size:
        raise ValueError(
            f"not enough samples: m={m} for {channels.size} channels; raise p or n"
        )
    return ActivationMatrix(
        values=_build_matrix(acts, img_idx, channels),
        plan_id=_plan_id(img_idx, channels),
    )


def conv_layer_cca(acts_a: np.ndarray, acts_b: np.ndarray, config: CcaSamplingConfig,
                   master_stream: RngStream) -> CcaResult:
    """Aggregated SVCCA over repetitions of the patch procedure.

    Each repetition derives three fixed sub-streams from the master stream
    label: a shared patch plan (both networks see the same columns) and one
    channel draw per network.
    """
    if acts_a.ndim != 4 or acts_b.ndim != 4:
        raise ValueError("activations must be (n, h, w, c)")
    if acts_a.shape[:3] != acts_b.shape[:3]:
        raise ValueError(
            f"geometry mismatch on the sample axis: {acts_a.shape} vs {acts_b.shape}"
        )
    n, h, w = acts_a.shape[:3]
    sims = []
    last = None
    for rep in range(config.reps):
        plan = rng_derive(master_stream.master_seed, f"{master_stream.label}/rep{rep}/plan")
        cha = rng_derive(master_stream.master_seed, f"{master_stream.label}/rep{rep}/chanA")
        chb = rng_derive(master_stream.master_seed, f"{master_stream.label}/rep{rep}/chanB")
        n_sel = _patch_count(config.p, h, w, n)
        img_idx = np.sort(plan.gen.permutation(n)[:n_sel])

        def pick(acts, st):
            c = acts.shape[3]
            if c > config.d:
                return np.sort(st.gen.choice(c, size=config.d, replace=False))
            return np.arange(c)

        ca, cb = pick(acts_a, cha), pick(acts_b, chb)
        m = n_sel * h * w
        if m <= max(ca.size, cb.size):
            raise ValueError(f"not enough samples: m={m}; raise p or the input count")
        xa = _build_matrix(acts_a, img_idx, ca)
        xb = _build_matrix(acts_b, img_idx, cb)
        last = svcca(xa, xb, config.variance_threshold, config.epsilon)
        sims.append(last.similarity)
    sims_arr = np.asarray(sims)
    return CcaResult(
        correlations=last.correlations,
        similarity=float(sims_arr.mean()),
        reps_mean=float(sims_arr.mean()),
        reps_std=float(sims_arr.std()),
        retained=last.retained,
        similarities=[float(s) for s in sims],
    )


# ---------------------------------------------------------------------------
# capture and reporting


def capture_activations(graph: ModelGraph, store: WeightStore, images: np.ndarray,
                        layer_name: str, batch: int = 64, path=None) -> np.ndarray:
    """Inference-mode activations after ``layer_name`` as (n, h, w, c).

    Head outputs are reshaped to n x 1 x 1 x classes so every capture shares
    the conv geometry. With ``path`` set, the tensor is persisted with the
    checkpoint id and layer in the metadata.
    """
    names = [l.name for l in graph.layers]
    if layer_name not in names:
        raise ValueError(f"unknown layer {layer_name!r}; graph has {names}")
    outs = []
    for start in range(0, images.shape[0], batch):
        out, _, _ = forward_graph(
            graph, store, images[start : start + batch], "infer", capture=layer_name
        )
        outs.append(np.asarray(out, dtype=np.float32))
    acts = np.concatenate(outs, axis=0)
    if acts.ndim == 2:
        acts = acts[:, None, None, :]
    if path is not None:
        save_container(
            path,
            {"acts": acts},
            {"layer": layer_name, "checkpoint_id": store.digest()},
        )
    return acts


def _normalize_pair(pair, default_graph):
    """Pair entries are (label, storeA, storeB) on the shared graph, or
    (label, (graphA, storeA), (graphB, storeB)) when graphs differ (slim)."""
    label, a, b = pair
    ga, sa = a if isinstance(a, tuple) else (default_graph, a)
    gb, sb = b if isinstance(b, tuple) else (default_graph, b)
    return label, (ga, sa), (gb, sb)


def similarity_report(graph: ModelGraph, weights_pairs, layers, images,
                      config: CcaSamplingConfig, seed: int) -> list[dict]:
    """One row per (pair, layer): aggregated SVCCA similarity.

    Rows carry the full sampling metadata so reports are self-describing.
    """
    rows = []
    for pair in weights_pairs:
        label, (ga, sa), (gb, sb) = _normalize_pair(pair, graph)
        for layer in layers:
            shapes_a = dict(layer_shapes(ga))
            shapes_b = dict(layer_shapes(gb))
            if layer not in shapes_a or layer not in shapes_b:
                raise ValueError(f"layer {layer!r} missing from a pair member")
            if shapes_a[layer][:2] != shapes_b[layer][:2]:
                raise ValueError(f"layer {layer!r} geometry differs between pair members")
            acts_a = capture_activations(ga, sa, images, layer)
            acts_b = capture_activations(gb, sb, images, layer)
            stream = rng_derive(seed, f"cca/{label}/{layer}")
            result = conv_layer_cca(acts_a, acts_b, config, stream)
            rows.append(
                {
                    "pair": label,
                    "layer": layer,
                    "mean_similarity": result.reps_mean,
                    "std_similarity": result.reps_std,
                    "reps": config.reps,
                    "p": config.p,
                    "d": config.d,
                    "variance_threshold": config.variance_threshold,
                    "epsilon": config.epsilon,
                }
            )
    return rows


REPORT_HEADER = "pair,layer,mean_similarity,std_similarity,reps,p,d,variance_threshold,epsilon"


def report_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    for row in rows:
        buf.write(
            f"{row['pair']},{row['layer']},{row['mean_similarity']!r},"
            f"{row['std_similarity']!r},{row['reps']},{row['p']},{row['d']},"
            f"{row['variance_threshold']!r},{row['epsilon']!r}\n"
        )
    return buf.getvalue()


def top_two_conv_layers(graph: ModelGraph) -> list[str]:
    """The "top two layers" reduction: the last two conv_bn_relu layers."""
    convs = [l.name for l in graph.layers if l.kind == "conv_bn_relu"]
    return convs[-2:]


def aggregate_layers(rows: list[dict], layers: list[str]) -> dict[str, float]:
    """Per pair label, the unweighted mean similarity over ``layers``."""
    out: dict[str, list[float]] = {}
    for row in rows:
        if row["layer"] in layers:
            out.setdefault(row["pair"], []).append(row["mean_similarity"])
    return {label: float(np.mean(vals)) for label, vals in out.items()}


def init_vs_converged_scatter(pairs) -> tuple[float, list[tuple[float, float]]]:
    """OLS R-squared for (similarity at init, similarity at convergence)
    pairs, plus the raw pairs for plotting."""
    pts = [(float(x), float(y)) for x, y in pairs]
    if len(pts) < 3:
        raise ValueError("need at least 3 runs for a scatter fit")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.allclose(x, x[0]):
        raise ValueError("zero variance in x; fit undefined")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return r2, pts
