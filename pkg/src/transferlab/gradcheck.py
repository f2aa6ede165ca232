"""Central-difference gradient checking.

``f`` maps a dict of float64 tensors to ``(scalar_loss, grads_dict)``.  A
random subset of coordinates across all tensors is perturbed by +-h and the
symmetric difference quotient is compared against the analytic gradient.
"""

from __future__ import annotations

import numpy as np

from .rng import RngStream


def grad_check(f, tensors, stream: RngStream, n_coords: int = 200, h: float = 1e-5,
               denom_floor: float = 1e-3) -> float:
    """Return the max relative error over sampled coordinates.

    Relative error for one coordinate is |a - n| / max(|a|, |n|, denom_floor)
    with a the analytic and n the numeric derivative; the floor keeps dead
    coordinates (both near zero) from dominating via noise.
    All tensors must be float64; float32 has too little headroom for h=1e-5.
    """
    for name, arr in tensors.items():
        if arr.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 tensors, {name} is {arr.dtype}")

    work = {name: arr.copy() for name, arr in tensors.items()}
    _, grads = f(work)
    missing = set(work) - set(grads)
    if missing:
        raise ValueError(f"f returned no gradient for {sorted(missing)}")

    names = sorted(work)
    sizes = np.array([work[n].size for n in names], dtype=np.int64)
    total = int(sizes.sum())
    n_coords = min(n_coords, total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if total <= n_coords:
        coords = np.arange(total)
    else:
        # sample without replacement from the concatenated coordinate space
        coords = stream.gen.choice(total, size=n_coords, replace=False)

    max_rel = 0.0
    for flat in coords:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        idx = int(flat - offsets[which])
        arr = work[name]
        orig = arr.flat[idx]
        arr.flat[idx] = orig + h
        lp, _ = f(work)
        arr.flat[idx] = orig - h
        lm, _ = f(work)
        arr.flat[idx] = orig
        numeric = (lp - lm) / (2.0 * h)
        analytic = float(grads[name].flat[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), denom_floor)
        max_rel = max(max_rel, rel)
    return max_rel
