"""Forward/backward kernels for the conv-batchnorm-relu model family.

Conventions shared by every kernel here:

* activations are NHWC, conv kernels are (K, K, Cin, Cout);
* each ``*_forward`` returns ``(output, cache)`` and the matching
  ``*_backward(grad_out, cache)`` returns gradients for every forward input;
* kernels are dtype-generic: training runs float32, gradient checks float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Batch-norm constants used across the package; per-state overrides exist for
# unit tests but training and inference always agree on these.
BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


# ---------------------------------------------------------------------------
# convolution, stride 1, zero "same" padding


def conv2d_forward(x, kernel):
    """Cross-correlation of NHWC ``x`` with (K, K, Cin, Cout) ``kernel``.

    Stride 1, zero padding chosen so the spatial size is preserved; only odd
    square kernels are accepted so "same" is unambiguous. No bias term: the
    batch norm beta that always follows plays that role.
    """
    k = kernel.shape[0]
    if kernel.ndim != 4 or kernel.shape[1] != k:
        raise ValueError(f"kernel must be (K, K, Cin, Cout), got {kernel.shape}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ValueError(
            f"input {x.shape} does not match kernel input channels {kernel.shape}"
        )
    n, h, w, cin = x.shape
    cout = kernel.shape[3]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # (N, H, W, Cin, K, K) windows -> rows of (K, K, Cin) patches
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * cin)
    y = cols @ kernel.reshape(k * k * cin, cout)
    cache = (cols, x.shape, kernel)
    return y.reshape(n, h, w, cout), cache


def conv2d_backward(dy, cache, need_dx=True):
    """Gradients (dx, dkernel) for conv2d_forward.

    ``need_dx=False`` skips the input gradient (dx comes back None); used at
    the lowest trainable layer where nothing below consumes it.
    """
    cols, x_shape, kernel = cache
    n, h, w, cin = x_shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    pad = k // 2
    dyf = dy.reshape(n * h * w, cout)
    dkernel = (cols.T @ dyf).reshape(k, k, cin, cout)
    if not need_dx:
        return None, dkernel

    # dx: output position (i, j) pulls input (i+di-pad, j+dj-pad), so scatter
    # dy @ W[di, dj].T back with the opposite shift.
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=dy.dtype)
    dyr = dyf.reshape(n, h, w, cout)
    for di in range(k):
        for dj in range(k):
            contrib = dyr @ kernel[di, dj].T
            dxp[:, di : di + h, dj : dj + w, :] += contrib
    dx = dxp[:, pad : pad + h, pad : pad + w, :]
    return dx, dkernel


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Per-channel affine + moving statistics for one batch-norm layer.

    Normalization divides by (std + epsilon), not sqrt(var + epsilon); the
    epsilon sits next to the standard deviation.
    """

    def __init__(self, gamma, beta, moving_mean, moving_var,
                 epsilon=BN_EPSILON, momentum=BN_MOMENTUM):
        self.gamma = gamma
        self.beta = beta
        self.moving_mean = moving_mean
        self.moving_var = moving_var
        self.epsilon = epsilon
        self.momentum = momentum


def batchnorm_forward(x, state, mode):
    """Normalize NHWC ``x`` per channel.

    mode "train": batch statistics over (N, H, W); returns them in the cache
    tail as ``(batch_mean, batch_var)`` so the caller decides whether to fold
    them into the moving stats (frozen layers must not be touched).
    mode "infer": moving statistics, no batch interaction.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm expects NHWC input, got shape {x.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("train-mode batchnorm needs batch size >= 2")
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        batch_stats = (mean, var)
    elif mode == "infer":
        mean = state.moving_mean
        var = state.moving_var
        batch_stats = None
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    std = np.sqrt(var)
    inv = 1.0 / (std + state.epsilon)
    u = x - mean
    xhat = u * inv
    y = state.gamma * xhat + state.beta
    cache = (mode, u, std, inv, state.gamma)
    return y.astype(x.dtype, copy=False), cache, batch_stats


def batchnorm_backward(dy, cache):
    """Gradients (dx, dgamma, dbeta) for batchnorm_forward.

    In train mode the batch statistics depend on x, which yields
        dx = gamma*inv * (g - mean(g)) - gamma*inv^2 * u * mean(g*u) / std
    with per-channel means over (N, H, W); the 1/std factor comes from
    differentiating std rather than var because epsilon is added to std.
    """
    mode, u, std, inv, gamma = cache
    xhat = u * inv
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dbeta = dy.sum(axis=(0, 1, 2))
    if mode == "infer":
        dx = dy * (gamma * inv)
        return dx, dgamma, dbeta
    g = dy * gamma
    gm = g.mean(axis=(0, 1, 2))
    gum = (g * u).mean(axis=(0, 1, 2))
    # guard the 1/std only where the batch was exactly constant; there u == 0
    # so the second term vanishes anyway
    safe = np.where(std > 0, std, 1.0)
    dx = inv * (g - gm) - (inv * inv) * u * (gum / safe)
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# relu


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    # subgradient 0 at the kink
    return dy * mask


# ---------------------------------------------------------------------------
# max pooling, 3x3 window, stride 2, same-style padding


def _pool_geometry(size):
    out = (size + 1) // 2
    pad_total = max((out - 1) * 2 + 3 - size, 0)
    return out, pad_total // 2, pad_total


def maxpool_forward(x):
    """3x3/stride-2 max pool with same-style padding, pad value -inf.

    Output spatial size is ceil(size / 2). Ties take the first maximum in
    row-major window order, and the backward routes gradient only there.
    """
    n, h, w, c = x.shape
    if h < 3 or w < 3:
        raise ValueError(f"maxpool needs spatial dims >= 3, got {h}x{w}")
    oh, ph, pht = _pool_geometry(h)
    ow, pw, pwt = _pool_geometry(w)
    xp = np.pad(
        x,
        ((0, 0), (ph, pht - ph), (pw, pwt - pw), (0, 0)),
        constant_values=-np.inf,
    )
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
    flat = win.reshape(n, oh, ow, c, 9)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (arg, x.shape, (ph, pw), xp.shape)
    return y.astype(x.dtype, copy=False), cache


def maxpool_backward(dy, cache):
    arg, x_shape, (ph, pw), xp_shape = cache
    n, h, w, c = x_shape
    _, hp, wp, _ = xp_shape
    oh, ow = dy.shape[1], dy.shape[2]
    ni, oi, oj, ci = np.indices((n, oh, ow, c), sparse=False)
    hi = oi * 2 + arg // 3
    wj = oj * 2 + arg % 3
    dxp = np.zeros((n, hp, wp, c), dtype=dy.dtype)
    flat_idx = ((ni * hp + hi) * wp + wj) * c + ci
    np.add.at(dxp.reshape(-1), flat_idx.ravel(), dy.ravel())
    return dxp[:, ph : ph + h, pw : pw + w, :]


# ---------------------------------------------------------------------------
# global average pool and dense head


def global_avgpool_forward(x):
    n, h, w, c = x.shape
    return x.mean(axis=(1, 2)), (h, w)


def global_avgpool_backward(dy, cache):
    h, w = cache
    return (dy / (h * w))[:, None, None, :] * np.ones((1, h, w, 1), dtype=dy.dtype)


def dense_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: input {x.shape} vs weight {weight.shape}")
    return x @ weight + bias, (x, weight)


def dense_backward(dy, cache):
    x, weight = cache
    dx = dy @ weight.T
    dweight = x.T @ dy
    dbias = dy.sum(axis=0)
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# multi-label sigmoid cross-entropy


def sigmoid(z):
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def multilabel_bce(logits, labels):
    """Mean sigmoid cross-entropy over batch x classes.

    Returns ``(loss, dlogits)``; the gradient is already divided by the
    element count so it feeds the backward pass directly. Loss is computed
    in float64 via the log1p(exp(-|z|)) form, which never overflows.
    """
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    lab = np.asarray(labels, dtype=np.float64)
    if not np.all((lab == 0.0) | (lab == 1.0)):
        raise ValueError("labels must be binary (0/1)")
    z = np.asarray(logits, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * lab + np.log1p(np.exp(-np.abs(z)))
    dlogits = (sigmoid(z) - lab) / z.size
    return float(loss.mean()), dlogits.astype(logits.dtype, copy=False)
