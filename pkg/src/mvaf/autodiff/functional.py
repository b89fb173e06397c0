"""Differentiable kernels used by the network layers and losses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, make_node


# -- activations ----------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return make_node(x.data * scale, (x,), lambda g: x._accumulate(g * scale))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: x._accumulate(g * s * (1.0 - s)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return make_node(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        x._accumulate(g - s * g.sum(axis=axis, keepdims=True))

    return make_node(out, (x,), backward)


# -- dense layers -----------------------------------------------------------------
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: incompatible shapes {bias.shape} and {weight.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return make_node(out, parents, backward)


def _windows(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(N, C, out_h, out_w, k, k) strided view of a padded NCHW array."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]


def _scatter_windows(patches: np.ndarray, full_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of ``_windows``: sums (C, k, k, N, H, W) patches into NCHW."""
    c, _, _, n, h, w = patches.shape
    if stride == k and tuple(full_shape) == (n, c, h * k, w * k):
        # non-overlapping patches: a pure relayout
        return np.ascontiguousarray(patches.transpose(3, 0, 4, 1, 5, 2)).reshape(full_shape)
    full = np.zeros(full_shape, dtype=DTYPE)
    view = full.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            view[:, :, i : i + (h - 1) * stride + 1 : stride, j : j + (w - 1) * stride + 1 : stride] += patches[:, i, j]
    return full


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with (O, C, k, k) ``weight``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k = weight.shape[2]
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    o = weight.shape[0]
    win = _windows(xp, k, stride, out_h, out_w)
    # im2col, kept for the weight gradient
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * out_h * out_w, c * k * k)
    out = (cols @ weight.data.reshape(o, -1).T).reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            patches = np.tensordot(weight.data, g, axes=([0], [1]))  # C, k, k, N, Ho, Wo
            full = _scatter_windows(patches, xp.shape, k, stride)
            if padding:
                full = full[:, :, padding : padding + h, padding : padding + w]
            x._accumulate(full)

    return make_node(np.ascontiguousarray(out), parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution with (C_in, C_out, k, k) ``weight``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0] or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {x.shape} and {weight.shape}")
    n, _, h, w = x.shape
    c_out, k = weight.shape[1], weight.shape[2]
    full_h = (h - 1) * stride + k
    full_w = (w - 1) * stride + k
    if full_h - 2 * padding <= 0 or full_w - 2 * padding <= 0:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {x.shape} and {weight.shape}")
    patches = np.tensordot(weight.data, x.data, axes=([0], [1]))  # C_out, k, k, N, H, W
    full = _scatter_windows(patches, (n, c_out, full_h, full_w), k, stride)
    out = full[:, :, padding : full_h - padding, padding : full_w - padding]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        win = _windows(gfull, k, stride, h, w)  # N, C_out, H, W, k, k
        if x.requires_grad:
            x._accumulate(np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            weight._accumulate(np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return make_node(np.ascontiguousarray(out), parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> Tensor:
    """Per-channel normalization over every axis but 1.

    ``momentum`` weights the previous running statistic, so the update is
    ``running = momentum * running + (1 - momentum) * batch``.  Running
    arrays are updated in place in training mode.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: incompatible shapes {x.shape} and {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = -1
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // x.shape[1]
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx_hat = g * gamma.data.reshape(bshape)
            if training:
                m = gx_hat.mean(axis=axes, keepdims=True)
                mx = (gx_hat * xhat).mean(axis=axes, keepdims=True)
                x._accumulate((gx_hat - m - xhat * mx) * inv.reshape(bshape))
            else:
                x._accumulate(gx_hat * inv.reshape(bshape))

    return make_node(out, (x, gamma, beta), backward)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Statistics-free per-channel scale and shift (tiny-batch fallback)."""
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"channel_affine: incompatible shapes {x.shape} and {gamma.shape}")
    bshape = [1] * x.ndim
    bshape[1] = -1
    return x * gamma.reshape(bshape) + beta.reshape(bshape)


# -- point/grid kernels -------------------------------------------------------------
class Groups:
    """Precomputed segment layout for ``grouped_max``.

    ``group_of`` assigns every row to a group in ``[0, n_groups)``; every
    group must own at least one row.
    """

    def __init__(self, group_of: np.ndarray, n_groups: int):
        group_of = np.asarray(group_of, dtype=np.int64)
        self.group_of = group_of
        self.n_groups = int(n_groups)
        self.order = np.argsort(group_of, kind="stable")
        counts = np.bincount(group_of, minlength=self.n_groups)
        if np.any(counts == 0):
            raise RuntimeError("grouped_max: empty group in layout")
        self.counts = counts
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])


def grouped_max(x: Tensor, groups: Groups) -> Tensor:
    """Channel-wise max of rows sharing a group.

    The gradient goes to the first (lowest-index) maximal row of each
    group and channel.
    """
    if x.ndim != 2 or x.shape[0] != len(groups.group_of):
        raise ShapeError(f"grouped_max: incompatible shapes {x.shape} and {groups.group_of.shape}")
    c = x.shape[1]
    if groups.n_groups == 0:
        return make_node(np.zeros((0, c)), (x,), lambda g: None)
    xs = x.data[groups.order]
    pooled = np.maximum.reduceat(xs, groups.starts, axis=0)
    sorted_group = groups.group_of[groups.order]
    hit = xs == pooled[sorted_group]
    cand = np.where(hit, groups.order[:, None], np.iinfo(np.int64).max)
    arg = np.minimum.reduceat(cand, groups.starts, axis=0)
    cols = np.broadcast_to(np.arange(c), arg.shape)

    def backward(g):
        full = np.zeros_like(x.data)
        full[arg, cols] = g
        x._accumulate(full)

    return make_node(pooled, (x,), backward)


def scatter_to_grid(x: Tensor, batch: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape) -> Tensor:
    """Place row features into a zero (B, C, H, W) image at the given cells."""
    b, h, w = shape
    if x.ndim != 2 or x.shape[0] != len(rows):
        raise ShapeError(f"scatter_to_grid: incompatible shapes {x.shape} and {np.shape(rows)}")
    if len(rows) and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise RuntimeError("scatter_to_grid: pillar cell outside grid")
    c = x.shape[1]
    out = np.zeros((b, h, w, c), dtype=DTYPE)
    out[batch, rows, cols] = x.data
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        x._accumulate(g.transpose(0, 2, 3, 1)[batch, rows, cols])

    return make_node(np.ascontiguousarray(out), (x,), backward)


def bilinear_sample(fmap: Tensor, batch: np.ndarray, coords: np.ndarray, valid: np.ndarray) -> Tensor:
    """Bilinear interpolation of (B, C, H, W) ``fmap`` at (row, col) coords.

    Grid node (i, j) sits at continuous coordinate (i, j).  Rows that are
    invalid or fall outside ``[0, H-1] x [0, W-1]`` produce zeros.
    """
    if fmap.ndim != 4:
        raise ShapeError(f"bilinear_sample: incompatible shapes {fmap.shape} and {np.shape(coords)}")
    _, c, h, w = fmap.shape
    n = len(coords)
    coords = np.asarray(coords, dtype=DTYPE).reshape(n, 2)
    r, q = coords[:, 0], coords[:, 1]
    ok = np.asarray(valid, dtype=bool) & np.isfinite(r) & np.isfinite(q)
    ok &= (r >= 0) & (r <= h - 1) & (q >= 0) & (q <= w - 1)
    r = np.where(ok, r, 0.0)
    q = np.where(ok, q, 0.0)
    r0 = np.minimum(np.floor(r).astype(np.int64), max(h - 2, 0))
    q0 = np.minimum(np.floor(q).astype(np.int64), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    q1 = np.minimum(q0 + 1, w - 1)
    dr = r - r0
    dq = q - q0
    okf = ok.astype(DTYPE)
    weights = np.stack(
        [(1 - dr) * (1 - dq) * okf, (1 - dr) * dq * okf, dr * (1 - dq) * okf, dr * dq * okf], axis=1
    )
    rr = np.stack([r0, r0, r1, r1], axis=1)
    qq = np.stack([q0, q1, q0, q1], axis=1)
    bb = np.repeat(np.asarray(batch, dtype=np.int64)[:, None], 4, axis=1)
    fm = fmap.data.transpose(0, 2, 3, 1)  # B, H, W, C
    out = np.einsum("nk,nkc->nc", weights, fm[bb, rr, qq])

    def backward(g):
        acc = np.zeros(fm.shape, dtype=DTYPE)
        np.add.at(acc, (bb.ravel(), rr.ravel(), qq.ravel()), (weights[:, :, None] * g[:, None, :]).reshape(-1, c))
        fmap._accumulate(acc.transpose(0, 3, 1, 2))

    return make_node(out, (fmap,), backward)


# -- loss kernels -----------------------------------------------------------------------
def smooth_l1(residual: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 r^2/delta inside |r|<delta, |r|-delta/2 outside."""
    r = residual.data
    a = np.abs(r)
    inside = a < delta
    out = np.where(inside, 0.5 * r * r / delta, a - 0.5 * delta)
    slope = np.where(inside, r / delta, np.sign(r))
    return make_node(out, (residual,), lambda g: residual._accumulate(g * slope))


def focal_terms(p: Tensor, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0, eps: float = 1e-7) -> Tensor:
    """Elementwise binary focal loss on probabilities ``p`` against 0/1 ``y``."""
    y = np.broadcast_to(np.asarray(y, dtype=DTYPE), p.shape)
    inside = (p.data > eps) & (p.data < 1 - eps)
    q = np.clip(p.data, eps, 1 - eps)
    pos = y > 0.5
    one_m = 1.0 - q
    lp, l1p = np.log(q), np.log(one_m)
    pow_pos = one_m**gamma
    pow_neg = q**gamma
    out = np.where(pos, -alpha * pow_pos * lp, -(1 - alpha) * pow_neg * l1p)
    if gamma == 0:
        d_pos = -alpha / q
        d_neg = (1 - alpha) / one_m
    else:
        d_pos = alpha * (gamma * one_m ** (gamma - 1) * lp - pow_pos / q)
        d_neg = -(1 - alpha) * (gamma * q ** (gamma - 1) * l1p - pow_neg / one_m)
    slope = np.where(pos, d_pos, d_neg) * inside
    return make_node(out, (p,), lambda g: p._accumulate(g * slope))


def sigmoid_focal_terms(z: Tensor, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Focal terms of ``sigmoid(z)`` computed from logits, with no clamping."""
    y = np.broadcast_to(np.asarray(y, dtype=DTYPE), z.shape)
    p = _sigmoid(z.data)
    log_p = -np.logaddexp(0.0, -z.data)
    log_q = -np.logaddexp(0.0, z.data)
    q = 1.0 - p
    pos = y > 0.5
    out = np.where(pos, -alpha * q**gamma * log_p, -(1 - alpha) * p**gamma * log_q)
    d_pos = alpha * (gamma * q**gamma * p * log_p - q ** (gamma + 1))
    d_neg = -(1 - alpha) * (gamma * p**gamma * q * log_q - p ** (gamma + 1))
    slope = np.where(pos, d_pos, d_neg)
    return make_node(out, (z,), lambda g: z._accumulate(g * slope))


def cross_entropy_terms(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row softmax cross-entropy of (N, K) logits against integer targets."""
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(target):
        raise ShapeError(f"cross_entropy: incompatible shapes {logits.shape} and {target.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(target))
    out = lse - z[rows, target]
    s = np.exp(z - lse[:, None])
    s[rows, target] -= 1.0
    return make_node(out, (logits,), lambda g: logits._accumulate(g[:, None] * s))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights."""
    w = np.broadcast_to(np.asarray(weights, dtype=DTYPE), x.shape)
    return make_node(np.asarray((x.data * w).sum()), (x,), lambda g: x._accumulate(g * w))
