"""The fixed differentiable operation set used by the expert-mixture model.

Every op computes its forward value with numpy and registers a closed-form
backward rule via :func:`amel.autodiff.apply_op`. Shapes are validated up
front and failures raise :class:`ShapeMismatchError` naming the offending
dimension.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, apply_op
from .errors import ShapeMismatchError, UninitializedStatsError


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, "shape", a.shape, b.shape)


# ---------------------------------------------------------------------------
# Elementwise / structural plumbing
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return apply_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return apply_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return apply_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return apply_op(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    return apply_op(
        a.data.sum(dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g, dtype=dtype),),
    )


_relu_margin: Optional[list] = None


def track_relu_margin():
    """Context recording the distance of the closest relu input to zero.

    Finite-difference harnesses use this to confirm the check point sits a
    safe margin away from the kink set, where central differences are valid.
    """
    from contextlib import contextmanager

    @contextmanager
    def tracker():
        global _relu_margin
        prev = _relu_margin
        _relu_margin = [np.inf]
        try:
            yield _relu_margin
        finally:
            _relu_margin = prev

    return tracker()


def relu(a: Tensor) -> Tensor:
    if _relu_margin is not None and a.data.size:
        m = float(np.abs(a.data).min())
        if m < _relu_margin[0]:
            _relu_margin[0] = m
    mask = a.data > 0
    return apply_op(np.where(mask, a.data, a.data.dtype.type(0)), (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """2-D matrix product; ``transpose_b`` computes ``a @ b.T``."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError("matmul", "ndim", 2, (a.data.ndim, b.data.ndim))
    inner_b = b.shape[1] if transpose_b else b.shape[0]
    if a.shape[1] != inner_b:
        raise ShapeMismatchError("matmul", "inner", a.shape[1], inner_b)
    ad, bd = a.data, b.data
    if transpose_b:
        out = ad @ bd.T
        return apply_op(out, (a, b), lambda g: (g @ bd, g.T @ ad))
    out = ad @ bd
    return apply_op(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for ``x`` of shape [B, Cin]."""
    if x.data.ndim != 2:
        raise ShapeMismatchError("linear", "input ndim", 2, x.data.ndim)
    if w.shape[0] != x.shape[1]:
        raise ShapeMismatchError("linear", "in_features", x.shape[1], w.shape[0])
    if b.shape != (w.shape[1],):
        raise ShapeMismatchError("linear", "bias", (w.shape[1],), b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd + b.data
    return apply_op(out, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeMismatchError("global_avg_pool", "ndim", 4, x.data.ndim)
    B, C, H, W = x.shape
    inv = x.data.dtype.type(1.0 / (H * W))

    def rule(g):
        return (np.broadcast_to(g[:, :, None, None], (B, C, H, W)) * inv,)

    return apply_op(x.data.mean(axis=(2, 3)), (x,), rule)


def concat_batch(tensors: Sequence[Tensor]) -> Tensor:
    """Stack K same-shaped [B, ...] tensors into [K*B, ...], domain-major.

    Row ``k*B + i`` of the output is row ``i`` of input ``k``; slicing those
    rows back out recovers the input bit-exactly.
    """
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatchError("concat_batch", "inputs", ">=1", 0)
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeMismatchError("concat_batch", "member shape", first, t.shape)
    B = first[0]

    def rule(g):
        return tuple(g[k * B : (k + 1) * B] for k in range(len(tensors)))

    return apply_op(np.concatenate([t.data for t in tensors], axis=0), tensors, rule)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """[B, C, H, W] -> [B, C, H*f, W*f] by pixel repetition."""
    if x.data.ndim != 4:
        raise ShapeMismatchError("upsample_nearest", "ndim", 4, x.data.ndim)
    if factor == 1:
        return apply_op(x.data.copy(), (x,), lambda g: (g,))
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def rule(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return apply_op(out, (x,), rule)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _conv_geometry(x: Tensor, kernel: Tensor, bias: Tensor, padding: int, stride: int):
    if x.data.ndim != 4:
        raise ShapeMismatchError("conv2d", "input ndim", 4, x.data.ndim)
    if kernel.data.ndim != 4:
        raise ShapeMismatchError("conv2d", "kernel ndim", 4, kernel.data.ndim)
    B, Cin, H, W = x.shape
    Cout, Ck, kh, kw = kernel.shape
    if Ck != Cin:
        raise ShapeMismatchError("conv2d", "kernel input channels", Cin, Ck)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError("conv2d", "kernel extent (odd required)", "odd", (kh, kw))
    if bias.shape != (Cout,):
        raise ShapeMismatchError("conv2d", "bias", (Cout,), bias.shape)
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeMismatchError("conv2d", "output spatial extent", ">=1", (Ho, Wo))
    return B, Cin, H, W, Cout, kh, kw, Ho, Wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw] kernels.

    Same padding (``padding == (k-1)//2``, stride 1) preserves the spatial
    extent; stride 2 is used for backbone downsampling. Implemented with
    im2col so the hot loop is a batched matmul.
    """
    B, Cin, H, W, Cout, kh, kw, Ho, Wo = _conv_geometry(x, kernel, bias, padding, stride)
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols6 = np.empty((B, Cin, kh, kw, Ho, Wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols6[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols6.reshape(B, Cin * kh * kw, Ho * Wo)
    w2 = kernel.data.reshape(Cout, Cin * kh * kw)
    out = np.matmul(w2, cols) + bias.data[None, :, None]

    def rule(g):
        gm = g.reshape(B, Cout, Ho * Wo)
        db = g.sum(axis=(0, 2, 3))
        dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        dcols = np.matmul(w2.T, gm).reshape(B, Cin, kh, kw, Ho, Wo)
        dxp = np.zeros((B, Cin, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, i, j]
        if padding:
            dx = dxp[:, :, padding : padding + H, padding : padding + W]
        else:
            dx = dxp
        return (dx, dw, db)

    return apply_op(out.reshape(B, Cout, Ho, Wo), (x, kernel, bias), rule)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def instance_norm(x: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance per (sample, channel) slice; no learned affine.

    Uses biased variance plus ``epsilon``, which also guards constant slices.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError("instance_norm", "ndim", 4, x.data.ndim)
    dtype = x.data.dtype
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + dtype.type(epsilon))
    y = (x.data - mean) * inv_std

    def rule(g):
        g_mean = g.mean(axis=(2, 3), keepdims=True)
        gy_mean = (g * y).mean(axis=(2, 3), keepdims=True)
        return ((g - g_mean - y * gy_mean) * inv_std,)

    return apply_op(y, (x,), rule)


class BatchNormState:
    """Running statistics for one batch-norm layer.

    ``updates_seen`` counts train-mode forwards; eval mode before the first
    update (and without explicit seeding) is an error.
    """

    def __init__(self, channels: int, momentum: float = 0.9, epsilon: float = 1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        if epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.zeros(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon
        self.updates_seen = 0

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def seed(self, mean: np.ndarray, var: np.ndarray) -> None:
        """Explicitly initialize running statistics for eval-mode use."""
        if np.any(np.asarray(var) < 0):
            raise ValueError("running variance entries must be non-negative")
        self.running_mean = np.asarray(mean, dtype=self.running_mean.dtype).copy()
        self.running_var = np.asarray(var, dtype=self.running_var.dtype).copy()
        self.updates_seen = max(self.updates_seen, 1)

    def snapshot(self) -> tuple:
        return (self.running_mean.copy(), self.running_var.copy(), self.updates_seen)

    def restore(self, snap: tuple) -> None:
        self.running_mean, self.running_var, self.updates_seen = (
            snap[0].copy(),
            snap[1].copy(),
            snap[2],
        )


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel batch normalization over [B, C, H, W].

    Train mode normalizes by batch statistics and folds them into the running
    averages; eval mode reads (never writes) the running statistics and is an
    affine map of the input, so it stays differentiable w.r.t. input, gamma
    and beta.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError("batch_norm", "ndim", 4, x.data.ndim)
    B, C, H, W = x.shape
    if gamma.shape != (C,):
        raise ShapeMismatchError("batch_norm", "gamma", (C,), gamma.shape)
    if beta.shape != (C,):
        raise ShapeMismatchError("batch_norm", "beta", (C,), beta.shape)
    if state.channels != C:
        raise ShapeMismatchError("batch_norm", "state channels", C, state.channels)
    dtype = x.data.dtype
    eps = dtype.type(state.epsilon)
    gd = gamma.data[None, :, None, None]

    if mode == "train":
        n = B * H * W
        if n < 2:
            raise ShapeMismatchError("batch_norm", "train-mode elements per channel", ">=2", n)
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        if state.updates_seen == 0:
            state.running_mean = mean.astype(state.running_mean.dtype)
            state.running_var = var.astype(state.running_var.dtype)
        else:
            state.running_mean = (m * state.running_mean + (1.0 - m) * mean).astype(
                state.running_mean.dtype
            )
            state.running_var = (m * state.running_var + (1.0 - m) * var).astype(
                state.running_var.dtype
            )
        state.updates_seen += 1
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gd * xhat + beta.data[None, :, None, None]

        def rule(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
            gx_mean = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = gd * inv_std[None, :, None, None] * (g - g_mean - xhat * gx_mean)
            return (dx, dgamma, dbeta)

        return apply_op(y, (x, gamma, beta), rule)

    if mode == "eval":
        if state.updates_seen == 0:
            raise UninitializedStatsError()
        inv_std = (1.0 / np.sqrt(state.running_var.astype(dtype) + eps))[None, :, None, None]
        xhat = (x.data - state.running_mean.astype(dtype)[None, :, None, None]) * inv_std
        y = gd * xhat + beta.data[None, :, None, None]

        def rule(g):
            return (
                g * gd * inv_std,
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return apply_op(y, (x, gamma, beta), rule)

    raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# Attention-style aggregation primitives
# ---------------------------------------------------------------------------


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax restricted to the unmasked support.

    Masked positions are exactly zero in the output; the max subtraction for
    numerical stability is taken over the unmasked entries only. No
    temperature or 1/sqrt(C) scaling is applied to the scores.
    """
    if scores.data.ndim != 2:
        raise ShapeMismatchError("masked_softmax", "ndim", 2, scores.data.ndim)
    m = np.asarray(mask, dtype=bool)
    if m.shape != scores.shape:
        raise ShapeMismatchError("masked_softmax", "mask", scores.shape, m.shape)
    if not m.any(axis=1).all():
        raise ValueError("masked_softmax: every row must have at least one unmasked entry")
    dtype = scores.data.dtype
    neg_inf = np.array(-np.inf, dtype=dtype)
    row_max = np.where(m, scores.data, neg_inf).max(axis=1, keepdims=True)
    e = np.where(m, np.exp(scores.data - row_max), dtype.type(0))
    w = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (w * (g - (g * w).sum(axis=1, keepdims=True)),)

    return apply_op(w, (scores,), rule)


def expert_mask(batch: int, num_experts: int) -> np.ndarray:
    """Binary mask of shape [B, K*B] pairing row i with columns k*B + i."""
    m = np.zeros((batch, num_experts * batch), dtype=bool)
    rows = np.arange(batch)
    for k in range(num_experts):
        m[rows, k * batch + rows] = True
    return m


def take_expert_weights(weights: Tensor, num_experts: int) -> Tensor:
    """Gather per-sample expert weights: out[i, k] = weights[i, k*B + i]."""
    B, KB = weights.shape
    if KB != num_experts * B:
        raise ShapeMismatchError("take_expert_weights", "columns", num_experts * B, KB)
    rows = np.arange(B)
    cols = np.stack([k * B + rows for k in range(num_experts)], axis=1)  # [B, K]
    out = weights.data[rows[:, None], cols]

    def rule(g):
        dw = np.zeros((B, KB), dtype=g.dtype)
        dw[rows[:, None], cols] = g
        return (dw,)

    return apply_op(out, (weights,), rule)


def weighted_expert_sum(weights: Tensor, feats: Sequence[Tensor]) -> Tensor:
    """Per-sample convex combination: out[i] = sum_k weights[i,k] * feats[k][i]."""
    feats = list(feats)
    B, K = weights.shape
    if K != len(feats):
        raise ShapeMismatchError("weighted_expert_sum", "expert count", len(feats), K)
    shape = feats[0].shape
    for f in feats:
        if f.shape != shape:
            raise ShapeMismatchError("weighted_expert_sum", "feature shape", shape, f.shape)
    if shape[0] != B:
        raise ShapeMismatchError("weighted_expert_sum", "batch", B, shape[0])
    fdata = [f.data for f in feats]
    wd = weights.data
    extra_axes = tuple(range(1, len(shape)))
    out = np.zeros(shape, dtype=wd.dtype)
    for k in range(K):
        out += wd[:, k].reshape((B,) + (1,) * (len(shape) - 1)) * fdata[k]

    def rule(g):
        dw = np.stack([(g * fdata[k]).sum(axis=extra_axes) for k in range(K)], axis=1)
        dfeats = tuple(g * wd[:, k].reshape((B,) + (1,) * (len(shape) - 1)) for k in range(K))
        return (dw,) + dfeats

    return apply_op(out, [weights] + feats, rule)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over [B, C] logits (max-subtracted)."""
    if x.data.ndim != 2:
        raise ShapeMismatchError("log_softmax", "ndim", 2, x.data.ndim)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(ls)

    def rule(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return apply_op(ls, (x,), rule)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Plain numpy row softmax, used on detached logits when scoring."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
