"""Differentiable primitives.

Image tensors use the channels-last layout ``(N, H, W, C)`` so that every
convolution reduces to plain matrix products over the channel axis.

All primitives are registered in :data:`PRIMITIVES`; :func:`apply` is the
string-keyed entry point used by tests and tooling.
"""
from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor

PRIMITIVES: dict[str, Callable[..., Tensor]] = {}


def primitive(name: str):
    def deco(fn):
        PRIMITIVES[name] = fn
        fn.primitive_name = name
        return fn

    return deco


def apply(kind: str, inputs: Sequence[Tensor], attrs: dict[str, Any] | None = None) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` with keyword attributes ``attrs``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise KeyError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **(attrs or {}))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(name: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {', '.join(map(str, shapes))}") from None


# -- elementwise arithmetic ---------------------------------------------------


@primitive("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a.shape, b.shape)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), "add", backward)


@primitive("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a.shape, b.shape)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), "sub", backward)


@primitive("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), "mul", backward)


@primitive("scale")
def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        x._accumulate(g * factor)

    return Tensor._make(x.data * factor, (x,), "scale", backward)


# -- pointwise nonlinearities -------------------------------------------------


@primitive("relu")
def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return Tensor._make(out, (x,), "relu", backward)


@primitive("leaky_relu")
def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g):
        x._accumulate(np.where(pos, g, slope * g))

    return Tensor._make(out, (x,), "leaky_relu", backward)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


@primitive("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor._make(out, (x,), "sigmoid", backward)


@primitive("tanh")
def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return Tensor._make(out, (x,), "tanh", backward)


@primitive("softplus")
def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""

    def backward(g):
        x._accumulate(g * _sigmoid(x.data))

    return Tensor._make(_softplus(x.data), (x,), "softplus", backward)


@primitive("softmax")
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (x,), "softmax", backward)


@primitive("stop_gradient")
def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; the input receives an all-zero gradient."""

    def backward(g):
        x._accumulate(np.zeros_like(g))

    return Tensor._make(x.data, (x,), "stop_gradient", backward)


def detach(x: Tensor) -> Tensor:
    """Cut the graph entirely: a fresh leaf sharing ``x``'s values."""
    return Tensor(x.data)


# -- linear algebra and reductions --------------------------------------------


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


@primitive("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ _swap(b.data), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(_swap(a.data) @ g, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), "matmul", backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


@primitive("sum")
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor._make(np.asarray(out), (x,), "sum", backward)


@primitive("mean")
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.sum(x.data, axis=axes, keepdims=keepdims) / count

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g / count, x.shape))

    return Tensor._make(np.asarray(out), (x,), "mean", backward)


# -- shape manipulation -------------------------------------------------------


@primitive("reshape")
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor._make(out, (x,), "reshape", backward)


@primitive("transpose")
def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(np.ascontiguousarray(g.transpose(inverse)))

    return Tensor._make(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose", backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


@primitive("getitem")
def getitem(x: Tensor, index) -> Tensor:
    """Slicing and integer-array gathering; the backward scatters additively."""
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"getitem: index {index!r} invalid for shape {x.shape}: {exc}") from None
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        x._accumulate(full)

    return Tensor._make(np.array(out, dtype=np.float64), (x,), "getitem", backward)


@primitive("concat")
def concat(*xs: Tensor, axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat: no inputs")
    ndim = xs[0].ndim
    ax = axis % ndim
    for t in xs:
        if t.ndim != ndim or any(t.shape[i] != xs[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return Tensor._make(np.concatenate([t.data for t in xs], axis=ax), xs, "concat", backward)


# -- convolutional primitives (channels-last) ---------------------------------


def _check_image(name: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected (N, H, W, C) input, got shape {x.shape}")


_COLS_BUDGET = 1 << 22  # doubles per im2col chunk (32 MiB)


def _batch_chunks(n: int, per_sample: int) -> list[tuple[int, int]]:
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    return [(a, min(a + step, n)) for a in range(0, n, step)]


def _cols(xp: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    return v.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * xp.shape[3])


def _correlate(xp: np.ndarray, w: np.ndarray, s: int) -> np.ndarray:
    """Valid cross-correlation of a pre-padded NHWC array with (kh, kw, Cin, Cout)."""
    kh, kw, cin, cout = w.shape
    n, hp, wp, _ = xp.shape
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    if kh == 1 and kw == 1 and s == 1:
        return (xp.reshape(-1, cin) @ w[0, 0]).reshape(n, ho, wo, cout)
    w2 = w.reshape(kh * kw * cin, cout)
    out = np.empty((n, ho * wo, cout))
    for lo, hi in _batch_chunks(n, ho * wo * kh * kw * cin):
        out[lo:hi] = (_cols(xp[lo:hi], kh, kw, s) @ w2).reshape(hi - lo, ho * wo, cout)
    return out.reshape(n, ho, wo, cout)


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (p, p), (p, p), (0, 0))) if p else a


@primitive("conv2d")
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (N, H, W, Cin); ``weight``: (kh, kw, Cin, Cout).

    im2col over batch chunks so the column buffer stays bounded; chunks are
    visited in a fixed order, so results are bit-reproducible. For stride 1
    the input gradient is itself a correlation (of the upstream gradient
    with the flipped, transposed kernel).
    """
    _check_image("conv2d", x)
    if weight.ndim != 4 or weight.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    kh, kw, cin, cout = weight.shape
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    n, h, w, _ = x.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {x.shape} with padding {p}")

    out = _correlate(_pad(x.data, p), weight.data, s)
    if bias is not None:
        out += bias.data

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, cout).sum(axis=0))
        if weight.requires_grad:
            xp = _pad(x.data, p)
            if kh == 1 and kw == 1 and s == 1:
                gw = xp.reshape(-1, cin).T @ g.reshape(-1, cout)
            else:
                gw = np.zeros((kh * kw * cin, cout))
                rows = ho * wo
                g2 = g.reshape(n, rows, cout)
                for lo, hi in _batch_chunks(n, rows * kh * kw * cin):
                    gw += _cols(xp[lo:hi], kh, kw, s).T @ g2[lo:hi].reshape(-1, cout)
            weight._accumulate(gw.reshape(weight.shape))
        if not x.requires_grad:
            return
        if s == 1 and p <= kh - 1 and p <= kw - 1 and kh == kw:
            flipped = np.ascontiguousarray(weight.data[::-1, ::-1].transpose(0, 1, 3, 2))
            gx = _correlate(_pad(g, kh - 1 - p), flipped, 1)
            x._accumulate(gx[:, :h, :w, :])
            return
        # strided case: scatter the column gradients back (col2im)
        w2 = weight.data.reshape(kh * kw * cin, cout)
        gxp = np.zeros((n, h + 2 * p, w + 2 * p, cin))
        rows = ho * wo
        g2 = g.reshape(n, rows, cout)
        for lo, hi in _batch_chunks(n, rows * kh * kw * cin):
            dcols = (g2[lo:hi].reshape(-1, cout) @ w2.T).reshape(hi - lo, ho, wo, kh, kw, cin)
            sub = gxp[lo:hi]
            for a in range(kh):
                for b in range(kw):
                    sub[:, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, a, b, :]
        x._accumulate(gxp[:, p : p + h, p : p + w, :])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, "conv2d", backward)


@primitive("upsample_nearest")
def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    _check_image("upsample_nearest", x)
    f = int(factor)
    n, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (n, h, f, w, f, c)).reshape(n, h * f, w * f, c)

    def backward(g):
        x._accumulate(g.reshape(n, h, f, w, f, c).sum(axis=(2, 4)))

    return Tensor._make(out, (x,), "upsample_nearest", backward)


@primitive("maxpool2d")
def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    _check_image("maxpool2d", x)
    k = int(size)
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial dims of {x.shape} not divisible by {k}")
    blocks = x.data.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // k, w // k, c, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, h // k, w // k, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        x._accumulate(gx)

    return Tensor._make(out, (x,), "maxpool2d", backward)


@primitive("batch_norm")
def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    training: bool = True,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    eps: float = 1e-5,
    stats: dict | None = None,
) -> Tensor:
    """Normalize over every axis but the last (channel) axis.

    In training mode the batch statistics are used and, if ``stats`` is a
    dict, written into it as ``mean``/``var`` (biased) for the caller's
    running averages. In eval mode the running statistics are used and the
    op is a fixed affine map.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match input {x.shape}")
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    if training:
        if m < 2:
            raise ShapeError(f"batch_norm: training mode needs more than one value per channel, got {x.shape}")
        mu = x2.sum(axis=0) / m
        xhat = x2 - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        if stats is not None:
            stats["mean"], stats["var"], stats["count"] = mu, var, m
    else:
        if running_mean is None or running_var is None:
            raise ShapeError("batch_norm: eval mode needs running statistics")
        mu, var = running_mean, running_var
        xhat = x2 - mu
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, c)
        if gamma.requires_grad:
            gamma._accumulate(np.einsum("ij,ij->j", g2, xhat))
        if beta.requires_grad:
            beta._accumulate(g2.sum(axis=0))
        if not x.requires_grad:
            return
        gx = g2 * gamma.data
        if training:
            s1 = gx.sum(axis=0) / m
            s2 = np.einsum("ij,ij->j", gx, xhat) / m
            gx -= xhat * s2
            gx -= s1
        gx *= inv_std
        x._accumulate(gx.reshape(x.shape))

    return Tensor._make(out, (x, gamma, beta), "batch_norm", backward)


# -- memory selection ---------------------------------------------------------


def topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries along the last axis.

    Entries tied with the k-th largest value are admitted in ascending index
    order, so selection is total and reproducible.
    """
    n = values.shape[-1]
    if k >= n:
        return np.ones(values.shape, dtype=bool)
    kth = np.partition(values, n - k, axis=-1)[..., n - k : n - k + 1]
    mask = values > kth
    tied = values == kth
    room = k - mask.sum(axis=-1, keepdims=True)
    mask |= tied & (np.cumsum(tied, axis=-1) <= room)
    return mask


@primitive("gumbel_shrinkage")
def gumbel_shrinkage(
    scores: Tensor, k: int, temperature: float = 1.0, noise: np.ndarray | None = None
) -> Tensor:
    """Top-k softmax forward, full-softmax backward (straight-through).

    Forward: softmax over the ``k`` largest entries of
    ``(scores + noise) / temperature`` along the last axis; all other
    weights are exactly zero. Backward: the Jacobian of the ordinary softmax
    over all entries, so every item receives gradient.
    """
    k = int(k)
    n = scores.shape[-1]
    if k <= 0:
        raise ValueError(f"gumbel_shrinkage: top-k must be positive, got {k}")
    if k > n:
        raise ShapeError(f"gumbel_shrinkage: top-k {k} exceeds {n} candidates")
    if temperature <= 0:
        raise ValueError(f"gumbel_shrinkage: temperature must be positive, got {temperature}")
    logits = scores.data if noise is None else scores.data + noise
    logits = logits / temperature
    mask = topk_mask(logits, k)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    full = e / e.sum(axis=-1, keepdims=True)
    if k == n:
        out = full
    else:
        em = np.where(mask, e, 0.0)
        out = em / em.sum(axis=-1, keepdims=True)

    def backward(g):
        scores._accumulate(full * (g - (g * full).sum(axis=-1, keepdims=True)) / temperature)

    return Tensor._make(out, (scores,), "gumbel_shrinkage", backward)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))
