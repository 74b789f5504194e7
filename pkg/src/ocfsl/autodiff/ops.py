"""Differentiable primitives.

Elementwise binary ops broadcast numpy-style and reduce gradients back to
each operand's shape. Fused slot/LSTM ops dispatch to :mod:`.kernels`.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, SparseGrad, Tensor, as_tensor, get_default_dtype, make


def _const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_default_dtype()))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = _const(a)
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def affine(a, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """``scale * a + shift`` for python scalars."""
    a = _const(a)
    return make(a.data * scale + shift, (a,), lambda g: (g * scale,), "affine")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _const(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# ----------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = _const(a)
    s = _sigmoid(a.data)
    return make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = _const(a)
    t = np.tanh(a.data)
    return make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def softplus(a) -> Tensor:
    a = _const(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def relu(a) -> Tensor:
    a = _const(a)
    pos = a.data > 0
    return make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    a = _const(a)
    e = np.exp(a.data)
    return make(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = _const(a)
    x = a.data
    return make(np.log(x), (a,), lambda g: (g / x,), "log")


# ----------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """``a (..., n) @ b (n, m)``."""
    a, b = _const(a), _const(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make(ad @ bd, (a, b), back, "matmul")


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = _const(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = _const(a)
    n = a.size if axis is None else a.shape[axis]
    return affine(sum(a, axis=axis), 1.0 / n)


def dot(a, b) -> Tensor:
    """Inner product along the last axis."""
    a, b = _const(a), _const(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} do not conform")
    return sum(mul(a, b), axis=-1)


def sqdiff(a, b) -> Tensor:
    """Sum of squared differences along the last axis."""
    a, b = _const(a), _const(b)
    shape = _check_broadcast("sqdiff", a, b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"sqdiff: shapes {a.shape} and {b.shape} do not conform")
    diff = a.data - b.data

    def back(g):
        gd = 2.0 * g[..., None] * diff
        return (_unbroadcast(gd, a.shape) if a.requires_grad else None,
                _unbroadcast(-gd, b.shape) if b.requires_grad else None)

    del shape
    return make(np.einsum("...d,...d->...", diff, diff), (a, b), back, "sqdiff")


def l2norm(a) -> Tensor:
    a = _const(a)
    x = a.data
    n = np.sqrt(np.einsum("...d,...d->...", x, x))
    safe = np.where(n > 0, n, 1.0)

    def back(g):
        return (g[..., None] * x / safe[..., None],)

    return make(n, (a,), back, "l2norm")


def masked_min(a, mask=None) -> Tensor:
    """Minimum over the last axis restricted to ``mask``.

    The gradient goes to a single argmin (lowest index on ties). Rows with
    an empty mask yield 0 and pass no gradient.
    """
    a = _const(a)
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    filled = np.where(mask, x, np.inf)
    idx = np.argmin(filled, axis=-1)
    any_ = mask.any(axis=-1)
    val = np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]
    val = np.where(any_, val, 0.0).astype(x.dtype)

    def back(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx[..., None], (g * any_)[..., None], axis=-1)
        return (gx,)

    out = make(val, (a,), back, "masked_min")
    return out


def log_softmax(a, mask=None) -> Tensor:
    """Log-softmax over the last axis; masked entries get -inf-like zeros.

    Masked-out positions carry log-probability 0 in the output (they are
    never read) and receive no gradient. Fully masked rows are all zero.
    """
    a = _const(a)
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    shifted = np.where(mask, x, -np.inf)
    mx = shifted.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x - mx, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    s_safe = np.where(s > 0, s, 1.0)
    out = np.where(mask, x - mx - np.log(s_safe), 0.0)
    p = e / s_safe

    def back(g):
        gm = np.where(mask, g, 0.0)
        return (gm - p * gm.sum(axis=-1, keepdims=True),)

    return make(out.astype(x.dtype), (a,), back, "log_softmax")


def softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis with max-subtraction; masked entries are 0."""
    a = _const(a)
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    shifted = np.where(mask, x, -np.inf)
    mx = shifted.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x - mx, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make(p.astype(x.dtype), (a,), back, "softmax")


# ----------------------------------------------------------------------------
# structure


def concat(tensors, axis=-1) -> Tensor:
    ts = tuple(_const(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make(out, ts, back, "concat")


def stack(tensors, axis=0) -> Tensor:
    ts = tuple(_const(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: shapes {[t.shape for t in ts]} do not conform") from None

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return make(out, ts, back, "stack")


def _is_basic(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
               for i in idx)


def index(a, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter back (adding on repeats)."""
    a = _const(a)
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic(idx)

    def back(g):
        if basic:
            return (SparseGrad(idx, g),)
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return make(a.data[idx], (a,), back, "index")


def reshape(a, shape) -> Tensor:
    a = _const(a)
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant mask ``cond`` holds, else ``b``."""
    a, b = _const(a), _const(b)
    cond = np.asarray(cond, dtype=bool)

    def back(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None,
                _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None)

    return make(np.where(cond, a.data, b.data), (a, b), back, "where")


# ----------------------------------------------------------------------------
# fused ops backed by compiled kernels when available


def slot_sqdist(h, protos, metric=None) -> Tensor:
    """Scaled squared distance from each query row to each slot.

    ``h``: (B, D); ``protos``: (B, K, D); ``metric``: (B, D) or None.
    Returns (B, K) with ``sum_d m_d (h_d - p_kd)^2``.
    """
    h, protos = _const(h), _const(protos)
    if protos.ndim != 3 or h.ndim != 2 or h.shape[0] != protos.shape[0] \
            or h.shape[1] != protos.shape[2]:
        raise ShapeError(f"slot_sqdist: shapes {h.shape} and {protos.shape} do not conform")
    if metric is None:
        out = kernels.slot_sqdist_fwd(h.data, protos.data, None)

        def back(g):
            gh, gp, _ = kernels.slot_sqdist_bwd(g, h.data, protos.data, None)
            return gh, gp

        return make(out, (h, protos), back, "slot_sqdist")
    metric = _const(metric)
    if metric.shape != h.shape:
        raise ShapeError(f"slot_sqdist: metric {metric.shape} vs query {h.shape}")
    out = kernels.slot_sqdist_fwd(h.data, protos.data, metric.data)

    def back_m(g):
        return kernels.slot_sqdist_bwd(g, h.data, protos.data, metric.data)

    return make(out, (h, protos, metric), back_m, "slot_sqdist")


def slot_cosine(q, protos) -> Tensor:
    """Cosine similarity from each query row to each slot; zero norms give -1."""
    q, protos = _const(q), _const(protos)
    if protos.ndim != 3 or q.ndim != 2 or q.shape[1] != protos.shape[2]:
        raise ShapeError(f"slot_cosine: shapes {q.shape} and {protos.shape} do not conform")
    out = kernels.slot_cosine_fwd(q.data, protos.data)

    def back(g):
        return kernels.slot_cosine_bwd(g, q.data, protos.data)

    return make(out, (q, protos), back, "slot_cosine")


def proto_update(protos, h, w) -> Tensor:
    """``P + w[..., None] * (h[:, None, :] - P)``: a per-slot convex step."""
    protos, h, w = _const(protos), _const(h), _const(w)
    if w.shape != protos.shape[:2] or h.shape != (protos.shape[0], protos.shape[2]):
        raise ShapeError(
            f"proto_update: shapes {protos.shape}, {h.shape}, {w.shape} do not conform")
    out = kernels.proto_update_fwd(protos.data, h.data, w.data)

    def back(g):
        return kernels.proto_update_bwd(g, protos.data, h.data, w.data)

    return make(out, (protos, h, w), back, "proto_update")


def lstm_cell(x, h, c, w_x, w_h, b):
    """One LSTM step; gate column order is (input, forget, output, candidate).

    Returns ``(h_new, c_new)`` as two tensors sharing a single fused node.
    """
    x, h, c, w_x, w_h, b = (_const(t) for t in (x, h, c, w_x, w_h, b))
    hid = h.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * hid) or w_h.shape != (hid, 4 * hid) \
            or b.shape != (4 * hid,) or c.shape != h.shape:
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape}, "
            f"w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}")
    pre = x.data @ w_x.data + h.data @ w_h.data + b.data
    hc, cache = kernels.lstm_gates_fwd(pre, c.data)
    xd, hd, wxd, whd = x.data, h.data, w_x.data, w_h.data

    def back(g):
        gh_new, gc_new = g[:, :hid], g[:, hid:]
        gpre, gc = kernels.lstm_gates_bwd(gh_new, gc_new, cache, c.data)
        gx = gpre @ wxd.T if x.requires_grad else None
        gh = gpre @ whd.T if h.requires_grad else None
        gwx = xd.T @ gpre if w_x.requires_grad else None
        gwh = hd.T @ gpre if w_h.requires_grad else None
        return gx, gh, gc, gwx, gwh, gpre.sum(axis=0)

    both = make(hc, (x, h, c, w_x, w_h, b), back, "lstm_cell")
    return index(both, (slice(None), slice(0, hid))), index(both, (slice(None), slice(hid, None)))


def segment_min(d, segments, n_segments, mask) -> Tensor:
    """Per-segment minimum over the last axis.

    ``d``: (..., N) values; ``segments``: int array (..., N) of segment ids;
    entries with ``mask`` false are ignored. Returns (..., n_segments);
    empty segments yield 0 with no gradient.
    """
    d = _const(d)
    x = d.data
    seg = np.asarray(segments)
    member = (seg[..., None, :] == np.arange(n_segments)[:, None]) & mask[..., None, :]
    filled = np.where(member, x[..., None, :], np.inf)
    idx = np.argmin(filled, axis=-1)
    any_ = member.any(axis=-1)
    val = np.take_along_axis(x, idx, axis=-1)
    val = np.where(any_, val, 0.0).astype(x.dtype)

    def back(g):
        gx = np.zeros_like(x)
        lead = np.indices(idx.shape)[:-1]
        np.add.at(gx, (*lead, idx), g * any_)
        return (gx,)

    return make(val, (d,), back, "segment_min")


def scalar(value) -> Tensor:
    return as_tensor(np.asarray(value, dtype=get_default_dtype()))
