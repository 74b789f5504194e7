"""Recurrent context controller and the feed-forward feature encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor, get_default_dtype, parameter

BETA_INIT = 10.0
GAMMA_SHIFT = 1.0
# softplus(x) == 1 at x = log(e - 1); keeps the learned metric near identity at init
METRIC_BIAS_INIT = float(np.log(np.expm1(1.0)))


def uniform_init(rng, fan_in, shape, scale=1.0):
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


def variance_init(rng, fan_in, shape, gain=1.0):
    """Uniform init with output variance ``gain**2 / fan_in`` per input unit."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Encoder:
    """Affine + ReLU stack standing in for a CNN embedding; identity passes through.

    Weights are initialised to roughly preserve the input norm, so squared
    distances start on the same scale as in feature space.
    """

    def __init__(self, in_dim, out_dim, hidden=(64,), identity=False, rng=None, prefix="encoder"):
        self.in_dim = in_dim
        self.out_dim = in_dim if identity else out_dim
        self.identity = identity
        self.params = {}
        self.names = []
        if identity:
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [in_dim, *hidden, out_dim]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            gain = np.sqrt(2.0) if i < len(dims) - 2 else 1.0  # ReLU layers keep the scale
            w = parameter(variance_init(rng, a, (a, b), gain), f"{prefix}.w{i}")
            bb = parameter(np.zeros(b), f"{prefix}.b{i}")
            self.params[w.name] = w
            self.params[bb.name] = bb
            self.names.append((w.name, bb.name))

    def __call__(self, x):
        x = ops._const(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"encoder expects input dim {self.in_dim}, got {x.shape[-1]}")
        if self.identity:
            return x
        n = len(self.names)
        for i, (wn, bn) in enumerate(self.names):
            x = ops.add(ops.matmul(x, self.params[wn]), self.params[bn])
            if i < n - 1:
                x = ops.relu(x)
        return x


def encode(encoder: Encoder, x_raw):
    return encoder(x_raw)


class LSTM:
    """Single LSTM layer; gate order (input, forget, output, candidate)."""

    def __init__(self, in_dim, hidden, rng=None, prefix="lstm", forget_bias=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden = in_dim, hidden
        fan = in_dim + hidden
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        self.w_x = parameter(uniform_init(rng, fan, (in_dim, 4 * hidden)), f"{prefix}.w_x")
        self.w_h = parameter(uniform_init(rng, fan, (hidden, 4 * hidden)), f"{prefix}.w_h")
        self.b = parameter(b, f"{prefix}.b")
        self.params = {p.name: p for p in (self.w_x, self.w_h, self.b)}

    def initial_state(self, batch):
        z = np.zeros((batch, self.hidden), dtype=get_default_dtype())
        return Tensor(z), Tensor(z.copy())

    def step(self, x, state):
        h, c = state
        h_new, c_new = ops.lstm_cell(x, h, c, self.w_x, self.w_h, self.b)
        return h_new, (h_new, c_new)


def lstm_step(lstm: LSTM, x, state):
    return lstm.step(x, state)


@dataclass
class Control:
    """Per-step memory control: metric scaling plus read/write thresholds."""

    m: Tensor | None
    beta_r: Tensor
    gamma_r: Tensor
    beta_w: Tensor
    gamma_w: Tensor


class ScalarControl:
    """Control parameters learned as plain scalars (no recurrent prediction)."""

    def __init__(self, prefix="control"):
        self.beta_r = parameter(BETA_INIT, f"{prefix}.beta_r")
        self.gamma_r_raw = parameter(0.0, f"{prefix}.gamma_r_raw")
        self.beta_w = parameter(BETA_INIT, f"{prefix}.beta_w")
        self.gamma_w_raw = parameter(0.0, f"{prefix}.gamma_w_raw")
        self.params = {p.name: p for p in
                       (self.beta_r, self.gamma_r_raw, self.beta_w, self.gamma_w_raw)}

    def __call__(self, m=None):
        return Control(
            m=m,
            beta_r=self.beta_r,
            gamma_r=ops.softplus(ops.affine(self.gamma_r_raw, 1.0, GAMMA_SHIFT)),
            beta_w=self.beta_w,
            gamma_w=ops.softplus(ops.affine(self.gamma_w_raw, 1.0, GAMMA_SHIFT)),
        )


class ControlHead:
    """One affine map from the LSTM output to context vector and control values.

    Output layout: ``[h_rnn (dim) | m_raw (dim) | beta_r, gamma_r_raw, beta_w,
    gamma_w_raw]``; blocks disabled by ablation flags are left out.
    """

    def __init__(self, hidden, dim, rng=None, prefix="head", context_vector=True,
                 metric=True, thresholds=True, init_scale=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.context_vector = context_vector
        self.metric = metric
        self.thresholds = thresholds
        width = (dim if context_vector else 0) + (dim if metric else 0) + (4 if thresholds else 0)
        self.width = width
        b = np.zeros(width)
        off = 0
        if context_vector:
            off += dim
        if metric:
            b[off:off + dim] = METRIC_BIAS_INIT
            off += dim
        if thresholds:
            b[off] = BETA_INIT
            b[off + 2] = BETA_INIT
        self.w = parameter(uniform_init(rng, hidden, (hidden, width), init_scale), f"{prefix}.w")
        self.b = parameter(b, f"{prefix}.b")
        self.params = {self.w.name: self.w, self.b.name: self.b}
        self.scalars = None if thresholds else ScalarControl()
        if self.scalars is not None:
            self.params.update(self.scalars.params)

    def __call__(self, out):
        z = ops.add(ops.matmul(out, self.w), self.b) if self.width else None
        off = 0
        h_rnn = m = None
        if self.context_vector:
            h_rnn = ops.index(z, (slice(None), slice(0, self.dim)))
            off = self.dim
        if self.metric:
            m = ops.softplus(ops.index(z, (slice(None), slice(off, off + self.dim))))
            off += self.dim
        if self.scalars is not None:
            return h_rnn, self.scalars(m)
        t = ops.index(z, (slice(None), slice(off, off + 4)))
        gam = ops.softplus(ops.affine(ops.index(t, (slice(None), slice(1, 4, 2))), 1.0, GAMMA_SHIFT))
        return h_rnn, Control(
            m=m,
            beta_r=ops.index(t, (slice(None), 0)),
            gamma_r=ops.index(gam, (slice(None), 0)),
            beta_w=ops.index(t, (slice(None), 2)),
            gamma_w=ops.index(gam, (slice(None), 1)),
        )


def control_step(head: ControlHead, lstm_output):
    return head(lstm_output)


def contextualize(h_cnn, h_rnn):
    """Context vector as an additive bias on the embedding."""
    if h_rnn is None:
        return h_cnn
    return ops.add(h_cnn, h_rnn)
