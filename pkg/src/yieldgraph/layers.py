"""Neural building blocks: 1-D conv encoders, recurrent cells, dense layers.

Two encoders digest one county-year of raw features into a fixed-width
embedding: a four-block conv/relu/avg-pool stack over the 52-week axis for
the weather + land-surface channels, and a three-conv stack (no pooling)
over the 6 soil depth levels. The embedding is their concatenation plus
the scalar extras passed through verbatim.

All parameters initialize uniform(-a, a), a = sqrt(1/fan_in), from the
caller's seeded generator.
"""

from __future__ import annotations

import math

import numpy as np

from yieldgraph.autodiff import (
    ShapeError,
    Tensor,
    add_rowvec,
    apply_op,
    concat,
    matmul,
    narrow,
)

WEATHER_CHANNELS = 7
LAND_CHANNELS = 16
SOIL_CHANNELS = 20
SOIL_DEPTHS = 6
N_EXTRAS = 7
WEEKS = 52


def uniform_param(rng, shape, fan_in):
    a = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def conv1d(x, weight, bias):
    """Valid (no padding) cross-correlation.

    x: [batch, ch_in, length]; weight: [ch_out, ch_in, k]; bias: [ch_out]
    -> [batch, ch_out, length - k + 1]
    """
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d needs [B,C,L] and [O,C,K], got {x.shape}, {weight.shape}")
    batch, ch_in, length = x.data.shape
    ch_out, w_in, k = weight.data.shape
    if w_in != ch_in:
        raise ShapeError(f"conv1d channels differ: input {ch_in}, kernel {w_in}")
    if length < k:
        raise ShapeError(f"conv1d input length {length} shorter than kernel {k}")
    out_len = length - k + 1

    # im2col: [B, C, L', K] -> [B*L', C*K]
    cols = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(batch * out_len, ch_in * k)
    wmat = weight.data.reshape(ch_out, ch_in * k)
    out = (cols @ wmat.T + bias.data[None, :]).reshape(batch, out_len, ch_out)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(batch * out_len, ch_out)
        dw = (gmat.T @ cols).reshape(ch_out, ch_in, k)
        db = gmat.sum(axis=0)
        dcols = (gmat @ wmat).reshape(batch, out_len, ch_in, k)
        dx = np.zeros_like(x.data)
        for j in range(k):
            dx[:, :, j : j + out_len] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dx, dw, db

    return apply_op(out, (x, weight, bias), vjp)


def avg_pool1d(x, window=2):
    """Non-overlapping average pooling along the last axis; the trailing
    remainder is dropped."""
    if x.data.ndim != 3:
        raise ShapeError(f"avg_pool1d needs [B,C,L], got {x.shape}")
    length = x.data.shape[2]
    if length < window:
        raise ShapeError(f"avg_pool1d length {length} shorter than window {window}")
    n_out = length // window
    keep = n_out * window
    batch, ch, _ = x.data.shape
    out = x.data[:, :, :keep].reshape(batch, ch, n_out, window).mean(axis=3)

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[:, :, :keep] = np.repeat(g / window, window, axis=2)
        return (dx,)

    return apply_op(out, (x,), vjp)


def dropout(x, p, training, rng):
    """Unit dropout: zero with probability p and scale survivors by 1/(1-p)
    during training; identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return x * Tensor(mask)


class Dense:
    """Affine map x @ W.T + b with W: [out, in]."""

    def __init__(self, in_dim, out_dim, rng):
        self.weight = uniform_param(rng, (out_dim, in_dim), in_dim)
        self.bias = uniform_param(rng, (out_dim,), in_dim)

    def __call__(self, x):
        return add_rowvec(matmul(x, self.weight.transpose()), self.bias)

    def parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class _ConvBlock:
    def __init__(self, in_ch, out_ch, kernel, rng):
        fan_in = in_ch * kernel
        self.weight = uniform_param(rng, (out_ch, in_ch, kernel), fan_in)
        self.bias = uniform_param(rng, (out_ch,), fan_in)

    def __call__(self, x):
        return conv1d(x, self.weight, self.bias).relu()

    def parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class WeeklyEncoder:
    """Four conv/relu/avg-pool blocks over the week axis, flattened into a
    linear projection. Input channels are the stacked weather and
    land-surface series."""

    def __init__(self, rng, in_channels=WEATHER_CHANNELS + LAND_CHANNELS,
                 channels=(32, 64, 96, 128), kernels=(7, 3, 3, 3),
                 out_dim=64, weeks=WEEKS, pool_window=2):
        if len(channels) != 4 or len(kernels) != 4:
            raise ValueError("weekly encoder is fixed at four pooled conv blocks")
        self.in_channels = in_channels
        self.weeks = weeks
        self.out_dim = out_dim
        self.pool_window = pool_window
        self.blocks = []
        length = weeks
        prev = in_channels
        for ch, k in zip(channels, kernels):
            self.blocks.append(_ConvBlock(prev, ch, k, rng))
            length = (length - k + 1) // pool_window
            if length < 1:
                raise ValueError(f"week axis exhausted; shorten kernels {kernels}")
            prev = ch
        self.flat_dim = prev * length
        self.project = Dense(self.flat_dim, out_dim, rng)

    def __call__(self, x):
        """x: [B, in_channels, weeks] -> [B, out_dim]"""
        if x.data.ndim != 3 or x.data.shape[1:] != (self.in_channels, self.weeks):
            raise ShapeError(
                f"weekly encoder expects [B,{self.in_channels},{self.weeks}], got {x.shape}"
            )
        for block in self.blocks:
            x = avg_pool1d(block(x), self.pool_window)
        return self.project(x.reshape((x.data.shape[0], self.flat_dim)))

    def encode(self, weather, land):
        """weather: [B,7,52], land: [B,16,52] -> [B, out_dim]"""
        if weather.data.shape[1] != WEATHER_CHANNELS or land.data.shape[1] != LAND_CHANNELS:
            raise ShapeError(
                f"expected {WEATHER_CHANNELS} weather and {LAND_CHANNELS} land channels, "
                f"got {weather.shape} and {land.shape}"
            )
        return self(concat([weather, land], axis=1))

    def parameters(self, prefix):
        params = {}
        for i, block in enumerate(self.blocks):
            params.update(block.parameters(f"{prefix}.conv{i}"))
        params.update(self.project.parameters(f"{prefix}.project"))
        return params


class SoilEncoder:
    """Three conv/relu blocks (no pooling) across the soil depth axis,
    flattened into a linear projection."""

    def __init__(self, rng, in_channels=SOIL_CHANNELS, channels=(24, 28, 32),
                 kernel=2, out_dim=32, depths=SOIL_DEPTHS):
        if len(channels) != 3:
            raise ValueError("soil encoder is fixed at three conv blocks")
        self.in_channels = in_channels
        self.depths = depths
        self.out_dim = out_dim
        self.blocks = []
        length = depths
        prev = in_channels
        for ch in channels:
            self.blocks.append(_ConvBlock(prev, ch, kernel, rng))
            length = length - kernel + 1
            if length < 1:
                raise ValueError("depth axis exhausted")
            prev = ch
        self.flat_dim = prev * length
        self.project = Dense(self.flat_dim, out_dim, rng)

    def __call__(self, x):
        """x: [B, in_channels, depths] -> [B, out_dim]"""
        if x.data.ndim != 3 or x.data.shape[1:] != (self.in_channels, self.depths):
            raise ShapeError(
                f"soil encoder expects [B,{self.in_channels},{self.depths}], got {x.shape}"
            )
        for block in self.blocks:
            x = block(x)
        return self.project(x.reshape((x.data.shape[0], self.flat_dim)))

    def parameters(self, prefix):
        params = {}
        for i, block in enumerate(self.blocks):
            params.update(block.parameters(f"{prefix}.conv{i}"))
        params.update(self.project.parameters(f"{prefix}.project"))
        return params


class YearEmbedder:
    """One county-year -> fixed-width embedding: (weekly encoding, soil
    encoding, extras verbatim)."""

    def __init__(self, rng, weekly: WeeklyEncoder | None = None,
                 soil: SoilEncoder | None = None):
        self.weekly = weekly if weekly is not None else WeeklyEncoder(rng)
        self.soil = soil if soil is not None else SoilEncoder(rng)
        self.out_dim = self.weekly.out_dim + self.soil.out_dim + N_EXTRAS

    def embed(self, weather, land, soil, extras):
        """[B,7,52], [B,16,52], [B,20,6], [B,7] -> [B, out_dim]"""
        if extras.data.ndim != 2 or extras.data.shape[1] != N_EXTRAS:
            raise ShapeError(f"expected [B,{N_EXTRAS}] extras, got {extras.shape}")
        return concat([self.weekly.encode(weather, land), self.soil(soil), extras], axis=1)

    def parameters(self, prefix):
        params = self.weekly.parameters(f"{prefix}.weekly")
        params.update(self.soil.parameters(f"{prefix}.soil"))
        return params


class RecurrentCell:
    """Standard LSTM or GRU cell; hidden state is [batch, hidden_size].

    LSTM forget-gate bias initializes to 1.0.
    """

    def __init__(self, kind, input_size, hidden_size=64, rng=None):
        if kind not in ("lstm", "gru"):
            raise ValueError(f"unknown recurrent kind {kind!r}")
        self.kind = kind
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        gates = 4 * h if kind == "lstm" else 3 * h
        self.w_x = uniform_param(rng, (gates, input_size), input_size)
        self.w_h = uniform_param(rng, (gates, h), h)
        self.b_x = uniform_param(rng, (gates,), h)
        self.b_h = uniform_param(rng, (gates,), h)
        if kind == "lstm":
            self.b_x.data[h : 2 * h] = 1.0  # forget gate opens at init

    def zero_state(self, batch):
        h = Tensor(np.zeros((batch, self.hidden_size)))
        if self.kind == "lstm":
            return h, Tensor(np.zeros((batch, self.hidden_size)))
        return (h,)

    def step(self, x, state):
        h = self.hidden_size
        zx = add_rowvec(matmul(x, self.w_x.transpose()), self.b_x)
        zh = add_rowvec(matmul(state[0], self.w_h.transpose()), self.b_h)
        if self.kind == "lstm":
            z = zx + zh
            i = narrow(z, 1, 0, h).sigmoid()
            f = narrow(z, 1, h, h).sigmoid()
            g = narrow(z, 1, 2 * h, h).tanh()
            o = narrow(z, 1, 3 * h, h).sigmoid()
            c_new = f * state[1] + i * g
            return o * c_new.tanh(), c_new
        r = (narrow(zx, 1, 0, h) + narrow(zh, 1, 0, h)).sigmoid()
        u = (narrow(zx, 1, h, h) + narrow(zh, 1, h, h)).sigmoid()
        n = (narrow(zx, 1, 2 * h, h) + r * narrow(zh, 1, 2 * h, h)).tanh()
        ones = Tensor(np.ones((x.data.shape[0], h)))
        return ((ones - u) * n + u * state[0],)

    def parameters(self, prefix):
        return {
            f"{prefix}.w_x": self.w_x,
            f"{prefix}.w_h": self.w_h,
            f"{prefix}.b_x": self.b_x,
            f"{prefix}.b_h": self.b_h,
        }


def rnn_forward(cell, sequence):
    """Run a cell over a list of [B, d] tensors from zero state; return the
    final hidden state."""
    if not sequence:
        raise ValueError("rnn_forward needs a non-empty sequence")
    widths = {t.data.shape[1] for t in sequence}
    if len(widths) != 1:
        raise ShapeError(f"sequence steps disagree on width: {sorted(widths)}")
    state = cell.zero_state(sequence[0].data.shape[0])
    for x in sequence:
        state = cell.step(x, state)
    return state[0]
