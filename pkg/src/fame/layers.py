"""Parameterized layers: conv + batch-norm blocks, linear maps, (Bi)LSTM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ConvSpec:
    cin: int
    cout: int
    k: int = 3


@dataclass(frozen=True)
class LinearSpec:
    din: int
    dout: int


@dataclass(frozen=True)
class LstmSpec:
    din: int
    hidden: int


@dataclass(frozen=True)
class BatchNormSpec:
    channels: int


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class ConvBlock:
    """3x3 convolution (pad 1) followed by batch-norm and ReLU."""

    weight: Tensor
    bias: Tensor
    bn: BatchNorm


@dataclass
class LinearParams:
    weight: Tensor  # (dout, din)
    bias: Tensor


@dataclass
class LstmParams:
    """One direction.  Gate order along the 4H axis: input, forget, cell, output."""

    w_ih: Tensor  # (4H, din)
    w_hh: Tensor  # (4H, H)
    bias: Tensor  # (4H,)

    @property
    def hidden(self):
        return self.w_hh.shape[1]


@dataclass
class BiLstmParams:
    fwd: LstmParams
    bwd: LstmParams


def uniform_bound(fan_in):
    return math.sqrt(6.0 / fan_in)


def _param(arr, name, dtype):
    return Tensor(arr.astype(dtype), requires_grad=True, name=name)


def init_params(spec, rng, name="", dtype=np.float64):
    """Deterministically initialize the parameters described by ``spec``.

    Conv and linear weights are drawn from U(-b, b) with ``b = sqrt(6/fan_in)``;
    biases start at zero.  Batch-norm starts as the identity (gamma 1, beta 0,
    running mean 0, running variance 1).  LSTM weights use the symmetric
    Glorot bound ``sqrt(6/(fan_in + 4H))`` and the forget-gate bias is 1.
    """
    if isinstance(spec, ConvSpec):
        b = uniform_bound(spec.cin * spec.k * spec.k)
        w = rng.uniform(-b, b, size=(spec.cout, spec.cin, spec.k, spec.k))
        bn = init_params(BatchNormSpec(spec.cout), rng, name + ".bn", dtype)
        return ConvBlock(_param(w, name + ".weight", dtype),
                         _param(np.zeros(spec.cout), name + ".bias", dtype), bn)
    if isinstance(spec, BatchNormSpec):
        c = spec.channels
        return BatchNorm(_param(np.ones(c), name + ".gamma", dtype),
                         _param(np.zeros(c), name + ".beta", dtype),
                         np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype))
    if isinstance(spec, LinearSpec):
        b = uniform_bound(spec.din)
        w = rng.uniform(-b, b, size=(spec.dout, spec.din))
        return LinearParams(_param(w, name + ".weight", dtype),
                            _param(np.zeros(spec.dout), name + ".bias", dtype))
    if isinstance(spec, LstmSpec):
        h = spec.hidden
        b_ih = math.sqrt(6.0 / (spec.din + 4 * h))
        b_hh = math.sqrt(6.0 / (h + 4 * h))
        w_ih = rng.uniform(-b_ih, b_ih, size=(4 * h, spec.din))
        w_hh = rng.uniform(-b_hh, b_hh, size=(4 * h, h))
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0
        return LstmParams(_param(w_ih, name + ".w_ih", dtype), _param(w_hh, name + ".w_hh", dtype),
                          _param(bias, name + ".bias", dtype))
    raise TypeError(f"unsupported layer spec {spec!r}")


# ---------------------------------------------------------------------------
# Forward rules
# ---------------------------------------------------------------------------


def batchnorm_forward(x, bn, training):
    """Normalize an ``(N, C, H, W)`` batch per channel.

    In training mode batch statistics are used and the running estimates are
    updated in place with ``momentum`` (biased batch variance).
    """
    n, c, h, w = x.shape
    if c != bn.gamma.shape[0]:
        raise T.DimensionError(f"batch-norm expects {bn.gamma.shape[0]} channels, got {c}")
    if training:
        if n * h * w < 2:
            raise ValueError("batch-norm in training mode needs at least two values per channel")
        out, mu, var = T.batch_norm_train(x, bn.gamma, bn.beta, bn.eps)
        m = bn.momentum
        bn.running_mean[...] = (1 - m) * bn.running_mean + m * mu
        bn.running_var[...] = (1 - m) * bn.running_var + m * var
        return out
    scale = 1.0 / np.sqrt(bn.running_var + bn.eps)
    shift = -bn.running_mean * scale
    scale = Tensor(scale.reshape(1, c, 1, 1).astype(x.dtype))
    shift = Tensor(shift.reshape(1, c, 1, 1).astype(x.dtype))
    gamma = T.reshape(bn.gamma, (1, c, 1, 1))
    beta = T.reshape(bn.beta, (1, c, 1, 1))
    return (x * scale + shift) * gamma + beta


def conv_block_forward(x, block, training):
    y = T.conv2d(x, block.weight, block.bias, stride=1, pad=block.weight.shape[-1] // 2)
    return T.relu(batchnorm_forward(y, block.bn, training))


def linear_forward(x, p):
    if x.shape[-1] != p.weight.shape[1]:
        raise T.DimensionError(f"linear layer expects trailing dim {p.weight.shape[1]}, got {x.shape}")
    if x.ndim == 1:
        return T.reshape(T.matmul(_as_row(x), T.transpose(p.weight)) + p.bias, (p.weight.shape[0],))
    return T.matmul(x, T.transpose(p.weight)) + p.bias


def lstm_step(x_t, h, c, p, x_proj=None):
    """One LSTM step; ``x_proj`` may carry a precomputed ``x_t @ W_ih.T``."""
    hid = p.hidden
    if x_proj is None:
        x_proj = T.matmul(_as_row(x_t), T.transpose(p.w_ih))
    gates = x_proj + T.matmul(_as_row(h), T.transpose(p.w_hh)) + p.bias
    i = T.sigmoid(gates[..., 0:hid])
    f = T.sigmoid(gates[..., hid:2 * hid])
    g = T.tanh(gates[..., 2 * hid:3 * hid])
    o = T.sigmoid(gates[..., 3 * hid:4 * hid])
    c_new = f * _as_row(c) + i * g
    h_new = o * T.tanh(c_new)
    if x_t is not None and x_t.ndim == 1:
        return T.reshape(h_new, (hid,)), T.reshape(c_new, (hid,))
    return h_new, c_new


def _as_row(t):
    return T.reshape(t, (1, t.shape[0])) if t.ndim == 1 else t


def lstm_forward(seq, p, reverse=False):
    """Run one direction over ``(B, T, D)``; returns ``(B, T, H)``."""
    b, steps, _ = seq.shape
    hid = p.hidden
    proj = T.matmul(seq, T.transpose(p.w_ih))  # (B, T, 4H)
    h = Tensor(np.zeros((b, hid), dtype=seq.dtype))
    c = Tensor(np.zeros((b, hid), dtype=seq.dtype))
    outs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h, c = lstm_step(None, h, c, p, x_proj=proj[:, t, :])
        outs[t] = h
    return T.stack(outs, axis=1)


def bilstm_forward(seq, p):
    """Bidirectional LSTM with zero initial states.

    Accepts ``(T, D)`` or ``(B, T, D)`` and returns the per-step concatenation
    ``[forward ; backward]`` of width ``2H``.
    """
    single = seq.ndim == 2
    if single:
        seq = T.reshape(seq, (1,) + seq.shape)
    if seq.shape[1] < 1:
        raise ValueError("bilstm needs at least one time step")
    out = T.concat([lstm_forward(seq, p.fwd), lstm_forward(seq, p.bwd, reverse=True)], axis=-1)
    if single:
        out = T.reshape(out, out.shape[1:])
    return out


def collect(obj, prefix=""):
    """Flatten a (nested) parameter structure into ``{name: Tensor}``."""
    found = {}
    if isinstance(obj, Tensor):
        found[prefix] = obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            found.update(collect(item, f"{prefix}.{i}" if prefix else str(i)))
    elif hasattr(obj, "__dataclass_fields__"):
        for fname in obj.__dataclass_fields__:
            found.update(collect(getattr(obj, fname), f"{prefix}.{fname}" if prefix else fname))
    return found


__all__ = [
    "BatchNorm", "BatchNormSpec", "BiLstmParams", "ConvBlock", "ConvSpec", "LinearParams",
    "LinearSpec", "LstmParams", "LstmSpec", "batchnorm_forward", "bilstm_forward", "collect",
    "conv_block_forward", "init_params", "linear_forward", "lstm_forward", "lstm_step",
]
