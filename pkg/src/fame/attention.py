"""Spatial and temporal attention.

The spatial mask pools a feature map across channels (mean and max), feeds
each pixel's 2-vector through a small shared MLP and squashes with a sigmoid.

Two temporal mechanisms are provided:

* ``gate`` -- per-frame, per-dimension sigmoid gate over a layer-normalized
  projection of the BiLSTM states; frame features are averaged with the gate
  as weights (:func:`aggregate_gated`).
* ``softmax`` -- scalar score per frame, softmax over time, weighted sum of
  the BiLSTM states (:func:`aggregate_softmax`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import uniform_bound
from .tensor import Tensor

GATE_FLOOR = 1e-8


@dataclass
class SpatialAttnParams:
    w1: Tensor  # (hidden, 2)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (1, hidden)
    b2: Tensor  # (1,)


@dataclass
class TemporalGateParams:
    """Parameters of whichever temporal mode is configured; the other stays ``None``."""

    mode: str
    w_a: Tensor | None = None  # (D, H_d)
    b_a: Tensor | None = None  # (D,)
    ln_gamma: Tensor | None = None
    ln_beta: Tensor | None = None
    v: Tensor | None = None  # (H_d,)
    w_h: Tensor | None = None  # (H_d, H_d)
    b: Tensor | None = None  # (H_d,)


def _p(arr, name, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)


def init_spatial(rng, hidden=8, dtype=np.float64, name="spatial"):
    b1 = uniform_bound(2)
    b2 = uniform_bound(hidden)
    return SpatialAttnParams(
        _p(rng.uniform(-b1, b1, size=(hidden, 2)), name + ".w1", dtype),
        _p(np.zeros(hidden), name + ".b1", dtype),
        _p(rng.uniform(-b2, b2, size=(1, hidden)), name + ".w2", dtype),
        _p(np.zeros(1), name + ".b2", dtype),
    )


def init_temporal(rng, mode, feat_dim, state_dim, dtype=np.float64, name="temporal"):
    if mode == "gate":
        b = uniform_bound(state_dim)
        return TemporalGateParams(
            "gate",
            w_a=_p(rng.uniform(-b, b, size=(feat_dim, state_dim)), name + ".w_a", dtype),
            b_a=_p(np.zeros(feat_dim), name + ".b_a", dtype),
            ln_gamma=_p(np.ones(feat_dim), name + ".ln_gamma", dtype),
            ln_beta=_p(np.zeros(feat_dim), name + ".ln_beta", dtype),
        )
    if mode == "softmax":
        b = uniform_bound(state_dim)
        return TemporalGateParams(
            "softmax",
            v=_p(rng.uniform(-b, b, size=state_dim), name + ".v", dtype),
            w_h=_p(rng.uniform(-b, b, size=(state_dim, state_dim)), name + ".w_h", dtype),
            b=_p(np.zeros(state_dim), name + ".b", dtype),
        )
    raise ValueError(f"unknown temporal mode {mode!r}")


# ---------------------------------------------------------------------------
# Spatial
# ---------------------------------------------------------------------------


def spatial_mask(feat, p):
    """Mask in (0, 1) for a ``(C, H, W)`` map or an ``(N, C, H, W)`` batch."""
    single = feat.ndim == 3
    if single:
        feat = T.reshape(feat, (1,) + feat.shape)
    pooled = T.concat([T.mean(feat, axis=1, keepdims=True), T.amax(feat, axis=1, keepdims=True)], axis=1)
    hidden = p.w1.shape[0]
    h = T.relu(T.conv2d(pooled, T.reshape(p.w1, (hidden, 2, 1, 1)), p.b1))
    mask = T.sigmoid(T.conv2d(h, T.reshape(p.w2, (1, hidden, 1, 1)), p.b2))
    if single:
        mask = T.reshape(mask, mask.shape[1:])
    return mask


def apply_spatial(feat, mask):
    if feat.shape[-2:] != mask.shape[-2:]:
        raise T.DimensionError(f"mask {mask.shape} does not match feature map {feat.shape}")
    return feat * mask


# ---------------------------------------------------------------------------
# Temporal
# ---------------------------------------------------------------------------


def _require(p, mode):
    if p.mode != mode:
        raise ValueError(f"temporal parameters are configured for {p.mode!r}, not {mode!r}")


def temporal_gate(states, p, eps=1e-5):
    """``sigmoid(LayerNorm(states @ W_a.T + b_a))``: ``(..., T, H_d) -> (..., T, D)``."""
    _require(p, "gate")
    proj = T.matmul(states, T.transpose(p.w_a)) + p.b_a
    return T.sigmoid(T.layer_norm(proj, p.ln_gamma, p.ln_beta, eps))


def temporal_softmax_weights(states, p):
    """Scores ``v . tanh(W_h h_t + b)`` normalized over time: ``(..., T, H_d) -> (..., T)``."""
    _require(p, "softmax")
    hidden = T.tanh(T.matmul(states, T.transpose(p.w_h)) + p.b)
    scores = T.matmul(hidden, T.reshape(p.v, (p.v.shape[0], 1)))
    scores = T.reshape(scores, scores.shape[:-1])
    return T.softmax(scores, axis=-1)


def aggregate_gated(feats, gate):
    """Per-dimension weighted mean over time: ``sum_t A*R / max(sum_t A, floor)``."""
    if feats.shape != gate.shape:
        raise T.DimensionError(f"features {feats.shape} and gate {gate.shape} differ")
    num = T.tsum(gate * feats, axis=-2)
    den = T.tsum(gate, axis=-2)
    floored = Tensor(np.maximum(den.data, GATE_FLOOR) - den.data, dtype=den.dtype)
    return num / (den + floored)


def aggregate_softmax(states, alpha):
    """``z = sum_t alpha_t h_t``."""
    w = T.reshape(alpha, alpha.shape + (1,))
    return T.tsum(w * states, axis=-2)
