"""Finite-difference verification of the whole network on the toy configuration."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import build_model, forward_batch, hybrid_loss, toy_config

TOLERANCE = 1e-4
EPS = 1e-5
# conv biases feeding batch-norm have an exactly-zero gradient under batch
# statistics; their difference quotients are pure roundoff and are bounded absolutely
ZERO_GRAD_ABS_TOL = 1e-9


@dataclass
class GradcheckResult:
    mode: str
    bn_training: bool
    max_rel_error: float
    max_abs_zero_grad: float
    coords: int
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error <= TOLERANCE and self.max_abs_zero_grad <= ZERO_GRAD_ABS_TOL


def model_gradcheck(mode="gate", bn_training=False, seed=0, batch=4, eps=EPS, max_coords=64, **cfg_overrides):
    """Check d(hybrid loss)/d(every parameter) against central differences.

    With ``bn_training=False`` the running statistics are first set from the
    probe batch and then jittered, so the eval-mode normalization is a
    realistic but non-trivial affine map.
    """
    cfg = toy_config(temporal_mode=mode, **cfg_overrides)
    m = build_model(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    # per-frame contrast and offset make frames differ after pooling; with near-identical
    # frames the temporal path carries ~1e-8 gradients that roundoff swamps at eps=1e-5
    shape = (batch, cfg.frames, cfg.channels, cfg.image_size, cfg.image_size)
    gain = rng.uniform(0.25, 2.0, size=(batch, cfg.frames, 1, 1, 1))
    offset = rng.uniform(-0.5, 0.5, size=(batch, cfg.frames, 1, 1, 1))
    x = rng.uniform(-1.0, 1.0, size=shape) * gain + offset
    labels = rng.integers(0, cfg.num_classes, size=batch)
    if not bn_training:
        # running statistics calibrated on the probe batch, then jittered
        for bn in m.batchnorms().values():
            bn.momentum = 1.0
        with T.no_record():
            forward_batch(m, x, training=True)
        for bn in m.batchnorms().values():
            bn.momentum = 0.1
            bn.running_mean[...] += rng.normal(0.0, 0.05, bn.running_mean.shape) * np.sqrt(bn.running_var)
            bn.running_var[...] *= rng.uniform(0.8, 1.25, bn.running_var.shape)
    params = m.parameters()
    zero_grad = {n for n in params if bn_training and n.startswith("backbone.") and n.endswith(".bias")}
    checked = [p for n, p in params.items() if n not in zero_grad]

    def loss():
        saved = {k: v.copy() for k, v in m.buffers().items()}
        out = forward_batch(m, x, training=bn_training)
        for k, v in m.buffers().items():
            v[...] = saved[k]
        return hybrid_loss(out, labels, cfg)

    start = time.perf_counter()
    report = []
    err = T.finite_diff_check(loss, checked, eps=eps, max_coords=max_coords, seed=seed, report=report)
    worst_abs = 0.0
    for name in sorted(zero_grad):
        p = params[name]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss().data)
            flat[i] = orig - eps
            fm = float(loss().data)
            flat[i] = orig
            worst_abs = max(worst_abs, abs(fp - fm) / (2 * eps))
    return GradcheckResult(mode, bn_training, err, worst_abs, len(report), time.perf_counter() - start)


def run_suite(seed=0):
    """Both temporal modes, both batch-norm modes."""
    return [model_gradcheck(mode, bn_training, seed)
            for mode in ("gate", "softmax") for bn_training in (False, True)]
