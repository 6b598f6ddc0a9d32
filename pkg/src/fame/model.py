"""The attribution network: VGG-style backbone, spatial mask, BiLSTM, temporal
attention, clip head and per-frame auxiliary head.

Data flow for a clip of ``T`` frames::

    frames -> conv stages (conv3x3+BN+ReLU, maxpool after each stage) -> F
    F -> spatial mask M -> F * M -> ReLU -> BN -> global average -> R  (T x D)
    R -> BiLSTM -> H  (T x 2*hidden)
    gate mode:    A = sigmoid(LN(H W_a^T + b_a));  z = sum_t A*R / sum_t A
    softmax mode: alpha = softmax_t(v . tanh(W_h h_t + b));  z = sum_t alpha_t h_t
    none:         z = mean_t H
    clip logits = FC(dropout(z));  frame logits = FC_aux(R_t)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from . import layers as L
from . import tensor as T
from .tensor import Tensor

VGG19_STAGES = ((64, 64), (128, 128), (256, 256, 256, 256))
TEMPORAL_MODES = ("gate", "softmax", "none")


class ConfigError(ValueError):
    pass


@dataclass
class FameConfig:
    image_size: int = 112
    channels: int = 3
    frames: int = 10
    stages: tuple = VGG19_STAGES
    lstm_hidden: int = 96
    temporal_mode: str = "gate"
    spatial_attention: bool = True
    spatial_hidden: int = 8
    num_classes: int = 5
    dropout: float = 0.0
    alpha: float = 0.5
    beta: float = 0.5
    precision: str = "float64"

    def __post_init__(self):
        self.stages = tuple(tuple(int(c) for c in s) for s in self.stages)
        self.validate()

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError("loss weights need alpha >= 0, beta >= 0 and alpha + beta > 0")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ConfigError(f"temporal_mode must be one of {TEMPORAL_MODES}")
        if not self.stages or any(len(s) == 0 for s in self.stages):
            raise ConfigError("every backbone stage needs at least one conv")
        if self.image_size % (2 ** len(self.stages)) or self.image_size < 2 ** len(self.stages):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2**{len(self.stages)}")
        if self.lstm_hidden < 1 or self.spatial_hidden < 1 or self.channels < 1:
            raise ConfigError("layer widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision must be float64 or float32")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def feat_dim(self):
        return self.stages[-1][-1]

    @property
    def state_dim(self):
        return 2 * self.lstm_hidden

    @property
    def clip_dim(self):
        return self.feat_dim if self.temporal_mode == "gate" else self.state_dim

    @property
    def feat_size(self):
        return self.image_size // 2 ** len(self.stages)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def toy_config(**overrides):
    """Small configuration used by the gradient checks."""
    base = dict(image_size=16, stages=((8, 8), (16, 16)), lstm_hidden=4, frames=3, num_classes=2)
    base.update(overrides)
    return FameConfig(**base)


@dataclass
class FameModel:
    config: FameConfig
    blocks: list  # list of stages, each a list of ConvBlock
    spatial: A.SpatialAttnParams | None
    condense_bn: L.BatchNorm
    lstm: L.BiLstmParams
    temporal: A.TemporalGateParams | None
    clip_head: L.LinearParams
    frame_head: L.LinearParams
    seed: int = 0

    def parameters(self):
        """Learnable tensors by name, in a fixed order."""
        out = {}
        for si, stage in enumerate(self.blocks):
            for bi, block in enumerate(stage):
                prefix = f"backbone.{si}.{bi}"
                out[f"{prefix}.weight"] = block.weight
                out[f"{prefix}.bias"] = block.bias
                out[f"{prefix}.bn.gamma"] = block.bn.gamma
                out[f"{prefix}.bn.beta"] = block.bn.beta
        if self.spatial is not None:
            out.update(L.collect(self.spatial, "spatial"))
        out["condense_bn.gamma"] = self.condense_bn.gamma
        out["condense_bn.beta"] = self.condense_bn.beta
        out.update(L.collect(self.lstm, "lstm"))
        if self.temporal is not None:
            out.update({k: v for k, v in L.collect(self.temporal, "temporal").items()})
        out.update(L.collect(self.clip_head, "clip_head"))
        out.update(L.collect(self.frame_head, "frame_head"))
        return out

    def batchnorms(self):
        out = {}
        for si, stage in enumerate(self.blocks):
            for bi, block in enumerate(stage):
                out[f"backbone.{si}.{bi}.bn"] = block.bn
        out["condense_bn"] = self.condense_bn
        return out

    def buffers(self):
        """Batch-norm running statistics by name (not learnable)."""
        out = {}
        for name, bn in self.batchnorms().items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


def build_model(cfg, seed=0):
    """Initialize every parameter deterministically from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    blocks = []
    cin = cfg.channels
    for si, stage in enumerate(cfg.stages):
        stage_blocks = []
        for bi, cout in enumerate(stage):
            stage_blocks.append(L.init_params(L.ConvSpec(cin, cout, 3), rng, f"backbone.{si}.{bi}", dt))
            cin = cout
        blocks.append(stage_blocks)
    d = cfg.feat_dim
    spatial = A.init_spatial(rng, cfg.spatial_hidden, dt) if cfg.spatial_attention else None
    condense = L.init_params(L.BatchNormSpec(d), rng, "condense_bn", dt)
    lstm = L.BiLstmParams(L.init_params(L.LstmSpec(d, cfg.lstm_hidden), rng, "lstm.fwd", dt),
                          L.init_params(L.LstmSpec(d, cfg.lstm_hidden), rng, "lstm.bwd", dt))
    temporal = None
    if cfg.temporal_mode != "none":
        temporal = A.init_temporal(rng, cfg.temporal_mode, d, cfg.state_dim, dt)
    clip_head = L.init_params(L.LinearSpec(cfg.clip_dim, cfg.num_classes), rng, "clip_head", dt)
    frame_head = L.init_params(L.LinearSpec(d, cfg.num_classes), rng, "frame_head", dt)
    return FameModel(cfg, blocks, spatial, condense, lstm, temporal, clip_head, frame_head, seed)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    clip_logits: Tensor  # (B, K)
    frame_logits: Tensor  # (B, T, K)
    diagnostics: dict = field(default_factory=dict)


def _as_frames(m, frames):
    cfg = m.config
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise T.DimensionError(f"expected (B, T, C, H, W) frames, got shape {arr.shape}")
    b, t, c, h, w = arr.shape
    if c != cfg.channels or h != cfg.image_size or w != cfg.image_size:
        raise T.DimensionError(
            f"frames {c}x{h}x{w} do not match config {cfg.channels}x{cfg.image_size}x{cfg.image_size}")
    if arr.dtype != cfg.dtype:
        raise T.DimensionError(f"frames are {arr.dtype}, model runs in {cfg.precision}")
    return arr


def backbone_forward(m, x, training):
    """Conv stages on an ``(N, C, H, W)`` batch; returns the final activation map."""
    for stage in m.blocks:
        for block in stage:
            x = L.conv_block_forward(x, block, training)
        x = T.pool2d(x, "max", 2, 2)
    return x


def head_forward(m, feat, batch, steps, training, rng=None):
    """Everything after the backbone, from ``(B*T, D, h, w)`` features."""
    cfg = m.config
    diag = {}
    if m.spatial is not None:
        mask = A.spatial_mask(feat, m.spatial)
        feat = A.apply_spatial(feat, mask)
        diag["spatial_mask"] = mask
    cond = L.batchnorm_forward(T.relu(feat), m.condense_bn, training)
    r = T.reshape(T.global_avg_pool(cond), (batch, steps, cfg.feat_dim))
    states = L.bilstm_forward(r, m.lstm)
    if cfg.temporal_mode == "gate":
        gate = A.temporal_gate(states, m.temporal)
        z = A.aggregate_gated(r, gate)
        diag["temporal"] = gate
    elif cfg.temporal_mode == "softmax":
        alpha = A.temporal_softmax_weights(states, m.temporal)
        z = A.aggregate_softmax(states, alpha)
        diag["temporal"] = alpha
    else:
        z = T.mean(states, axis=1)
    diag["z"] = z
    diag["frame_features"] = r
    if training and cfg.dropout > 0:
        z = T.dropout(z, cfg.dropout, rng if rng is not None else np.random.default_rng(0))
    clip_logits = L.linear_forward(z, m.clip_head)
    frame_logits = L.linear_forward(r, m.frame_head)
    return ForwardOutput(clip_logits, frame_logits, diag)


def forward_batch(m, frames, training=False, rng=None):
    """Forward a ``(B, T, C, H, W)`` batch (a single ``(T, C, H, W)`` clip is promoted to B=1)."""
    arr = _as_frames(m, frames)
    b, t = arr.shape[:2]
    x = Tensor(arr.reshape((b * t,) + arr.shape[2:]), dtype=arr.dtype)
    feat = backbone_forward(m, x, training)
    out = head_forward(m, feat, b, t, training, rng)
    out.diagnostics["features"] = feat
    return out


def forward_clip(m, clip, training=False, rng=None):
    """Forward one clip; outputs keep a leading batch axis of size 1."""
    frames = clip.frames if hasattr(clip, "frames") else clip
    arr = np.asarray(frames)
    if arr.shape[0] != m.config.frames:
        raise T.DimensionError(f"clip has {arr.shape[0]} frames, model expects {m.config.frames}")
    return forward_batch(m, arr.astype(m.config.dtype, copy=False), training, rng)


# ---------------------------------------------------------------------------
# Loss and prediction
# ---------------------------------------------------------------------------


def _weighted_ce(logits, labels, weights):
    """Per-sample weighted cross-entropy; logits ``(B, ..., K)`` -> ``(B, ...)``."""
    logp = T.log_softmax(logits, axis=-1)
    b = logits.shape[0]
    if logits.ndim == 2:
        picked = logp[np.arange(b), labels]
        return picked * Tensor(-weights[labels], dtype=logits.dtype)
    steps = logits.shape[1]
    picked = logp[np.arange(b)[:, None], np.arange(steps)[None, :], labels[:, None]]
    return picked * Tensor(-weights[labels][:, None], dtype=logits.dtype)


def hybrid_loss_terms(out, labels, cfg, class_weights=None):
    """Return ``(total, spatial, temporal)`` losses averaged over the batch."""
    k = cfg.num_classes
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != out.clip_logits.shape[0]:
        raise ValueError("one label per clip is required")
    if (labels < 0).any() or (labels >= k).any():
        raise ValueError(f"labels must lie in [0, {k})")
    weights = np.ones(k) if class_weights is None else np.asarray(
        class_weights.data if isinstance(class_weights, Tensor) else class_weights, dtype=np.float64)
    if weights.shape != (k,) or (weights <= 0).any():
        raise ValueError("class weights must be K positive values")
    spatial = T.mean(_weighted_ce(out.frame_logits, labels, weights))
    temporal = T.mean(_weighted_ce(out.clip_logits, labels, weights))
    total = spatial * cfg.alpha + temporal * cfg.beta
    return total, spatial, temporal


def hybrid_loss(out, labels, cfg, class_weights=None):
    return hybrid_loss_terms(out, labels, cfg, class_weights)[0]


def softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_from_logits(logits):
    """Probabilities and argmax (ties go to the lowest class index)."""
    logits = np.asarray(logits)
    return np.argmax(logits, axis=-1), softmax_np(logits)


def attribute(m, clip):
    """Predict the generating family for one clip in eval mode."""
    with T.no_record():
        out = forward_clip(m, clip, training=False)
    cls, probs = predict_from_logits(out.clip_logits.data[0])
    return int(cls), probs


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def count_params(m):
    """Number of learnable scalars (running statistics excluded)."""
    return int(sum(p.size for p in m.parameters().values()))


def param_breakdown(m):
    groups = {}
    for name, p in m.parameters().items():
        key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + p.size
    return groups


def conv_flops(cin, cout, k, ho, wo):
    """Multiply-accumulates counted as two operations."""
    return 2 * k * k * cin * cout * ho * wo


def flops_breakdown(cfg, frames=None):
    """Closed-form FLOPs per clip, split by component.

    Only multiply-accumulate work is counted (2 per MAC): convolutions, the
    spatial MLP, LSTM gate projections, temporal attention projections and the
    linear heads.  Pooling, normalization and elementwise ops are ignored.
    """
    steps = cfg.frames if frames is None else frames
    size = cfg.image_size
    conv = 0
    cin = cfg.channels
    for stage in cfg.stages:
        for cout in stage:
            conv += conv_flops(cin, cout, 3, size, size)
            cin = cout
        size //= 2
    d, hd, hid = cfg.feat_dim, cfg.state_dim, cfg.lstm_hidden
    pix = cfg.feat_size ** 2
    spatial = pix * (2 * 2 * cfg.spatial_hidden + 2 * cfg.spatial_hidden) if cfg.spatial_attention else 0
    lstm = 2 * (2 * 4 * hid * (d + hid))
    if cfg.temporal_mode == "gate":
        temporal = 2 * d * hd
    elif cfg.temporal_mode == "softmax":
        temporal = 2 * hd * hd + 2 * hd
    else:
        temporal = 0
    frame_head = 2 * d * cfg.num_classes
    return {
        "conv": conv * steps,
        "spatial_attention": spatial * steps,
        "lstm": lstm * steps,
        "temporal_attention": temporal * steps,
        "frame_head": frame_head * steps,
        "clip_head": 2 * cfg.clip_dim * cfg.num_classes,
    }


def estimate_flops(m, frames=None):
    cfg = m.config if isinstance(m, FameModel) else m
    return int(sum(flops_breakdown(cfg, frames).values()))
