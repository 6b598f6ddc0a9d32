"""Optimization: AdamW with decoupled decay, step schedule, augmentation and the train loop."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import checkpoint as ckpt_mod
from . import tensor as T
from .model import ConfigError, forward_batch, hybrid_loss, predict_from_logits

# parameters whose names end in one of these are not decayed
NO_DECAY_SUFFIXES = (".bias", ".b", ".b1", ".b2", ".b_a", ".gamma", ".beta", ".ln_gamma", ".ln_beta")


class TrainingError(ArithmeticError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    lr: float = 0.01
    lr_decay: float = 0.1
    decay_every: int = 40
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.6
    flip: bool = True
    resize: bool = True
    temporal_crop: bool = True
    class_weighted: bool = True
    recalibrate_bn: bool = True
    eval_split: str = "test"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.decay_every < 1 or not 0 < self.lr_decay <= 1:
            raise ConfigError("decay_every must be >= 1 and lr_decay in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("adam betas must lie in [0, 1) and eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, cfg):
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def decays(name):
    return not name.endswith(NO_DECAY_SUFFIXES)


def adamw_step(params, grads, s):
    """One AdamW update in place.

    ``params`` maps names to tensors, ``grads`` maps the same names to arrays
    (a missing entry counts as a zero gradient).  Decay is applied as
    ``theta * (1 - lr * wd)`` before and independently of the Adam step.
    """
    s.step += 1
    b1, b2 = s.beta1, s.beta2
    c1 = 1.0 - b1 ** s.step
    c2 = 1.0 - b2 ** s.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise T.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        if name not in s.m:
            s.m[name] = np.zeros_like(p.data)
            s.v[name] = np.zeros_like(p.data)
        m, v = s.m[name], s.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if s.weight_decay and decays(name):
            p.data *= 1.0 - s.lr * s.weight_decay
        p.data -= (s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)).astype(p.data.dtype, copy=False)
    return params, s


def lr_schedule(epoch, cfg):
    """``lr * decay ** floor(epoch / decay_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    k = epoch // cfg.decay_every
    lr = cfg.lr
    for _ in range(k):
        lr *= cfg.lr_decay
    # rounding to 15 significant digits makes 0.01*0.1**3 come out as 1e-05
    return float(f"{lr:.15g}")


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


def resize_frames(frames, size):
    """Bilinear (order-1) resize of ``(T, C, H, W)`` frames to ``size`` x ``size``."""
    t, c, h, w = frames.shape
    if (h, w) == (size, size):
        return frames
    return ndimage.zoom(frames, (1, 1, size / h, size / w), order=1, mode="nearest", grid_mode=True)


def normalize(frames):
    return (frames - 0.5) / 0.5


def flip(frames):
    return frames[..., ::-1]


def temporal_indices(length, steps, rng, enabled=True):
    """Frame indices for a crop of ``steps`` frames with stride 1 or 2."""
    if length < steps:
        raise SamplingError(f"clip has {length} frames, {steps} required")
    if not enabled:
        return np.arange(steps)
    stride = int(rng.integers(1, 3))
    if length < stride * steps:
        stride = 1
    span = stride * (steps - 1) + 1
    start = int(rng.integers(0, length - span + 1))
    return start + stride * np.arange(steps)


def preprocess(frames, model_cfg):
    """Deterministic eval-time path: first ``T`` frames, resize, normalize."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < model_cfg.frames:
        raise SamplingError(f"clip has {frames.shape[0]} frames, {model_cfg.frames} required")
    frames = resize_frames(frames[:model_cfg.frames], model_cfg.image_size)
    return normalize(frames).astype(model_cfg.dtype)


def augment(clip, rng, cfg, model_cfg, force_flip=None):
    """Training-time view of a clip: per-clip flip, temporal crop, resize, normalize.

    ``clip`` may be a :class:`~fame.synth.Clip` or a ``(T, C, H, W)`` array in [0, 1].
    """
    frames = np.asarray(getattr(clip, "frames", clip), dtype=np.float64)
    idx = temporal_indices(frames.shape[0], model_cfg.frames, rng, cfg.temporal_crop)
    frames = frames[idx]
    do_flip = bool(rng.random() < 0.5) if force_flip is None else force_flip
    if cfg.flip and do_flip:
        frames = flip(frames)
    if cfg.resize or frames.shape[-1] != model_cfg.image_size:
        frames = resize_frames(frames, model_cfg.image_size)
    return normalize(frames).astype(model_cfg.dtype)


def class_weights(manifest, num_classes=None, split="train"):
    """``w_k = N / (K * n_k)`` over the given split."""
    labels = manifest.labels(split) if hasattr(manifest, "labels") else np.asarray(manifest)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=k)
    if counts.shape[0] > k:
        raise ConfigError(f"labels exceed num_classes={k}")
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise ConfigError(f"classes {missing} have no {split} clips")
    return labels.shape[0] / (k * counts.astype(np.float64))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_acc: float
    seconds: float


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def __len__(self):
        return len(self.rows)

    def to_text(self, timing=True):
        lines = [f"# seed={self.seed}", f"# config={self.config_hash}",
                 "epoch\tlr\ttrain_loss\ttrain_acc\teval_acc" + ("\tseconds" if timing else "")]
        for r in self.rows:
            cols = [str(r.epoch), repr(float(r.lr)), repr(float(r.train_loss)), repr(float(r.train_acc)), repr(float(r.eval_acc))]
            if timing:
                cols.append(f"{r.seconds:.3f}")
            lines.append("\t".join(cols))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


@dataclass
class TrainResult:
    checkpoint: ckpt_mod.Checkpoint
    history: TrainHistory
    best: ckpt_mod.Checkpoint
    best_epoch: int

    def __iter__(self):
        return iter((self.checkpoint, self.history))


class ClipStore:
    """Frames of manifest records, loaded once and kept as uint8."""

    def __init__(self, manifest, clips=None):
        self.manifest = manifest
        self.clips = clips or {}
        self._cache = {}

    def frames(self, record):
        arr = self._cache.get(record.id)
        if arr is None:
            if record.id in self.clips:
                from .synth import to_uint8
                arr = to_uint8(self.clips[record.id].frames)
            else:
                arr = self.manifest.load_frames(record)
            self._cache[record.id] = arr
        return arr.astype(np.float64) / 255.0


def predict_records(m, store, records, batch_size=32):
    """Eval-mode clip logits for ``records`` -> ``(N, K)``."""
    out = []
    with T.no_record():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            x = np.stack([preprocess(store.frames(r), m.config) for r in chunk])
            out.append(forward_batch(m, x, training=False).clip_logits.data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, m.config.num_classes))


def recalibrate_bn(m, store, records, batch_size=32):
    """Replace running statistics by the average batch statistics over ``records``.

    Batches are un-augmented and in manifest order, so the result is a
    deterministic function of the weights.  Training-mode forwards only touch
    the buffers, never the parameters.
    """
    bns = list(m.batchnorms().values())
    saved = [bn.momentum for bn in bns]
    sums = {k: np.zeros_like(v, dtype=np.float64) for k, v in m.buffers().items()}
    n = 0
    try:
        for bn in bns:
            bn.momentum = 1.0
        with T.no_record():
            for i in range(0, len(records), batch_size):
                x = np.stack([preprocess(store.frames(r), m.config) for r in records[i:i + batch_size]])
                forward_batch(m, x, training=True)
                for k, v in m.buffers().items():
                    sums[k] += v
                n += 1
    finally:
        for bn, mom in zip(bns, saved):
            bn.momentum = mom
    for k, v in m.buffers().items():
        v[...] = sums[k] / n


def train(m, manifest, cfg, clips=None, log=None, history_path=None, callback=None):
    """Train ``m`` in place on the manifest's train split.

    Returns a :class:`TrainResult` (unpacks to ``(final_checkpoint, history)``)
    that also carries the best-eval checkpoint.  ``callback(epoch, model)``
    runs after each epoch's evaluation.
    """
    cfg.validate()
    records = manifest.split("train")
    if not records:
        raise ConfigError("train split is empty")
    eval_records = manifest.split(cfg.eval_split) if cfg.eval_split not in ("", "none") else []
    store = clips if isinstance(clips, ClipStore) else ClipStore(manifest, clips)
    mcfg = m.config
    weights = class_weights(manifest, mcfg.num_classes) if cfg.class_weighted else None
    state = OptimState.for_config(cfg)
    params = m.parameters()
    history = TrainHistory(seed=cfg.seed, config_hash=ckpt_mod.from_model(m).config_hash())
    labels_all = np.array([r.label for r in records], dtype=np.int64)
    best, best_acc, best_epoch = None, -1.0, -1
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        state.lr = lr_schedule(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(records))
        losses, correct = [], 0
        for bi in range(0, len(order), cfg.batch_size):
            idx = order[bi:bi + cfg.batch_size]
            x = np.stack([augment(store.frames(records[i]), rng, cfg, mcfg) for i in idx])
            y = labels_all[idx]
            with T.Tape() as tape:
                out = forward_batch(m, x, training=True, rng=rng)
                loss = hybrid_loss(out, y, mcfg, weights)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi // cfg.batch_size}")
            grads = T.backward(loss, tape)
            adamw_step(params, {n: grads[p] for n, p in params.items() if p in grads}, state)
            m.zero_grad()
            losses.append(value * len(idx))
            correct += int((predict_from_logits(out.clip_logits.data)[0] == y).sum())
        if cfg.recalibrate_bn and (eval_records or epoch == cfg.epochs - 1):
            recalibrate_bn(m, store, records, cfg.batch_size)
        eval_acc = float("nan")
        if eval_records:
            logits = predict_records(m, store, eval_records, cfg.batch_size)
            eval_acc = float((logits.argmax(axis=1) == np.array([r.label for r in eval_records])).mean())
        row = EpochRecord(epoch, state.lr, float(np.sum(losses) / len(records)), correct / len(records),
                          eval_acc, time.perf_counter() - start)
        history.rows.append(row)
        if log is not None:
            log(f"epoch {epoch} lr {row.lr:g} loss {row.train_loss:.4f} "
                f"train_acc {row.train_acc:.3f} eval_acc {row.eval_acc:.3f} ({row.seconds:.1f}s)")
        if callback is not None:
            callback(epoch, m)
        score = eval_acc if eval_records else row.train_acc
        if score > best_acc:
            best_acc, best_epoch = score, epoch
            best = ckpt_mod.from_model(m, seed=m.seed, epoch=epoch + 1, meta={"train_seed": cfg.seed})
    if history_path:
        history.save(history_path)
    final = ckpt_mod.from_model(m, seed=m.seed, epoch=cfg.epochs, optim=state, meta={"train_seed": cfg.seed})
    return TrainResult(final, history, best, best_epoch)
