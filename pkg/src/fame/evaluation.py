"""Metrics, ROC analysis, Grad-CAM saliency and the ablation harness."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import from_model
from .model import ConfigError, build_model, count_params, forward_batch, head_forward, softmax_np
from .tensor import Tensor
from .training import ClipStore, predict_records, preprocess, train


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_curve(scores, positive):
    """One-vs-rest ROC from a threshold sweep over the distinct scores.

    Equal scores form a single step, so a tie between a positive and a
    negative contributes a diagonal segment (half credit under the trapezoid).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(pos)[ends]
    fps = np.cumsum(~pos)[ends]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    # integer trapezoid sum keeps the area exact up to one final division
    area2 = np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1])) + fps[0] * tps[0]
    return RocCurve(fpr, tpr, float(area2) / (2.0 * n_pos * n_neg))


def roc_auc(probs, labels, num_classes=None):
    """Per-class one-vs-rest curves and the macro AUC over defined classes.

    Returns ``(curves, macro_auc, defined)``; a class without positives (or
    without negatives) gets ``None`` and is excluded from the macro average.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1] if num_classes is None else num_classes
    curves, defined = [], []
    for c in range(k):
        pos = labels == c
        if pos.all() or not pos.any():
            curves.append(None)
            defined.append(False)
            continue
        curves.append(roc_curve(probs[:, c], pos))
        defined.append(True)
    aucs = [cv.auc for cv in curves if cv is not None]
    macro = float(np.mean(aucs)) if aucs else float("nan")
    return curves, macro, np.array(defined)


def write_roc(path, curve):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fpr\ttpr\n")
        for f, t in zip(curve.fpr, curve.tpr):
            fh.write(f"{float(f)!r}\t{float(t)!r}\n")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def confusion_matrix(labels, preds, k):
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    auc: np.ndarray  # nan where undefined
    auc_defined: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: float
    accuracy: float
    n: int
    seconds_per_clip: float = 0.0
    seed: int = 0
    config_hash: str = ""
    curves: list = field(default_factory=list, repr=False)

    @property
    def num_classes(self):
        return self.confusion.shape[0]

    def to_text(self, timing=True, class_names=None):
        k = self.num_classes
        names = class_names or [str(c) for c in range(k)]
        lines = [f"seed = {self.seed}", f"config = {self.config_hash}", f"n = {self.n}",
                 f"accuracy = {float(self.accuracy)!r}", f"macro_precision = {float(self.macro_precision)!r}",
                 f"macro_recall = {float(self.macro_recall)!r}", f"macro_f1 = {float(self.macro_f1)!r}",
                 f"macro_auc = {float(self.macro_auc)!r}",
                 f"auc_undefined = {','.join(str(c) for c in range(k) if not self.auc_defined[c]) or '-'}"]
        for c in range(k):
            lines += ["", f"[class {c}]", f"name = {names[c]}", f"support = {int(self.confusion[c].sum())}",
                      f"accuracy = {float(self.per_class_accuracy[c])!r}", f"precision = {float(self.precision[c])!r}",
                      f"recall = {float(self.recall[c])!r}", f"f1 = {float(self.f1[c])!r}",
                      f"auc = {float(self.auc[c])!r}" if self.auc_defined[c] else "auc = undefined"]
        lines += ["", "[confusion]"]
        lines += ["\t".join(str(int(v)) for v in row) for row in self.confusion]
        if timing:
            lines += ["", "[timing]", f"seconds_per_clip = {self.seconds_per_clip:.6f}"]
        return "\n".join(lines) + "\n"

    def save(self, path, **kw):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text(**kw))


def parse_confusion(text):
    """Confusion matrix block of a report written by :meth:`MetricsReport.to_text`."""
    rows, inside = [], False
    for line in text.splitlines():
        if line.strip() == "[confusion]":
            inside = True
            continue
        if inside:
            if not line.strip() or line.startswith("["):
                break
            rows.append([int(v) for v in line.split("\t")])
    return np.array(rows, dtype=np.int64)


def metrics_from_predictions(labels, probs, num_classes=None, preds=None):
    """Report from labels and per-class probabilities (predictions default to argmax)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1] if num_classes is None else num_classes
    if labels.size == 0:
        raise ConfigError("cannot evaluate an empty set")
    preds = probs.argmax(axis=1) if preds is None else np.asarray(preds, dtype=np.int64)
    cm = confusion_matrix(labels, preds, k)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    recall = _safe_div(tp, support)
    precision = _safe_div(tp, predicted)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    curves, macro_auc, defined = roc_auc(probs, labels, k)
    auc = np.array([cv.auc if cv is not None else np.nan for cv in curves])
    return MetricsReport(
        confusion=cm, per_class_accuracy=recall, precision=precision, recall=recall, f1=f1,
        auc=auc, auc_defined=defined, macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()), macro_f1=float(f1.mean()), macro_auc=macro_auc,
        accuracy=float(np.trace(cm)) / labels.size, n=int(labels.size), curves=curves)


def evaluate(m, manifest, split="test", clips=None, batch_size=32):
    """Eval-mode inference over one split of the manifest."""
    records = manifest.split(split)
    if not records:
        raise ConfigError(f"split {split!r} is empty")
    store = clips if isinstance(clips, ClipStore) else ClipStore(manifest, clips)
    for r in records:
        store.frames(r)  # load before timing
    start = time.perf_counter()
    logits = predict_records(m, store, records, batch_size)
    seconds = (time.perf_counter() - start) / len(records)
    labels = np.array([r.label for r in records], dtype=np.int64)
    report = metrics_from_predictions(labels, softmax_np(logits), m.config.num_classes)
    report.seconds_per_clip = seconds
    report.seed = manifest.seed
    report.config_hash = from_model(m).config_hash()
    return report


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


def grad_cam(m, clip, target):
    """Per-frame saliency ``(T, h, w)`` for the clip logit of ``target``.

    The target layer is the backbone output: activations after the last
    conv block (BN + ReLU) and its pool, before the spatial mask.
    """
    cfg = m.config
    if not 0 <= target < cfg.num_classes:
        raise ValueError(f"target must lie in [0, {cfg.num_classes})")
    frames = getattr(clip, "frames", clip)
    x = preprocess(frames, cfg)[None]
    with T.no_record():
        feat = forward_batch(m, x, training=False).diagnostics["features"]
    leaf = Tensor(feat.data, requires_grad=True, dtype=feat.dtype)
    with T.Tape() as tape:
        out = head_forward(m, leaf, 1, cfg.frames, training=False)
        score = out.clip_logits[0, target]
    grads = T.backward(score, tape)
    g = grads.get(leaf)
    g = np.zeros_like(leaf.data) if g is None else g
    leaf.grad = None
    m.zero_grad()
    weights = g.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * leaf.data).sum(axis=1), 0.0).astype(np.float64)
    peak = cam.max(axis=(1, 2), keepdims=True)
    return np.divide(cam, peak, out=np.zeros_like(cam), where=peak > 0)


def center_of_mass(heatmap):
    """``(row, col)`` centroid of a non-negative map in pixel units (center if all zero)."""
    h, w = heatmap.shape
    total = heatmap.sum()
    if total <= 0:
        return (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w]
    return float((rows * heatmap).sum() / total), float((cols * heatmap).sum() / total)


def save_heatmaps(cams, directory, upscale=1):
    from .synth import write_pgm

    os.makedirs(directory, exist_ok=True)
    paths = []
    for t, cam in enumerate(cams):
        img = np.kron(cam, np.ones((upscale, upscale))) if upscale > 1 else cam
        path = os.path.join(directory, f"cam_{t:03d}.pgm")
        write_pgm(path, img)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_ORDER = ("baseline", "spatial_only", "temporal_only", "full")


def ablation_variants(cfg):
    """The four standard variants derived from ``cfg``."""
    return {
        "baseline": cfg.replace(spatial_attention=False, temporal_mode="none"),
        "spatial_only": cfg.replace(spatial_attention=True, temporal_mode="none"),
        "temporal_only": cfg.replace(spatial_attention=False, temporal_mode="gate"),
        "full": cfg.replace(spatial_attention=True, temporal_mode="gate"),
    }


@dataclass
class AblationRow:
    name: str
    params: int
    accuracy: float
    macro_f1: float
    spatial_attention: bool
    temporal_mode: str


@dataclass
class AblationTable:
    rows: list

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_text(self):
        lines = ["variant\tspatial\ttemporal\tparams\taccuracy\tmacro_f1"]
        for r in self.rows:
            lines.append(f"{r.name}\t{'yes' if r.spatial_attention else 'no'}\t{r.temporal_mode}\t"
                         f"{r.params}\t{r.accuracy:.4f}\t{r.macro_f1:.4f}")
        return "\n".join(lines) + "\n"


def ablate(manifest, variants, cfg, clips=None, model_seed=None, split="test"):
    """Train each variant with the same seeds and schedule; one row per variant.

    ``variants`` is a dict ``name -> FameConfig`` or a list of configs.
    """
    if isinstance(variants, (list, tuple)):
        variants = {f"variant_{i}": v for i, v in enumerate(variants)}
    if len(variants) < 2:
        raise ConfigError("ablation needs at least two variants")
    store = clips if isinstance(clips, ClipStore) else ClipStore(manifest, clips)
    seed = cfg.seed if model_seed is None else model_seed
    rows = []
    for name, vcfg in variants.items():
        m = build_model(vcfg, seed)
        train(m, manifest, cfg, clips=store)
        rep = evaluate(m, manifest, split, clips=store)
        rows.append(AblationRow(name, count_params(m), rep.accuracy, rep.macro_f1,
                                vcfg.spatial_attention, vcfg.temporal_mode))
    return AblationTable(rows)
