import numpy as np
import pytest

from fame import evaluation as E
from fame import synth as S
from fame import tensor as T
from fame.model import ConfigError, build_model, forward_batch, head_forward, toy_config
from fame.tensor import Tensor
from fame.training import TrainConfig, preprocess


def mann_whitney_auc(scores, positive):
    pos = scores[positive]
    neg = scores[~positive]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# -- ROC --------------------------------------------------------------------

def test_auc_perfect_reversed_and_constant():
    pos = np.array([True, True, False, False])
    assert E.roc_curve(np.array([0.9, 0.8, 0.2, 0.1]), pos).auc == 1.0
    assert E.roc_curve(np.array([0.1, 0.2, 0.8, 0.9]), pos).auc == 0.0
    assert E.roc_curve(np.full(4, 0.5), pos).auc == 0.5


def test_roc_endpoints_and_monotone():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 5, 40).astype(float)
    pos = rng.random(40) < 0.4
    cv = E.roc_curve(s, pos)
    assert (cv.fpr[0], cv.tpr[0], cv.fpr[-1], cv.tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.all(np.diff(cv.fpr) >= 0) and np.all(np.diff(cv.tpr) >= 0)
    assert abs(np.trapezoid(cv.tpr, cv.fpr) - cv.auc) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_auc_matches_pairwise_oracle_with_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 60))
    s = np.round(rng.random(n), 1)
    pos = rng.random(n) < 0.5
    pos[0], pos[1] = True, False
    assert abs(E.roc_curve(s, pos).auc - mann_whitney_auc(s, pos)) <= 1e-12


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        E.roc_curve(np.ones(3), np.ones(3, dtype=bool))


def test_roc_auc_undefined_class_excluded():
    probs = np.array([[0.7, 0.2, 0.1], [0.4, 0.5, 0.1], [0.3, 0.6, 0.1]])
    curves, macro, defined = E.roc_auc(probs, np.array([0, 1, 1]))
    assert defined.tolist() == [True, True, False] and curves[2] is None
    assert macro == np.mean([curves[0].auc, curves[1].auc]) == 1.0


def test_write_roc(tmp_path):
    cv = E.roc_curve(np.array([0.9, 0.1]), np.array([True, False]))
    E.write_roc(tmp_path / "roc.tsv", cv)
    lines = (tmp_path / "roc.tsv").read_text().splitlines()
    assert lines[0] == "fpr\ttpr" and len(lines) == 1 + len(cv.fpr)


# -- metrics ----------------------------------------------------------------

def test_oracle_predictor():
    labels = np.repeat(np.arange(4), 5)
    rep = E.metrics_from_predictions(labels, np.eye(4)[labels])
    assert rep.accuracy == rep.macro_f1 == rep.macro_auc == 1.0
    np.testing.assert_array_equal(rep.confusion, 5 * np.eye(4))


def test_constant_predictor():
    labels = np.repeat(np.arange(4), 5)
    probs = np.tile([0.4, 0.2, 0.2, 0.2], (20, 1))
    rep = E.metrics_from_predictions(labels, probs)
    assert rep.accuracy == 0.25
    assert rep.recall.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert rep.precision.tolist() == [0.25, 0.0, 0.0, 0.0]
    assert rep.f1[1:].tolist() == [0.0, 0.0, 0.0]
    assert rep.macro_auc == 0.5


def test_metrics_from_confusion_by_hand():
    # rows true, cols predicted
    labels = np.array([0, 0, 0, 1, 1, 2])
    preds = np.array([0, 0, 1, 1, 2, 2])
    probs = np.eye(3)[preds]
    rep = E.metrics_from_predictions(labels, probs)
    assert rep.confusion.tolist() == [[2, 1, 0], [0, 1, 1], [0, 0, 1]]
    np.testing.assert_allclose(rep.precision, [1.0, 0.5, 0.5])
    np.testing.assert_allclose(rep.recall, [2 / 3, 0.5, 1.0])
    np.testing.assert_allclose(rep.f1, [0.8, 0.5, 2 / 3])
    assert abs(rep.macro_f1 - (0.8 + 0.5 + 2 / 3) / 3) <= 1e-15
    assert rep.accuracy == 4 / 6


def test_explicit_predictions_override_argmax():
    probs = np.array([[0.6, 0.4], [0.6, 0.4]])
    rep = E.metrics_from_predictions(np.array([0, 1]), probs, preds=[0, 1])
    assert rep.accuracy == 1.0


def test_report_text_and_confusion_roundtrip():
    labels = np.array([0, 0, 1, 1, 2, 2, 2])
    probs = np.random.default_rng(3).dirichlet(np.ones(3), size=7)
    rep = E.metrics_from_predictions(labels, probs)
    text = rep.to_text(class_names=["a", "b", "c"])
    np.testing.assert_array_equal(E.parse_confusion(text), rep.confusion)
    assert "[timing]" in text and "[timing]" not in rep.to_text(timing=False)
    assert "name = b" in text
    cm = E.parse_confusion(text)
    assert rep.accuracy == np.trace(cm) / cm.sum()


def test_report_values_are_plain_floats():
    labels = np.array([0, 1, 1, 2, 2, 0])
    probs = np.random.default_rng(4).dirichlet(np.ones(3), size=6)
    rep = E.metrics_from_predictions(labels, probs)
    values = {}
    block = "top"
    for line in rep.to_text(timing=False).splitlines():
        if line.startswith("["):
            block = line
        elif " = " in line and block != "[confusion]":
            key, val = line.split(" = ")
            values[(block, key)] = val
    assert float(values[("top", "macro_f1")]) == rep.macro_f1
    for c in range(3):
        assert float(values[(f"[class {c}]", "auc")]) == rep.auc[c]
        assert float(values[(f"[class {c}]", "f1")]) == rep.f1[c]


def test_empty_evaluation_rejected():
    with pytest.raises(ConfigError):
        E.metrics_from_predictions(np.array([], dtype=int), np.zeros((0, 2)))


# -- evaluate / Grad-CAM ----------------------------------------------------

@pytest.fixture(scope="module")
def small():
    spec = S.DatasetSpec(num_classes=3, clips_per_class=5, frames=3, size=16, seed=2)
    manifest, clips = S.generate_dataset(spec)
    return manifest, clips, build_model(toy_config(frames=3, num_classes=3), 0)


def test_evaluate_report(small):
    manifest, clips, m = small
    rep = E.evaluate(m, manifest, clips=clips)
    assert rep.n == len(manifest.split("test"))
    assert rep.confusion.sum() == rep.n
    assert rep.seconds_per_clip > 0
    assert rep.to_text(timing=False) == E.evaluate(m, manifest, clips=clips).to_text(timing=False)
    with pytest.raises(ConfigError):
        E.evaluate(m, manifest, split="val", clips=clips)


def test_grad_cam_range_and_shape(small):
    manifest, clips, m = small
    clip = clips[manifest.records[0].id]
    cam = E.grad_cam(m, clip, 1)
    cfg = m.config
    assert cam.shape == (cfg.frames, cfg.feat_size, cfg.feat_size)
    assert cam.min() >= 0 and cam.max() <= 1
    for frame in cam:
        assert frame.max() in (0.0, 1.0)
    with pytest.raises(ValueError):
        E.grad_cam(m, clip, 3)


def test_grad_cam_zero_head_gives_zero_maps(small):
    manifest, clips, _ = small
    m = build_model(toy_config(frames=3, num_classes=3), 1)
    m.clip_head.weight.data[...] = 0.0
    cam = E.grad_cam(m, clips[manifest.records[0].id], 0)
    np.testing.assert_array_equal(cam, 0.0)


def test_grad_cam_weights_match_finite_differences(small):
    """The channel weights are mean gradients of the target logit w.r.t. the features."""
    manifest, clips, _ = small
    m = build_model(toy_config(frames=3, num_classes=3), 2)
    cfg = m.config
    frames = clips[manifest.records[1].id].frames
    feat = forward_batch(m, preprocess(frames, cfg)[None]).diagnostics["features"].data

    def logit(f):
        return float(head_forward(m, Tensor(f), 1, cfg.frames, training=False).clip_logits.data[0, 2])

    rng = np.random.default_rng(0)
    # zero activations sit on the channel-max kink; probe only the smooth coordinates
    direction = rng.standard_normal(feat.shape) * (feat > 1e-3)
    eps = 1e-6
    fd = (logit(feat + eps * direction) - logit(feat - eps * direction)) / (2 * eps)
    cam_ref = E.grad_cam(m, frames, 2)
    # recover the gradient through the autograd path the heatmap uses
    leaf = Tensor(feat, requires_grad=True)
    with T.Tape() as tape:
        score = head_forward(m, leaf, 1, cfg.frames, training=False).clip_logits[0, 2]
    g = T.backward(score, tape)[leaf]
    m.zero_grad()
    assert abs(float((g * direction).sum()) - fd) <= 1e-6 * max(1.0, abs(fd))
    weights = g.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * feat).sum(axis=1), 0)
    peak = cam.max(axis=(1, 2), keepdims=True)
    np.testing.assert_allclose(cam_ref, np.divide(cam, peak, out=np.zeros_like(cam), where=peak > 0), atol=1e-12)


def test_center_of_mass_and_heatmaps(tmp_path):
    h = np.zeros((5, 5))
    h[1, 3] = 1.0
    assert E.center_of_mass(h) == (1.0, 3.0)
    assert E.center_of_mass(np.zeros((4, 6))) == (1.5, 2.5)
    paths = E.save_heatmaps(np.stack([h, h]), tmp_path / "cams", upscale=3)
    assert len(paths) == 2
    img = S.read_pgm(paths[0])
    assert img.shape == (15, 15) and img[3:6, 9:12].min() == 255 and img.sum() == 9 * 255


# -- ablation ---------------------------------------------------------------

def test_ablation_variants_and_table(small):
    manifest, clips, _ = small
    variants = E.ablation_variants(toy_config(frames=3, num_classes=3))
    assert tuple(variants) == E.ABLATION_ORDER
    assert not variants["baseline"].spatial_attention and variants["baseline"].temporal_mode == "none"
    assert variants["full"].spatial_attention and variants["full"].temporal_mode == "gate"
    pick = {k: variants[k] for k in ("baseline", "full")}
    table = E.ablate(manifest, pick, TrainConfig(epochs=1, batch_size=4), clips=clips)
    assert [r.name for r in table.rows] == ["baseline", "full"]
    assert table.row("full").params > table.row("baseline").params
    assert table.to_text().count("\n") == 3
    with pytest.raises(KeyError):
        table.row("temporal_only")
    with pytest.raises(ConfigError):
        E.ablate(manifest, [variants["full"]], TrainConfig(epochs=1), clips=clips)
