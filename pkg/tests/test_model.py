import math

import numpy as np
import pytest

from fame import tensor as T
from fame.gradcheck import model_gradcheck
from fame.model import (
    ConfigError,
    FameConfig,
    attribute,
    build_model,
    conv_flops,
    count_params,
    estimate_flops,
    flops_breakdown,
    forward_batch,
    forward_clip,
    hybrid_loss,
    hybrid_loss_terms,
    param_breakdown,
    predict_from_logits,
    toy_config,
)
from fame.tensor import Tensor


def closed_form_params(channels, stages, hidden, k, mode="gate", spatial=True, spatial_hidden=8):
    """Parameter count written out term by term."""
    conv = bn = 0
    cin = channels
    for stage in stages:
        for cout in stage:
            conv += cin * cout * 9 + cout
            bn += 2 * cout
            cin = cout
    d = cin
    hd = 2 * hidden
    terms = {
        "backbone": conv + bn,
        "spatial": (2 * spatial_hidden + spatial_hidden + spatial_hidden + 1) if spatial else 0,
        "condense_bn": 2 * d,
        "lstm": 2 * (4 * hidden * d + 4 * hidden * hidden + 4 * hidden),
        "temporal": {"gate": d * hd + d + 2 * d, "softmax": hd + hd * hd + hd, "none": 0}[mode],
        "clip_head": (d if mode == "gate" else hd) * k + k,
        "frame_head": d * k + k,
    }
    return terms


def random_clip(cfg, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (cfg.frames, cfg.channels, cfg.image_size, cfg.image_size)
    if batch is not None:
        shape = (batch,) + shape
    return rng.uniform(-1, 1, size=shape)


def test_toy_param_count_by_hand():
    m = build_model(toy_config(), 0)
    # convs 224+584+1168+2320, BN 96, mask 33, condense 32, LSTM 2*336,
    # gate 16*8+16+32, heads 2*34
    assert count_params(m) == 4392 + 33 + 32 + 672 + 176 + 34 + 34 == 5373


@pytest.mark.parametrize("mode", ["gate", "softmax", "none"])
@pytest.mark.parametrize("spatial", [True, False])
def test_breakdown_matches_closed_form(mode, spatial):
    cfg = toy_config(temporal_mode=mode, spatial_attention=spatial, num_classes=3, lstm_hidden=5)
    m = build_model(cfg, 0)
    expected = closed_form_params(3, cfg.stages, 5, 3, mode, spatial)
    got = param_breakdown(m)
    for key, value in expected.items():
        assert got.get(key, 0) == value, key
    assert count_params(m) == sum(expected.values())


def test_default_config_count():
    cfg = FameConfig()
    terms = closed_form_params(3, cfg.stages, 96, 5)
    assert terms["backbone"] == 2_328_384
    assert terms["clip_head"] == terms["frame_head"] == 1_285
    total = sum(terms.values())
    assert total == 2_652_523
    assert 2_480_000 <= total <= 2_740_000


def test_count_is_structural():
    a = build_model(toy_config(), 0)
    b = build_model(toy_config(), 1)
    for p in b.parameters().values():
        p.data[...] = 7.0
    assert count_params(a) == count_params(b)


def test_build_is_deterministic():
    a = build_model(toy_config(), 3).parameters()
    b = build_model(toy_config(), 3).parameters()
    assert list(a) == list(b)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)


def test_config_validation():
    with pytest.raises(ConfigError):
        toy_config(num_classes=1)
    with pytest.raises(ConfigError):
        toy_config(frames=0)
    with pytest.raises(ConfigError):
        toy_config(alpha=0.0, beta=0.0)
    with pytest.raises(ConfigError):
        toy_config(image_size=18)
    with pytest.raises(ConfigError):
        toy_config(temporal_mode="lstm")


# -- FLOPs ------------------------------------------------------------------

def test_single_mac_is_two_flops():
    assert conv_flops(1, 1, 1, 1, 1) == 2


def test_toy_flops_by_hand():
    cfg = toy_config()
    per_frame_conv = 2 * 9 * (3 * 8 * 256 + 8 * 8 * 256 + 8 * 16 * 64 + 16 * 16 * 64)
    spatial = 16 * (2 * 2 * 8 + 2 * 8)
    lstm = 2 * 2 * 4 * 4 * (16 + 4)
    gate = 2 * 16 * 8
    frame_head = 2 * 16 * 2
    clip_head = 2 * 16 * 2
    expected = 3 * (per_frame_conv + spatial + lstm + gate + frame_head) + clip_head
    assert per_frame_conv == 847_872
    assert estimate_flops(cfg) == expected == 2_550_784


@pytest.mark.parametrize("mode", ["gate", "softmax", "none"])
def test_flops_linear_in_frames(mode):
    cfg = toy_config(temporal_mode=mode)
    f1 = flops_breakdown(cfg, 5)
    f2 = flops_breakdown(cfg, 10)
    for key in f1:
        if key != "clip_head":
            assert f2[key] == 2 * f1[key]
    assert f1["clip_head"] == f2["clip_head"]


# -- forward ----------------------------------------------------------------

@pytest.mark.parametrize("frames", [1, 3, 10])
def test_forward_shapes(frames):
    cfg = toy_config(frames=frames, num_classes=4)
    m = build_model(cfg, 0)
    out = forward_clip(m, random_clip(cfg))
    assert out.clip_logits.shape == (1, 4)
    assert out.frame_logits.shape == (1, frames, 4)
    d = out.diagnostics
    assert d["spatial_mask"].shape == (frames, 1, cfg.feat_size, cfg.feat_size)
    assert d["temporal"].shape == (1, frames, cfg.feat_dim)
    assert d["z"].shape == (1, cfg.feat_dim)


def test_softmax_mode_diagnostics():
    cfg = toy_config(temporal_mode="softmax")
    out = forward_clip(build_model(cfg, 0), random_clip(cfg))
    alpha = out.diagnostics["temporal"].data
    assert alpha.shape == (1, cfg.frames)
    assert abs(alpha.sum() - 1) <= 1e-12


def test_eval_forward_deterministic_and_side_effect_free():
    cfg = toy_config()
    m = build_model(cfg, 0)
    clip = random_clip(cfg)
    before = {k: v.copy() for k, v in m.buffers().items()}
    a = forward_clip(m, clip).clip_logits.data
    b = forward_clip(m, clip.copy()).clip_logits.data
    assert a.tobytes() == b.tobytes()
    for k, v in m.buffers().items():
        assert v.tobytes() == before[k].tobytes()


def test_frame_order_matters():
    cfg = toy_config(frames=4)
    m = build_model(cfg, 1)
    clip = random_clip(cfg, seed=2)
    base = forward_clip(m, clip).clip_logits.data
    rng = np.random.default_rng(0)
    changed = any(np.max(np.abs(forward_clip(m, clip[rng.permutation(4)]).clip_logits.data - base)) > 1e-6
                  for _ in range(5))
    assert changed


def test_batch_matches_single_clips_in_eval():
    cfg = toy_config()
    m = build_model(cfg, 0)
    clips = random_clip(cfg, batch=3)
    batched = forward_batch(m, clips).clip_logits.data
    for i in range(3):
        np.testing.assert_allclose(batched[i], forward_clip(m, clips[i]).clip_logits.data[0], rtol=1e-12)


def test_forward_rejects_bad_shapes():
    cfg = toy_config()
    m = build_model(cfg, 0)
    with pytest.raises(T.DimensionError):
        forward_clip(m, np.zeros((cfg.frames + 1, 3, 16, 16)))
    with pytest.raises(T.DimensionError):
        forward_clip(m, np.zeros((cfg.frames, 3, 8, 8)))
    m32 = build_model(toy_config(precision="float32"), 0)
    with pytest.raises(T.DimensionError):
        forward_batch(m32, np.zeros((1, cfg.frames, 3, 16, 16)))


def test_duplicate_identical_frames_keep_gate_argmax():
    cfg = toy_config(frames=3)
    m = build_model(cfg, 4)
    frame = random_clip(cfg, seed=5)[0]
    clip3 = np.stack([frame] * 3)
    out3 = forward_clip(m, clip3)
    m4 = build_model(toy_config(frames=4), 4)
    out4 = forward_clip(m4, np.stack([frame] * 4))
    assert np.argmax(out3.clip_logits.data) == np.argmax(out4.clip_logits.data)
    # identical rows: the gated mean equals the shared row whatever the gate
    r = out3.diagnostics["frame_features"].data[0]
    np.testing.assert_allclose(out3.diagnostics["z"].data[0], r[0], rtol=1e-12)


# -- loss -------------------------------------------------------------------

def test_loss_weight_degeneracy():
    cfg = toy_config(alpha=1.0, beta=0.0)
    m = build_model(cfg, 0)
    out = forward_clip(m, random_clip(cfg))
    total, spatial, _ = hybrid_loss_terms(out, [1], cfg)
    assert total.data == spatial.data


def test_uniform_logits_give_log_k():
    cfg = toy_config(num_classes=4, alpha=0.3, beta=0.9)
    m = build_model(cfg, 0)
    for p in (m.clip_head.weight, m.clip_head.bias, m.frame_head.weight, m.frame_head.bias):
        p.data[...] = 0.0
    out = forward_batch(m, random_clip(cfg, batch=2))
    loss = hybrid_loss(out, [0, 3], cfg)
    assert abs(float(loss.data) - 1.2 * math.log(4)) <= 1e-12


def test_class_weights_scale_per_sample_loss():
    cfg = toy_config()
    m = build_model(cfg, 0)
    out = forward_batch(m, random_clip(cfg, batch=2))
    plain = float(hybrid_loss(out, [1, 1], cfg).data)
    weighted = float(hybrid_loss(out, [1, 1], cfg, np.array([5.0, 2.0])).data)
    assert abs(weighted - 2.0 * plain) <= 1e-12


def test_invalid_label():
    cfg = toy_config()
    out = forward_clip(build_model(cfg, 0), random_clip(cfg))
    with pytest.raises(ValueError):
        hybrid_loss(out, [2], cfg)
    with pytest.raises(ValueError):
        hybrid_loss(out, [-1], cfg)


def test_alpha_zero_frame_head_gradient_is_zero():
    cfg = toy_config(alpha=0.0, beta=1.0)
    m = build_model(cfg, 0)
    for p in m.parameters().values():
        p.requires_grad = True
    with T.Tape() as tape:
        loss = hybrid_loss(forward_batch(m, random_clip(cfg, batch=2), training=True), [0, 1], cfg)
    grads = T.backward(loss, tape)
    for p in (m.frame_head.weight, m.frame_head.bias):
        g = grads.get(p)
        assert g is None or np.all(g == 0.0)


@pytest.mark.parametrize("mode", ["gate", "softmax"])
def test_model_gradcheck_eval_bn(mode):
    res = model_gradcheck(mode, bn_training=False, seed=0)
    assert res.max_rel_error <= 1e-4, res


# -- attribution ------------------------------------------------------------

def test_predict_ties_and_probabilities():
    cls, probs = predict_from_logits(np.array([2.0, 1.0, 0.0, 0.0, 0.0]))
    assert cls == 0 and abs(probs.sum() - 1) <= 1e-12
    cls, _ = predict_from_logits(np.array([1.0, 1.0, 0.0]))
    assert cls == 0


def test_argmax_invariant_to_positive_affine_maps():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.standard_normal(5)
        a, b = rng.uniform(0.1, 10), rng.normal(0, 10)
        assert predict_from_logits(a * z + b)[0] == predict_from_logits(z)[0]


def test_attribute_returns_class_and_probabilities():
    cfg = toy_config(num_classes=3)
    m = build_model(cfg, 0)
    cls, probs = attribute(m, random_clip(cfg))
    assert 0 <= cls < 3 and probs.shape == (3,)
    assert abs(probs.sum() - 1) <= 1e-12
    assert cls == int(np.argmax(probs))


def test_float32_forward():
    cfg = toy_config(precision="float32")
    m = build_model(cfg, 0)
    out = forward_clip(m, random_clip(cfg).astype(np.float32))
    assert out.clip_logits.dtype == np.float32
    assert isinstance(out.clip_logits, Tensor)
