import json
import os
import struct

import numpy as np
import pytest

from fame import checkpoint as C
from fame import synth as S
from fame.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from fame.config import (desk_dataset_spec, desk_model_config, desk_train_config, load_config, parse_config,
                         parse_mix, parse_stages)
from fame.evaluation import evaluate
from fame.model import ConfigError, build_model, toy_config
from fame.training import TrainConfig, train


def run(argv):
    out, err = [], []
    code = main(argv, out=out.append, err=err.append)
    return code, "\n".join(out), "\n".join(err)


# -- config -----------------------------------------------------------------

def test_parse_config_values_and_seed_propagation():
    rc = parse_config("""
        # desk run
        seed = 7
        model.image_size = 32
        model.stages = 8/16/32   # widths
        model.spatial_attention = no
        train.epochs = 3
        train.weight_decay = 1e-4
        data.compression_mix = none:0.5,hq:0.25,lq:0.25
        data.seed = 9
        paths.out_dir = runs/a
    """)
    assert rc.seed == 7 and rc.train.seed == 7 and rc.data.seed == 9
    assert rc.model.stages == ((8,), (16,), (32,)) and rc.model.spatial_attention is False
    assert rc.train.epochs == 3 and rc.train.weight_decay == 1e-4
    assert rc.data.compression_mix == {"none": 0.5, "hq": 0.25, "lq": 0.25}
    assert rc.paths == {"out_dir": "runs/a"}
    assert rc.digest() != parse_config("seed = 7").digest()


def test_empty_config_is_defaults():
    rc = parse_config("")
    assert rc.train.epochs == 150 and rc.model.lstm_hidden == 96 and rc.data.num_classes == 5


@pytest.mark.parametrize("text,needle", [
    ("train.batch_size = yes", "line 1: train.batch_size expects int, got 'yes'"),
    ("\nmodel.bogus = 1", "line 2: unknown key 'model.bogus'"),
    ("seed = 1\nseed = 2", "line 2: duplicate key 'seed'"),
    ("train.epochs", "line 1: expected 'key = value'"),
    ("model.stages = 8,/", "expects stage list"),
    ("data.compression_mix = none", "expects compression mix"),
    ("data.num_classes = 9", "num_classes"),
    ("train.lr = -1", "lr must be positive"),
])
def test_parse_config_errors(text, needle):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert needle in str(exc.value)


def test_desk_config_file_matches_presets():
    rc = load_config(os.path.join(os.path.dirname(__file__), "..", "configs", "desk.cfg"))
    assert rc.model == desk_model_config()
    assert rc.train == desk_train_config(0)
    assert rc.data == desk_dataset_spec(0)


def test_small_parsers():
    assert parse_stages("64,64/128") == ((64, 64), (128,))
    assert parse_mix("hq:1") == {"hq": 1.0}
    with pytest.raises(ValueError):
        parse_stages("")


# -- checkpoint -------------------------------------------------------------

def test_checkpoint_bytes_roundtrip():
    m = build_model(toy_config(), 3)
    ck = C.from_model(m, seed=3, epoch=5, meta={"note": "x"})
    blob = C.dumps(ck)
    assert blob[:5] == C.MAGIC
    back = C.loads(blob)
    assert C.dumps(back) == blob
    assert back.epoch == 5 and back.seed == 3 and back.meta == {"note": "x"}
    m2 = C.to_model(back)
    for name, p in m.parameters().items():
        assert p.data.tobytes() == m2.parameters()[name].data.tobytes()
    for name, b in m.buffers().items():
        assert b.tobytes() == m2.buffers()[name].tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    blob = C.dumps(C.from_model(build_model(toy_config(), 0)))
    with pytest.raises(C.CheckpointError):
        C.loads(b"XXXX" + blob[4:])
    with pytest.raises(C.CheckpointError):
        C.loads(blob[:-3])
    with pytest.raises(C.CheckpointError):
        C.loads(blob + b"\x00")
    with pytest.raises(C.CheckpointError):
        C.loads(blob[:5])
    path = tmp_path / "a.ckpt"
    path.write_bytes(blob[:100])
    with pytest.raises(C.CheckpointError):
        C.load_checkpoint(path)


def test_checkpoint_header_is_json_and_shapes_checked():
    ck = C.from_model(build_model(toy_config(), 0))
    blob = C.dumps(ck)
    (hlen,) = struct.unpack("<Q", blob[5:13])
    header = json.loads(blob[13:13 + hlen])
    assert header["config"]["lstm_hidden"] == 4
    name = "clip_head.weight"
    ck.tensors[name] = np.zeros((1, 1))
    with pytest.raises(C.CheckpointError):
        C.to_model(ck)


def test_evaluate_identical_after_reload(tmp_path):
    spec = S.DatasetSpec(num_classes=2, clips_per_class=5, frames=3, size=16, seed=4)
    manifest, clips = S.generate_dataset(spec)
    m = build_model(toy_config(frames=3), 0)
    res = train(m, manifest, TrainConfig(epochs=1, batch_size=4), clips=clips)
    C.save_checkpoint(res.checkpoint, tmp_path / "m.ckpt")
    m2 = C.to_model(C.load_checkpoint(tmp_path / "m.ckpt"))
    a = evaluate(m, manifest, clips=clips).to_text(timing=False)
    b = evaluate(m2, manifest, clips=clips).to_text(timing=False)
    assert a == b


# -- CLI --------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text("seed = 1\nmodel.image_size = 16\nmodel.frames = 3\nmodel.stages = 4/8\n"
                   "model.lstm_hidden = 4\nmodel.num_classes = 2\ntrain.epochs = 1\ntrain.batch_size = 4\n")
    data = root / "data"
    code, out, err = run(["synth", "--out", str(data), "--classes", "2", "--per-class", "5",
                          "--frames", "3", "--size", "16", "--seed", "1"])
    assert code == EXIT_OK, err
    code, out, err = run(["train", "--data", str(data), "--out", str(root / "run"), "--config", str(cfg)])
    assert code == EXIT_OK, err
    return root, data, cfg


def test_cli_synth_is_deterministic(cli_run, tmp_path):
    _, data, _ = cli_run
    code, _, _ = run(["synth", "--out", str(tmp_path / "d"), "--classes", "2", "--per-class", "5",
                      "--frames", "3", "--size", "16", "--seed", "1"])
    assert code == EXIT_OK
    assert (tmp_path / "d" / "manifest.tsv").read_bytes() == (data / "manifest.tsv").read_bytes()
    rid = S.DatasetManifest.load(data / "manifest.tsv").records[0]
    a = (tmp_path / "d" / rid.dir / "frame_002.ppm").read_bytes()
    assert a == (data / rid.dir / "frame_002.ppm").read_bytes()


def test_cli_train_eval_attribute_gradcam(cli_run, tmp_path):
    root, data, _ = cli_run
    ckpt = str(root / "run" / "final.ckpt")
    assert os.path.exists(root / "run" / "history.tsv")
    code, out, err = run(["eval", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path / "ev")])
    assert code == EXIT_OK, err
    assert "accuracy = " in out and "[confusion]" in out
    assert (tmp_path / "ev" / "report.txt").exists()
    clip = str(data / "clips" / "c1_0000")
    code, out, err = run(["attribute", "--checkpoint", ckpt, "--clip", clip])
    assert code == EXIT_OK, err
    assert out.startswith("class ")
    probs = [float(v) for v in out.splitlines()[1].split()[1:]]
    assert len(probs) == 2 and abs(sum(probs) - 1) < 1e-5
    code, out, err = run(["gradcam", "--checkpoint", ckpt, "--clip", clip, "--target", "0",
                          "--out", str(tmp_path / "cam"), "--upscale", "2"])
    assert code == EXIT_OK, err
    assert len(os.listdir(tmp_path / "cam")) == 3


def test_cli_bench(cli_run):
    root, data, _ = cli_run
    code, out, err = run(["bench", "--checkpoint", str(root / "run" / "final.ckpt"), "--data", str(data),
                          "--clips", "2"])
    assert code == EXIT_OK, err
    assert "params" in out and "flops" in out.lower()


def test_cli_exit_codes(cli_run, tmp_path):
    root, data, cfg = cli_run
    assert run([])[0] == EXIT_USAGE
    assert run(["frobnicate"])[0] == EXIT_USAGE
    assert run(["eval", "--data", str(data)])[0] == EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.batch_size = yes\n")
    code, _, err = run(["train", "--data", str(data), "--out", str(tmp_path / "x"), "--config", str(bad)])
    assert code == EXIT_CONFIG and "line 1: train.batch_size expects int" in err
    assert run(["synth", "--out", str(tmp_path / "s"), "--classes", "9"])[0] == EXIT_CONFIG
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert run(["eval", "--checkpoint", str(junk), "--data", str(data)])[0] == EXIT_DATA
    assert run(["eval", "--checkpoint", str(root / "run" / "final.ckpt"), "--data", str(tmp_path)])[0] == EXIT_DATA
    empty = tmp_path / "emptyclip"
    empty.mkdir()
    assert run(["attribute", "--checkpoint", str(root / "run" / "final.ckpt"), "--clip", str(empty)])[0] == EXIT_DATA


def test_cli_gradcheck_passes():
    code, out, _ = run(["gradcheck"])
    assert code == EXIT_OK
    assert out.splitlines()[-1].endswith("PASS")
