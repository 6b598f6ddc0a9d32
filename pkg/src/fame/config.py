"""Run configuration: ``key = value`` text with dotted section keys.

Example::

    # desk-scale run
    seed = 3
    model.image_size = 32
    model.stages = 8/16/32
    train.epochs = 30
    train.weight_decay = 1e-4
    data.compression_mix = none:0.34,hq:0.33,lq:0.33

Sections are ``model``, ``train``, ``data`` and ``paths``; a top-level
``seed`` seeds every section that does not set its own.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .model import ConfigError, FameConfig
from .synth import DatasetSpec, SynthError
from .training import TrainConfig

PATH_KEYS = ("data_dir", "out_dir", "checkpoint")


@dataclass
class RunConfig:
    model: FameConfig = field(default_factory=FameConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    paths: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self):
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": self.data.to_dict(), "paths": dict(self.paths), "seed": self.seed}

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_stages(text):
    """``64,64/128,128/256,256,256,256`` -> nested tuple of conv widths."""
    stages = tuple(tuple(int(c) for c in part.split(",") if c.strip()) for part in text.split("/"))
    if not stages or any(not s for s in stages):
        raise ValueError(f"bad stage list {text!r}")
    return stages


def parse_mix(text):
    """``none:0.5,hq:0.25,lq:0.25`` -> dict."""
    out = {}
    for part in text.split(","):
        key, sep, value = part.partition(":")
        if not sep:
            raise ValueError(f"bad compression mix entry {part!r}")
        out[key.strip()] = float(value)
    return out


def _converter(default, key):
    if key == "stages":
        return parse_stages
    if key == "compression_mix":
        return parse_mix
    if isinstance(default, bool):
        return parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _type_name(default, key):
    if key == "stages":
        return "stage list"
    if key == "compression_mix":
        return "compression mix"
    return type(default).__name__


def _defaults(cls):
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls)}


SECTIONS = {"model": FameConfig, "train": TrainConfig, "data": DatasetSpec}


def parse_config(text):
    """Parse config text into a :class:`RunConfig`; unspecified keys keep their defaults."""
    values = {name: {} for name in SECTIONS}
    paths = {}
    seed = None
    defaults = {name: _defaults(cls) for name, cls in SECTIONS.items()}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        if key == "seed":
            try:
                seed = int(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: seed expects int, got {value!r}") from None
            continue
        section, dot, name = key.partition(".")
        if section == "paths" and dot and name in PATH_KEYS:
            paths[name] = value
            continue
        if section not in SECTIONS or not dot or name not in defaults[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = defaults[section][name]
        try:
            values[section][name] = _converter(default, name)(value)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: {key} expects {_type_name(default, name)}, got {value!r}") from None
    if seed is not None:
        values["train"].setdefault("seed", seed)
        values["data"].setdefault("seed", seed)
    try:
        model = FameConfig(**values["model"])
        train = TrainConfig(**values["train"])
        data = DatasetSpec(**values["data"])
        data.validate()
    except SynthError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(model, train, data, paths, seed if seed is not None else 0)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# Desk-scale presets
# ---------------------------------------------------------------------------

# weight decay for the ~14k-parameter synthetic runs (0.6 belongs to the 112x112 model)
DESK_WEIGHT_DECAY = 1e-4
DESK_MIX = {"none": 1 / 3, "hq": 1 / 3, "lq": 1 / 3}


def desk_model_config(**changes):
    """32x32 input, three single-conv stages (8/16/32), H_cell=16, float32."""
    base = dict(image_size=32, frames=10, stages=((8,), (16,), (32,)), lstm_hidden=16, num_classes=5,
                precision="float32")
    base.update(changes)
    return FameConfig(**base)


def desk_train_config(seed=0, **changes):
    """30 epochs at lr 0.01 with the desk weight decay; no per-epoch evaluation."""
    base = dict(epochs=30, batch_size=32, lr=0.01, weight_decay=DESK_WEIGHT_DECAY, eval_split="none", seed=seed)
    base.update(changes)
    return TrainConfig(**base)


def desk_dataset_spec(seed=0, **changes):
    """5 families, 100 train + 25 test clips each, 32x32, T=10, mixed compression.

    Half-strength fingerprints, absent from ~70% of frames, keep the task off
    the ceiling so the attention variants can be told apart.
    """
    base = dict(num_classes=5, clips_per_class=125, frames=10, size=32, compression_mix=dict(DESK_MIX),
                train_fraction=0.8, test_fraction=0.2, strength=0.5, weak_frame_prob=0.7,
                weak_frame_weight=0.0, seed=seed)
    base.update(changes)
    return DatasetSpec(**base)
