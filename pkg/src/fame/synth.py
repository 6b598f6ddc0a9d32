"""Synthetic face-swap clips with decoder-family fingerprints.

A base clip is smooth face-like content (skin-tone gradient, two dark eye
blobs, a mouth bar, low-amplitude texture) under small per-frame affine
jitter.  Each of the five families then simulates an encoder/decoder round
trip with its own working resolution, upsampling kernel and stage count:

====  ===========  ==========  ========  ===========================================
id    name         work res    stages    upsampler / extras
====  ===========  ==========  ========  ===========================================
0     faceswap     size/2      3         bilinear
1     lightweight  size/2      3         nearest
2     iae          size/2      4         bilinear + channel-mixing blur
3     dfaker       size/2      4         zero-insert + [a,1,a] kernel (checkerboard),
                                         3 residual smoothing blocks
4     dfl_h128     size        3         bilinear, doubled working resolution
====  ===========  ==========  ========  ===========================================

Compression tiers approximate H.264 quality levels with JPEG-style 8x8 DCT
quantization.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import fft, ndimage

FAMILY_NAMES = ("faceswap", "lightweight", "iae", "dfaker", "dfl_h128")
COMPRESSION_LEVELS = ("none", "hq", "lq")
COMPRESSION_QUALITY = {"hq": 90, "lq": 30}
CHECKER_TAP = 0.42

_FAMILIES = {
    0: dict(work=0.5, stages=3, up="bilinear"),
    1: dict(work=0.5, stages=3, up="nearest"),
    2: dict(work=0.5, stages=4, up="bilinear", mix=True),
    3: dict(work=0.5, stages=4, up="checker", residual=3),
    4: dict(work=1.0, stages=3, up="bilinear"),
}

# standard JPEG luminance table
_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class SynthError(ValueError):
    pass


class FrameFormatError(ValueError):
    """Unreadable pixmap, clip directory or manifest."""


@dataclass
class Clip:
    frames: np.ndarray  # (T, C, H, W) in [0, 1]
    label: int = -1
    family: int = -1
    compression: str = "none"
    seed: int = 0
    region: np.ndarray | None = None  # (T, H, W) soft face mask in [0, 1]

    def replace(self, **changes):
        d = dict(frames=self.frames, label=self.label, family=self.family,
                 compression=self.compression, seed=self.seed, region=self.region)
        d.update(changes)
        return Clip(**d)


# ---------------------------------------------------------------------------
# Base content
# ---------------------------------------------------------------------------


def make_base_clip(rng, frames=10, size=32):
    """Smooth, temporally coherent face-like clip with values in [0, 1]."""
    if size < 16 or frames < 1:
        raise SynthError("base clips need size >= 16 and at least one frame")
    skin = np.array([0.80, 0.60, 0.48]) + rng.uniform(-0.12, 0.12, size=3)
    grad_dir = rng.uniform(0, 2 * np.pi)
    grad_amp = rng.uniform(0.05, 0.15)
    eye_y = rng.uniform(0.35, 0.45)
    eye_dx = rng.uniform(0.15, 0.22)
    eye_r = rng.uniform(0.05, 0.08, size=2)
    mouth_y = rng.uniform(0.65, 0.75)
    mouth_w = rng.uniform(0.15, 0.25)
    mouth_h = rng.uniform(0.03, 0.05)
    dark = rng.uniform(0.25, 0.45)
    center_x = 0.5 + rng.uniform(-0.05, 0.05)
    # texture lives on a padded grid so it can be warped with the face
    tex = ndimage.gaussian_filter(rng.standard_normal((3, size * 2, size * 2)), sigma=(0, 1.2, 1.2))
    tex *= rng.uniform(0.05, 0.09) / (tex.std() + 1e-12)

    drift = rng.normal(0.0, 0.004, size=2)
    angle0 = rng.uniform(-0.05, 0.05)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size
    xx = (xx + 0.5) / size
    out = np.empty((frames, 3, size, size))
    region = np.empty((frames, size, size))
    for t in range(frames):
        jitter = rng.normal(0.0, 0.003, size=2)
        ang = angle0 + rng.normal(0.0, 0.005)
        scale = 1.0 + rng.normal(0.0, 0.004)
        dy, dx = drift * t + jitter
        # inverse-map output pixel coordinates into face coordinates
        cy, cx = yy - 0.5 - dy, xx - 0.5 - dx
        c, s = np.cos(ang), np.sin(ang)
        fy = (c * cy - s * cx) / scale + 0.5
        fx = (s * cy + c * cx) / scale + 0.5
        shade = 1.0 + grad_amp * ((fx - 0.5) * np.cos(grad_dir) + (fy - 0.5) * np.sin(grad_dir))
        feat = np.zeros_like(fy)
        for side, r in zip((-1, 1), eye_r):
            d2 = ((fx - center_x - side * eye_dx) ** 2 + (fy - eye_y) ** 2) / r ** 2
            feat = np.maximum(feat, np.exp(-d2))
        mouth = np.exp(-((fx - center_x) / mouth_w) ** 4 - ((fy - mouth_y) / mouth_h) ** 2)
        feat = np.maximum(feat, mouth)
        d2 = ((fx - center_x) / 0.3) ** 2 + ((fy - 0.55) / 0.38) ** 2
        edge = np.clip((1.0 - d2) / 0.35, 0.0, 1.0)
        region[t] = edge * edge * (3.0 - 2.0 * edge)
        coords = np.stack([fy * size + size / 2 - 0.5, fx * size + size / 2 - 0.5])
        for ch in range(3):
            base = skin[ch] * shade * (1.0 - (1.0 - dark) * feat)
            texture = ndimage.map_coordinates(tex[ch], coords, order=1, mode="reflect")
            out[t, ch] = base + texture
    return Clip(np.clip(out, 0.0, 1.0), region=region)


# ---------------------------------------------------------------------------
# Decoder families
# ---------------------------------------------------------------------------


def _area_down(x, f):
    if f == 1:
        return x
    c, h, w = x.shape
    return x.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))


def _up_nearest(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_bilinear(x):
    # half-pixel aligned x2, edge clamped: taps 0.75/0.25
    def along(a, axis):
        prev = np.concatenate([np.take(a, [0], axis=axis), np.take(a, range(a.shape[axis] - 1), axis=axis)], axis=axis)
        nxt = np.concatenate([np.take(a, range(1, a.shape[axis]), axis=axis), np.take(a, [-1], axis=axis)], axis=axis)
        even = 0.75 * a + 0.25 * prev
        odd = 0.75 * a + 0.25 * nxt
        shape = list(a.shape)
        shape[axis] *= 2
        out = np.empty(shape, dtype=a.dtype)
        sl_even = [slice(None)] * a.ndim
        sl_odd = [slice(None)] * a.ndim
        sl_even[axis] = slice(0, None, 2)
        sl_odd[axis] = slice(1, None, 2)
        out[tuple(sl_even)] = even
        out[tuple(sl_odd)] = odd
        return out

    return along(along(x, 1), 2)


def _up_checker(x, tap=CHECKER_TAP):
    """Transposed-conv style x2 upsampling with uneven kernel overlap."""
    c, h, w = x.shape
    z = np.zeros((c, 2 * h, 2 * w))
    z[:, ::2, ::2] = x
    k1 = np.array([tap, 1.0, tap])
    k = np.outer(k1, k1)
    k /= ((1 + 2 * tap) ** 2) / 4.0  # unit mean gain
    # mirror keeps the zero-stuffed neighbour at the border (no edge gain)
    return ndimage.correlate(z, k[None], mode="mirror")


_UPSAMPLERS = {"bilinear": _up_bilinear, "nearest": _up_nearest, "checker": _up_checker}


def family_kernel(family):
    """Fixed near-identity 3x3 smoothing kernel derived from the family id."""
    rng = np.random.default_rng(1000 + family)
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    k += 0.15 * rng.uniform(-1.0, 1.0, size=(3, 3)) + 0.1
    return k / k.sum()


def decode_frame(frame, family):
    """Encoder/decoder round trip of one ``(C, H, W)`` frame."""
    spec = _FAMILIES[family]
    c, size, _ = frame.shape
    work = int(size * spec["work"])
    up = _UPSAMPLERS[spec["up"]]
    kern = family_kernel(family)[None]
    y = _area_down(frame, size // work)
    for _ in range(spec["stages"] - 1):
        y = ndimage.correlate(up(y), kern, mode="nearest")
        y = _area_down(y, 2)
    for _ in range(spec.get("residual", 0)):
        y = y + 0.5 * (ndimage.uniform_filter(y, size=(1, 3, 3), mode="nearest") - y)
    y = ndimage.correlate(up(y), kern, mode="nearest")
    if 2 * work > size:
        y = _area_down(y, 2 * work // size)
    if spec.get("mix"):
        shifted = np.roll(np.roll(y, 1, axis=0), 1, axis=2)
        y = 0.7 * y + 0.3 * shifted
    return y


def apply_decoder_family(clip, family, strength=1.0, frame_weights=None, localized=False):
    """Blend the family's decoded frames with the input at ``strength``.

    ``frame_weights`` scales the blend per frame; with ``localized`` the
    decoded content is pasted through the clip's soft face region, as a face
    swap only replaces the face.
    """
    if family not in _FAMILIES:
        raise SynthError(f"unknown decoder family {family!r}")
    if not 0.0 <= strength <= 1.0:
        raise SynthError("strength must lie in [0, 1]")
    frames = clip.frames
    n = frames.shape[0]
    w = np.ones(n) if frame_weights is None else np.asarray(frame_weights, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any() or (w > 1).any():
        raise SynthError("frame_weights must hold one value in [0, 1] per frame")
    blend = (strength * w)[:, None, None, None]
    if localized:
        if clip.region is None:
            raise SynthError("localized blending needs a clip with a face region")
        blend = blend * clip.region[:, None]
    decoded = np.stack([decode_frame(f, family) for f in frames])
    out = frames + blend * (decoded - frames)
    return clip.replace(frames=np.clip(out, 0.0, 1.0), family=family)


# ---------------------------------------------------------------------------
# Compression
# ---------------------------------------------------------------------------


def quant_table(quality):
    quality = int(np.clip(quality, 1, 100))
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.maximum(np.floor((_JPEG_LUMA * scale + 50) / 100), 1.0)


def _dct_quantize(plane, table):
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    p = np.pad(plane, ((0, ph), (0, pw)), mode="edge") * 255.0 - 128.0
    hb, wb = p.shape[0] // 8, p.shape[1] // 8
    blocks = p.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3)
    coef = fft.dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    rec = fft.idctn(coef, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(p.shape)
    return ((rec + 128.0) / 255.0)[:h, :w]


def apply_compression(clip, level):
    """``none`` is the identity; ``hq``/``lq`` quantize 8x8 DCT blocks per channel."""
    if level == "none":
        return clip.replace(compression="none")
    if level not in COMPRESSION_QUALITY:
        raise SynthError(f"unknown compression level {level!r}")
    table = quant_table(COMPRESSION_QUALITY[level])
    frames = clip.frames
    out = np.empty_like(frames)
    for t in range(frames.shape[0]):
        for ch in range(frames.shape[1]):
            out[t, ch] = _dct_quantize(frames[t, ch], table)
    return clip.replace(frames=np.clip(out, 0.0, 1.0), compression=level)


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------


def to_uint8(x):
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, frame):
    """Write a ``(3, H, W)`` frame in [0, 1] as binary P6."""
    arr = to_uint8(frame).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def write_pgm(path, image):
    """Write an ``(H, W)`` image in [0, 1] as binary P5."""
    arr = to_uint8(image)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


_NETPBM_HEADER = re.compile(rb"(P[56])(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)"
                            rb"(?:\s|#[^\n]*\n)+(\d+)\s")


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as fh:
        data = fh.read()
    m = _NETPBM_HEADER.match(data)
    if m is None or m.group(1) != magic:
        raise FrameFormatError(f"{path}: expected a binary {magic.decode()} image")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FrameFormatError(f"{path}: only maxval 255 is supported")
    body = data[m.end():]
    if len(body) != w * h * channels:
        raise FrameFormatError(f"{path}: expected {w * h * channels} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8), w, h


def read_ppm(path):
    """Read a P6 file as a ``(3, H, W)`` uint8 array."""
    body, w, h = _read_netpbm(path, b"P6", 3)
    return body.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path):
    body, w, h = _read_netpbm(path, b"P5", 1)
    return body.reshape(h, w).copy()


def save_clip(clip, directory):
    os.makedirs(directory, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        write_ppm(os.path.join(directory, f"frame_{t:03d}.ppm"), frame)


def load_clip_frames(directory):
    """Frames of a clip directory as ``(T, 3, H, W)`` uint8."""
    names = sorted(n for n in os.listdir(directory) if n.startswith("frame_") and n.endswith(".ppm"))
    if not names:
        raise FrameFormatError(f"no frame_*.ppm files in {directory}")
    return np.stack([read_ppm(os.path.join(directory, n)) for n in names])


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    num_classes: int = 5
    clips_per_class: int = 20
    frames: int = 10
    size: int = 32
    compression_mix: dict = field(default_factory=lambda: {"none": 1.0})
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    strength: float = 1.0
    localized: bool = True
    weak_frame_prob: float = 0.5
    weak_frame_weight: float = 0.2
    seed: int = 0

    def validate(self):
        if not 2 <= self.num_classes <= len(FAMILY_NAMES):
            raise SynthError(f"num_classes must lie in [2, {len(FAMILY_NAMES)}]")
        if self.clips_per_class < 2:
            raise SynthError("each class needs at least two clips (one per split)")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise SynthError("split fractions must sum to 1")
        if not 0 < self.train_fraction < 1:
            raise SynthError("train_fraction must lie strictly between 0 and 1")
        if set(self.compression_mix) - set(COMPRESSION_LEVELS):
            raise SynthError(f"compression levels must be among {COMPRESSION_LEVELS}")
        if abs(sum(self.compression_mix.values()) - 1.0) > 1e-9 or min(self.compression_mix.values()) < 0:
            raise SynthError("compression mix fractions must be non-negative and sum to 1")
        if not 0.0 <= self.weak_frame_prob < 1.0 or not 0.0 <= self.weak_frame_weight <= 1.0:
            raise SynthError("weak_frame_prob must lie in [0, 1) and weak_frame_weight in [0, 1]")
        if self.size < 16 or self.size % 8:
            raise SynthError("size must be a multiple of 8 and at least 16")

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ClipRecord:
    id: str
    dir: str
    label: int
    family: int
    compression: str
    split: str
    seed: int


@dataclass
class DatasetManifest:
    records: list
    seed: int = 0
    config_hash: str = ""
    root: str = ""

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def labels(self, split=None):
        recs = self.records if split is None else self.split(split)
        return np.array([r.label for r in recs], dtype=np.int64)

    @property
    def num_classes(self):
        return int(max(r.label for r in self.records)) + 1

    def to_text(self):
        lines = [f"# seed={self.seed}", f"# config={self.config_hash}"]
        for r in self.records:
            lines.append("\t".join([r.id, r.dir, str(r.label), str(r.family), r.compression, r.split, str(r.seed)]))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text, root=""):
        records, seed, chash = [], 0, ""
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key == "seed":
                    seed = int(value)
                elif key == "config":
                    chash = value
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise FrameFormatError(f"manifest line {lineno}: expected 7 tab-separated fields")
            rid, d, label, fam, comp, split, s = parts
            records.append(ClipRecord(rid, d, int(label), int(fam), comp, split, int(s)))
        return cls(records, seed, chash, root)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), root=os.path.dirname(os.path.abspath(path)))

    def clip_path(self, record):
        return os.path.join(self.root, record.dir)

    def load_frames(self, record):
        """Stored frames of ``record`` as ``(T, C, H, W)`` uint8."""
        return load_clip_frames(self.clip_path(record))

    def load_clip(self, record):
        return Clip(self.load_frames(record).astype(np.float64) / 255.0, record.label, record.family,
                    record.compression, record.seed)


def clip_seed(master, label, index):
    return int(np.random.SeedSequence([master, label, index]).generate_state(1)[0])


def frame_weights(rng, spec):
    """Per-frame manipulation weights: weak frames with probability ``weak_frame_prob``.

    At least one frame always carries the full fingerprint.
    """
    weak = rng.random(spec.frames) < spec.weak_frame_prob
    weak[rng.integers(spec.frames)] = False
    return np.where(weak, spec.weak_frame_weight, 1.0)


def synthesize_clip(spec, label, seed, compression):
    """Regenerate one clip from its seed (quantized to 8 bits like the stored frames)."""
    rng = np.random.default_rng(seed)
    clip = make_base_clip(rng, spec.frames, spec.size)
    clip = apply_decoder_family(clip, label, spec.strength, frame_weights(rng, spec), spec.localized)
    clip = apply_compression(clip, compression)
    frames = to_uint8(clip.frames).astype(np.float64) / 255.0
    return clip.replace(frames=frames, label=label, seed=seed)


def resynthesize(spec, records, compression):
    """Regenerate ``records`` from their seeds at another compression level.

    Content, family and per-frame weights are identical to the stored clips,
    so accuracies at different levels are paired comparisons.
    """
    return {r.id: synthesize_clip(spec, r.label, r.seed, compression) for r in records}


def _assign(n, fractions, rng):
    """Exact-count assignment of ``n`` items to categories, seeded order."""
    names = list(fractions)
    counts = [int(np.floor(fractions[k] * n + 1e-9)) for k in names]
    rest = n - sum(counts)
    order = sorted(range(len(names)), key=lambda i: -(fractions[names[i]] * n - counts[i]))
    for i in order[:rest]:
        counts[i] += 1
    labels = [k for k, c in zip(names, counts) for _ in range(c)]
    return [labels[i] for i in rng.permutation(n)]


def generate_dataset(spec, out_dir=None):
    """Build the dataset; returns ``(manifest, clips)`` with clips keyed by record id.

    When ``out_dir`` is given, frames are written as PPM files under
    ``out_dir/clips/<id>/`` and the manifest as ``out_dir/manifest.tsv``.
    """
    spec.validate()
    records, clips = [], {}
    for label in range(spec.num_classes):
        n = spec.clips_per_class
        rng = np.random.default_rng([spec.seed, label, 7])
        n_train = int(round(spec.train_fraction * n))
        n_train = min(max(n_train, 1), n - 1)
        split_order = rng.permutation(n)
        splits = np.empty(n, dtype=object)
        splits[split_order[:n_train]] = "train"
        splits[split_order[n_train:]] = "test"
        comps = _assign(n, spec.compression_mix, rng)
        for i in range(n):
            seed = clip_seed(spec.seed, label, i)
            rid = f"c{label}_{i:04d}"
            clip = synthesize_clip(spec, label, seed, comps[i])
            rec = ClipRecord(rid, os.path.join("clips", rid), label, label, comps[i], str(splits[i]), seed)
            records.append(rec)
            clips[rid] = clip
            if out_dir is not None:
                save_clip(clip, os.path.join(out_dir, rec.dir))
    manifest = DatasetManifest(records, spec.seed, spec.digest(), out_dir or "")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        manifest.save(os.path.join(out_dir, "manifest.tsv"))
        with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
            json.dump(spec.to_dict(), fh, sort_keys=True, indent=1)
    return manifest, clips
