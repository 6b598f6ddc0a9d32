"""Command line entry point.

Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import platform
import sys
import time

import numpy as np

from . import kernels
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, to_model
from .config import load_config, parse_config, parse_mix
from .evaluation import ablate, ablation_variants, evaluate, grad_cam, save_heatmaps, write_roc
from .model import ConfigError, attribute, build_model, count_params, estimate_flops, forward_batch
from .synth import (FAMILY_NAMES, DatasetManifest, DatasetSpec, FrameFormatError, SynthError, generate_dataset,
                    load_clip_frames)
from .tensor import NumericalError, no_record
from .training import SamplingError, TrainingError, preprocess, train

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _run_config(args):
    return load_config(args.config) if getattr(args, "config", None) else parse_config("")


def _load_manifest(path):
    mpath = os.path.join(path, "manifest.tsv") if os.path.isdir(path) else path
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no manifest at {mpath}")
    return DatasetManifest.load(mpath)


def _load_clip(path):
    return load_clip_frames(path).astype(np.float64) / 255.0


def cmd_synth(args, out):
    rc = _run_config(args)
    spec = rc.data
    changes = {}
    for attr, key in (("classes", "num_classes"), ("per_class", "clips_per_class"), ("frames", "frames"),
                      ("size", "size"), ("seed", "seed"), ("strength", "strength")):
        if getattr(args, attr) is not None:
            changes[key] = getattr(args, attr)
    if args.mix:
        try:
            changes["compression_mix"] = parse_mix(args.mix)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    spec = DatasetSpec(**{**spec.to_dict(), **changes})
    manifest, _ = generate_dataset(spec, args.out)
    out(f"wrote {len(manifest.records)} clips to {args.out} (seed {spec.seed}, config {spec.digest()})")
    return EXIT_OK


def cmd_train(args, out):
    rc = _run_config(args)
    manifest = _load_manifest(args.data)
    tcfg = rc.train if args.epochs is None else rc.train.replace(epochs=args.epochs)
    m = build_model(rc.model, tcfg.seed)
    os.makedirs(args.out, exist_ok=True)
    res = train(m, manifest, tcfg, log=out, history_path=os.path.join(args.out, "history.tsv"))
    save_checkpoint(res.checkpoint, os.path.join(args.out, "final.ckpt"))
    save_checkpoint(res.best, os.path.join(args.out, "best.ckpt"))
    out(f"final checkpoint {os.path.join(args.out, 'final.ckpt')} (best epoch {res.best_epoch})")
    return EXIT_OK


def cmd_eval(args, out):
    m = to_model(load_checkpoint(args.checkpoint))
    manifest = _load_manifest(args.data)
    rep = evaluate(m, manifest, args.split)
    names = list(FAMILY_NAMES[:m.config.num_classes])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rep.save(os.path.join(args.out, "report.txt"), class_names=names)
        for c, curve in enumerate(rep.curves):
            if curve is not None:
                write_roc(os.path.join(args.out, f"roc_class{c}.tsv"), curve)
    out(rep.to_text(class_names=names).rstrip())
    return EXIT_OK


def cmd_attribute(args, out):
    m = to_model(load_checkpoint(args.checkpoint))
    frames = _load_clip(args.clip)
    cls, probs = attribute(m, preprocess(frames, m.config))
    name = FAMILY_NAMES[cls] if cls < len(FAMILY_NAMES) else str(cls)
    out(f"class {cls} {name} {probs[cls]:.6f}")
    out("probabilities " + " ".join(f"{p:.6f}" for p in probs))
    return EXIT_OK


def cmd_gradcam(args, out):
    m = to_model(load_checkpoint(args.checkpoint))
    cams = grad_cam(m, _load_clip(args.clip), args.target)
    paths = save_heatmaps(cams, args.out, upscale=args.upscale)
    out(f"wrote {len(paths)} heatmaps to {args.out}")
    return EXIT_OK


def cmd_ablate(args, out):
    rc = _run_config(args)
    manifest = _load_manifest(args.data)
    tcfg = rc.train if args.epochs is None else rc.train.replace(epochs=args.epochs)
    table = ablate(manifest, ablation_variants(rc.model), tcfg)
    text = f"# seed={tcfg.seed}\n# config={rc.digest()}\n" + table.to_text()
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    out(text.rstrip())
    return EXIT_OK


def cmd_gradcheck(args, out):
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed)
    worst = 0.0
    for r in results:
        worst = max(worst, r.max_rel_error)
        out(f"{r.mode:8s} bn={'train' if r.bn_training else 'eval ':5s} max_rel_error={r.max_rel_error:.3e} "
            f"zero_grad_abs={r.max_abs_zero_grad:.1e} coords={r.coords} {r.seconds:.1f}s "
            f"{'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    out(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def machine_descriptor():
    return (f"{platform.machine()} {platform.processor() or 'cpu'} cores={os.cpu_count()} "
            f"python={platform.python_version()} numpy={np.__version__} kernels={kernels.BACKEND}")


def bench_report(m, clips, repeats=1):
    """Parameter count, FLOPs and per-clip eval-mode timing over ``clips``."""
    times = []
    with no_record():
        forward_batch(m, clips[0][None], training=False)  # warm-up
        for x in clips:
            for _ in range(repeats):
                start = time.perf_counter()
                forward_batch(m, x[None], training=False)
                times.append(time.perf_counter() - start)
    t = np.array(times)
    cfg = m.config
    return {
        "params": count_params(m),
        "flops_per_clip": estimate_flops(m),
        "input": f"{cfg.frames}x{cfg.channels}x{cfg.image_size}x{cfg.image_size}",
        "clips": len(clips),
        "seconds_mean": float(t.mean()),
        "seconds_median": float(np.median(t)),
        "seconds_std": float(t.std()),
        "machine": machine_descriptor(),
    }


def cmd_bench(args, out):
    if args.checkpoint:
        m = to_model(load_checkpoint(args.checkpoint))
    else:
        m = build_model(_run_config(args).model, 0)
    cfg = m.config
    if args.data:
        manifest = _load_manifest(args.data)
        recs = manifest.records[:args.clips]
        clips = [preprocess(manifest.load_frames(r).astype(np.float64) / 255.0, cfg) for r in recs]
    else:
        rng = np.random.default_rng(0)
        shape = (cfg.frames, cfg.channels, cfg.image_size, cfg.image_size)
        clips = [rng.uniform(-1, 1, size=shape).astype(cfg.dtype) for _ in range(args.clips)]
    if len(clips) < 1:
        raise FrameFormatError("no clips to benchmark")
    rep = bench_report(m, clips)
    out(f"params\t{rep['params']}")
    out(f"flops_per_clip\t{rep['flops_per_clip']}")
    out(f"input\t{rep['input']}")
    out(f"clips\t{rep['clips']}")
    out(f"seconds_per_clip_mean\t{rep['seconds_mean']:.6f}")
    out(f"seconds_per_clip_median\t{rep['seconds_median']:.6f}")
    out(f"seconds_per_clip_std\t{rep['seconds_std']:.6f}")
    out(f"machine\t{rep['machine']}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="fame", description="Spatio-temporal model attribution on synthetic face-swap clips.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", dest="per_class", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--strength", type=float)
    s.add_argument("--mix", help="compression mix, e.g. none:0.5,hq:0.25,lq:0.25")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a dataset")
    s.add_argument("--data", required=True, help="dataset directory or manifest path")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "test"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attribute", help="predict the generating family of one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", required=True, help="directory of frame_*.ppm files")
    s.set_defaults(func=cmd_attribute)

    s = sub.add_parser("gradcam", help="Grad-CAM heatmaps for one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", required=True)
    s.add_argument("--target", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--upscale", type=int, default=1)
    s.set_defaults(func=cmd_gradcam)

    s = sub.add_parser("ablate", help="train the four attention variants")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the toy model")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="parameters, FLOPs and inference time")
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--clips", type=int, default=20)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None, out=None, err=None):
    out = out or (lambda msg: print(msg, flush=True))
    err = err or (lambda msg: print(msg, file=sys.stderr, flush=True))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage().strip())
        return args.func(args, out)
    except UsageError as exc:
        err(str(exc))
        return EXIT_USAGE
    except (ConfigError, SynthError) as exc:
        err(f"config error: {exc}")
        return EXIT_CONFIG
    except (CheckpointError, FrameFormatError, SamplingError, FileNotFoundError, NotADirectoryError) as exc:
        err(f"data error: {exc}")
        return EXIT_DATA
    except (TrainingError, NumericalError, FloatingPointError) as exc:
        err(f"numerical error: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
