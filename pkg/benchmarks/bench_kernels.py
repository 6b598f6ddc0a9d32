"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints per-kernel best-of-N seconds for both backends, the speedup, and a
whole-model forward/backward timing on the desk-scale configuration.
"""

import argparse
import time

import numpy as np

from fame import _kernels_py, kernels
from fame import tensor as T
from fame.model import FameConfig, build_model, forward_batch, hybrid_loss


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def kernel_cases(n=320, c=8, size=32):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, size, size))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _kernels_py.im2col(xp, 3, 1, size, size)
    pooled, idx = _kernels_py.maxpool_forward(x, 2, 2, size // 2, size // 2)
    g = rng.standard_normal(pooled.shape)
    return {
        "im2col": lambda mod: mod.im2col(xp, 3, 1, size, size),
        "col2im": lambda mod: mod.col2im(cols, xp.shape, 3, 1, size, size),
        "maxpool_forward": lambda mod: mod.maxpool_forward(x, 2, 2, size // 2, size // 2),
        "maxpool_backward": lambda mod: mod.maxpool_backward(g, idx, x.shape),
    }


def model_step(backend, repeat):
    kernels.use_backend(backend)
    cfg = FameConfig(image_size=32, frames=10, stages=((8,), (16,), (32,)), lstm_hidden=16,
                     num_classes=5, precision="float32")
    m = build_model(cfg, 0)
    x = np.random.default_rng(0).uniform(-1, 1, size=(32, 10, 3, 32, 32)).astype(np.float32)
    y = np.arange(32) % 5

    def step():
        with T.Tape() as tape:
            loss = hybrid_loss(forward_batch(m, x, training=True), y, cfg)
        T.backward(loss, tape)
        m.zero_grad()

    return best_of(step, repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    compiled = kernels.compiled_module()
    if compiled is None:
        print("compiled extension not built; only the fallback is available")
    print(f"{'kernel':18s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for name, fn in kernel_cases().items():
        tp = best_of(lambda: fn(_kernels_py), args.repeat)
        if compiled is None:
            print(f"{name:18s} {tp:10.4f} {'-':>10s} {'-':>8s}")
            continue
        tc = best_of(lambda: fn(compiled), args.repeat)
        print(f"{name:18s} {tp:10.4f} {tc:10.4f} {tp / tc:7.2f}x")
    backends = ["python"] + (["compiled"] if compiled is not None else [])
    times = {b: model_step(b, max(1, args.repeat // 2)) for b in backends}
    line = "  ".join(f"{b}={t:.3f}s" for b, t in times.items())
    print(f"train step (32 clips, desk config): {line}")


if __name__ == "__main__":
    main()
