"""Time the compiled and pure-Python kernel backends on fusion-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from ensembleseg.kernels import get_backend

SHAPES = [(4, 64 * 64), (16, 128 * 128), (32, 128 * 128)]


def cases(rng, models, pixels):
    fg = rng.random((models, pixels))
    maps = rng.random((models, pixels * 2))
    w = rng.random(models)
    w /= w.sum()
    pred = (rng.random(pixels) < 0.5).astype(np.uint8)
    gt = (rng.random(pixels) < 0.5).astype(np.uint8)
    return {
        "consensus": lambda k: k.consensus(fg),
        "agreement_weights": lambda k: k.agreement_weights(fg, 0.5),
        "weighted_sum": lambda k: k.weighted_sum(maps, w),
        "confusion_counts": lambda k: k.confusion_counts(pred, gt),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {name: get_backend(name) for name in ("python", "cython")}
    print(f"{'kernel':<18} {'models x pixels':>16} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for models, pixels in SHAPES:
        for name, fn in cases(rng, models, pixels).items():
            ms = {b: min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) * 1e3
                  for b, k in backends.items()}
            print(f"{name:<18} {f'{models} x {pixels}':>16} {ms['python']:>10.3f} {ms['cython']:>10.3f} "
                  f"{ms['python'] / ms['cython']:>7.1f}x")


if __name__ == "__main__":
    main()
