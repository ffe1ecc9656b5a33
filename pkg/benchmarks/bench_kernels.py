"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--threads 1]

Prints a TSV table: kernel, shape, backend, best wall time and speedup.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from vitprune.arch import ArchSpec
from vitprune.model import init_model, predict_logits
from vitprune.tensor import backend


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    a = rng.standard_normal((64 * 197, 192))
    w = rng.standard_normal((192, 768))
    x = rng.standard_normal((64 * 197, 192))
    g, b = rng.standard_normal(192), rng.standard_normal(192)
    s = rng.standard_normal((64 * 3 * 197, 197))
    big = rng.standard_normal((512, 512))
    model = init_model(ArchSpec.vit(32, 4, 64, 4, 4, 4.0, 10), seed=0)
    imgs = rng.standard_normal((64, 3, 32, 32))
    return [
        ("matmul", "512x512 @ 512x512", lambda: backend.matmul(big, big)),
        ("matmul", "12608x192 @ 192x768", lambda: backend.matmul(a, w)),
        ("layer_norm", "12608x192", lambda: backend.layer_norm_forward(x, g, b, 1e-6)),
        ("softmax", "37824x197", lambda: backend.softmax(s)),
        ("gelu", "12608x192", lambda: backend.gelu(a)),
        ("forward", "ViT D=64 L=4, 64 images 32x32", lambda: predict_logits(model, imgs)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    if "compiled" not in backend.available():
        raise SystemExit("compiled extension is not built; run `pip install --no-build-isolation -e .`")
    backend.set_num_threads(args.threads)
    rng = np.random.default_rng(0)
    print("kernel\tshape\tpython_s\tcompiled_s\tspeedup")
    previous = backend.name()
    try:
        for kernel, shape, fn in cases(rng):
            t = {}
            for name in ("python", "compiled"):
                backend.use(name)
                t[name] = best_of(fn, args.repeat)
            print(f"{kernel}\t{shape}\t{t['python']:.4f}\t{t['compiled']:.4f}\t{t['python'] / t['compiled']:.2f}")
    finally:
        backend.use(previous)


if __name__ == "__main__":
    main()
