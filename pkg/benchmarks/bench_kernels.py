"""Time the compiled and numpy kernel backends on the desk-scale workload.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from collabdm.kernel import _backend, _pykernels


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases():
    rng = np.random.default_rng(0)
    # first and second encoder block on a batch of 512 real images
    for n, cin, cout, size in [(512, 1, 16, 16), (512, 16, 16, 8), (64, 16, 16, 8)]:
        x = rng.random((n, cin, size, size), dtype=np.float32)
        w = rng.standard_normal((cout, cin, 3, 3)).astype(np.float32)
        g = rng.standard_normal((n, cout, size, size)).astype(np.float32)
        label = f"n={n} {cin}->{cout} {size}x{size}"
        yield f"conv forward      {label}", lambda m: m.conv2d_forward(x, w, 1, 1)
        yield f"conv input grad   {label}", lambda m: m.conv2d_backward_input(g, w, size, size, 1, 1)
        yield f"conv weight grad  {label}", lambda m: m.conv2d_backward_weight(x, g, 3, 1, 1)
    bits = _pykernels.splitmix_fill(1, 0, 1 << 16)
    yield "splitmix 65536 words", lambda m: m.splitmix_fill(1, 0, 1 << 16)
    yield "box-muller 65536 normals", lambda m: m.box_muller(bits, 1 << 16)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    compiled = _backend.compiled
    print(f"{'kernel':48s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases():
        tp = timeit(lambda: fn(_pykernels), args.repeat) * 1e3
        if compiled is None:
            print(f"{name:48s} {tp:10.2f} {'n/a':>10s}")
            continue
        tc = timeit(lambda: fn(compiled), args.repeat) * 1e3
        print(f"{name:48s} {tp:10.2f} {tc:10.2f} {tp / tc:7.1f}x")
    if compiled is not None:
        print("dispatch: " + ", ".join(f"{k} -> numpy" for k in _backend.NUMPY_ALWAYS)
              + "; everything else compiled")


if __name__ == "__main__":
    main()
