"""Compiled core vs pure-Python fallback on the hot kernels.

    python3 benchmarks/bench_kernels.py [--size 128] [--repeat 3]

Volume kernels run on a thresholded 128^3 sphere phantom; convolution runs one
forward + backward pass of an 8 -> 8 channel 3x3x3 layer at 64^3.
"""
import argparse
import time

import numpy as np

from nucleus3d import _pure, kernels
from nucleus3d.nn import Tensor
from nucleus3d.nn import functional as F
from nucleus3d.phantom import PhantomConfig, make_phantom_volumes
from nucleus3d.watershed import find_markers

try:
    from nucleus3d import _core
except ImportError:
    _core = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_step(impl, x, w, b):
    F.CONV_IMPL = impl
    xt, wt, bt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)
    y = F.conv3d(xt, wt, bt, 1, 1)
    y.backward(np.ones_like(y.data))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128, help="phantom edge length")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _core is None:
        raise SystemExit("compiled core not built; run `pip install -e . --no-build-isolation` first")

    n = args.size
    syn, ph = make_phantom_volumes(PhantomConfig(dims=(n, n, n), n=1000 * n ** 3 // 128 ** 3, seed=0))
    fg = syn >= 64
    dist = np.sqrt(kernels.squared_edt(fg))
    seeds, _ = find_markers(dist, fg)

    cases = {
        "label (26-conn)": lambda impl: kernels.label(fg, 26, impl=impl),
        "squared EDT": lambda impl: kernels.squared_edt(fg, impl=impl),
        "priority flood": lambda impl: kernels.flood(dist, seeds, fg, 26, impl=impl),
    }
    print(f"{'kernel':<22}{'cython s':>10}{'python s':>10}{'speedup':>9}")
    for name, fn in cases.items():
        tc = best_of(lambda: fn(_core), args.repeat)
        tp = best_of(lambda: fn(_pure), args.repeat)
        print(f"{name:<22}{tc:>10.3f}{tp:>10.3f}{tp / tc:>8.1f}x")

    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 8, 64, 64, 64))
    w = rng.normal(size=(8, 8, 3, 3, 3))
    b = rng.normal(size=8)
    saved = F.CONV_IMPL
    try:
        tc = best_of(lambda: conv_step("direct", x, w, b), args.repeat)
        tp = best_of(lambda: conv_step("im2col", x, w, b), args.repeat)
    finally:
        F.CONV_IMPL = saved
    print(f"{'conv3d fwd+bwd 8->8':<22}{tc:>10.3f}{tp:>10.3f}{tp / tc:>8.1f}x")


if __name__ == "__main__":
    main()
