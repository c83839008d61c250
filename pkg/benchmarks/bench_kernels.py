#!/usr/bin/env python3
"""Benchmark the compiled warp kernels against the numpy fallback.

Times the raw kernels on a few grid sizes and one full registration per
backend. The two backends are bit-identical; this script only compares
speed. Run from the repository root:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from atlaseg._kernels import _warp_np

try:
    from atlaseg._kernels import _warp_cy
except ImportError:
    _warp_cy = None


def time_call(fn, *args, repeats=30):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench_kernels():
    rows = []
    for size in (96, 192, 320):
        rng = np.random.default_rng(size)
        src = rng.normal(size=(size, size))
        dx = rng.uniform(-3, 3, size=(size, size))
        dy = rng.uniform(-3, 3, size=(size, size))
        for name, fn_np, fn_cy in (
            ("warp", _warp_np.warp_bilinear, getattr(_warp_cy, "warp_bilinear", None)),
            (
                "warp+grad",
                _warp_np.warp_with_gradient,
                getattr(_warp_cy, "warp_with_gradient", None),
            ),
        ):
            t_np = time_call(fn_np, src, dx, dy)
            t_cy = time_call(fn_cy, src, dx, dy) if fn_cy else None
            rows.append((f"{name} {size}x{size}", t_np, t_cy))
    return rows


def bench_registration():
    from atlaseg.phantom import PhantomParams, generate_case
    from atlaseg.registration import RegistrationConfig, register_pair
    import atlaseg._kernels as kernels

    params = PhantomParams(slices=1, seed=77)
    a = generate_case(params, 0)
    b = generate_case(params, 1)
    args = (a.image.slices[0], a.label.slices[0], b.image.slices[0], b.label.slices[0])
    cfg = RegistrationConfig()
    rows = []
    backends = [("numpy", _warp_np)]
    if _warp_cy is not None:
        backends.append(("cython", _warp_cy))
    for name, mod in backends:
        kernels.warp_bilinear = mod.warp_bilinear
        kernels.warp_with_gradient = mod.warp_with_gradient
        start = time.perf_counter()
        register_pair(*args, cfg)
        rows.append((name, time.perf_counter() - start))
    return rows


def main():
    if _warp_cy is None:
        print("compiled extension not available; timing the fallback only")
    print(f"{'kernel':<20}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for name, t_np, t_cy in bench_kernels():
        if t_cy:
            print(f"{name:<20}{1e3 * t_np:>12.3f}{1e3 * t_cy:>13.3f}{t_np / t_cy:>8.1f}x")
        else:
            print(f"{name:<20}{1e3 * t_np:>12.3f}{'-':>13}{'-':>9}")
    print()
    print("full 96x96 registration (three pyramid levels):")
    for name, secs in bench_registration():
        print(f"  {name:<8}{secs:.2f}s")


if __name__ == "__main__":
    main()
