"""Benchmark the compiled rasterizer kernel against the NumPy fallback.

Run:  python3 benchmarks/bench_rasterizer.py
"""

import time

import numpy as np

from splatgen.cameras import default_camera
from splatgen.splat import GaussianCloud, available_backends, render, render_backward
from splatgen.splat.backend import get_kernels


def make_cloud(rng, k):
    q = rng.normal(size=(k, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        np.column_stack(
            [rng.uniform(-0.6, 0.6, k), rng.uniform(-0.6, 0.6, k), rng.uniform(0.8, 3.0, k)]
        ),
        q, rng.uniform(0.02, 0.25, (k, 3)), rng.uniform(0.2, 0.9, k),
        rng.uniform(0, 1, (k, 1, 3)),
    )


def bench(fn, repeats=5):
    fn()  # warm up
    return min(
        (lambda t0: (fn(), time.perf_counter() - t0)[1])(time.perf_counter())
        for _ in range(repeats)
    )


def main():
    rng = np.random.default_rng(0)
    cam = default_camera()
    backends = available_backends()
    print(f"available backends: {backends}")
    header = f"{'K':>6} {'res':>6} {'pass':>8}"
    for b in backends:
        header += f" {b:>12}"
    if "cython" in backends and "numpy" in backends:
        header += f" {'speedup':>8}"
    print(header)
    for k, size in [(256, 32), (1024, 32), (4096, 32), (4096, 64), (16384, 64)]:
        cloud = make_cloud(rng, k)
        grad = rng.normal(size=(size, size, 3))
        results = {}
        for backend in backends:
            kernels = get_kernels(backend)
            results[backend, "forward"] = bench(
                lambda: render(cloud, cam, (size, size), kernels=kernels)
            )

            def fwd_bwd():
                _, ctx = render(cloud, cam, (size, size), want_ctx=True, kernels=kernels)
                render_backward(ctx, grad)

            results[backend, "fwd+bwd"] = bench(fwd_bwd)
        for phase in ("forward", "fwd+bwd"):
            row = f"{k:>6} {size:>4}px {phase:>8}"
            for b in backends:
                row += f" {results[b, phase] * 1e3:>10.2f}ms"
            if "cython" in backends and "numpy" in backends:
                row += f" {results['numpy', phase] / results['cython', phase]:>7.1f}x"
            print(row)


if __name__ == "__main__":
    main()
