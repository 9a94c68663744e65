"""Rasterizer backend shootout: compiled kernels vs the numpy fallback.

Times forward and forward+backward passes over a grid of scene sizes and
prints one table row per configuration.  Run from the repository root:

    python3 benchmarks/bench_rasterizer.py [--sizes 100,1000,5000]
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from conftest import make_camera, random_scene  # noqa: E402

from splatedit._backend import HAVE_NUMBA, use_backend  # noqa: E402
from splatedit.raster import RenderContext, UpstreamGrads, rasterize  # noqa: E402


def time_forward(scene, camera, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        rasterize(scene, camera)
        best = min(best, time.perf_counter() - t0)
    return best


def time_backward(scene, camera, repeats: int) -> float:
    h, w = camera.height, camera.width
    rng = np.random.default_rng(0)
    up = UpstreamGrads(
        rgb=rng.normal(size=(h, w, 3)),
        depth=np.zeros((h, w)),
        alpha=rng.normal(size=(h, w)),
        feature=rng.normal(size=(h, w, scene.embed_dim)),
    )
    best = float("inf")
    for _ in range(repeats):
        ctx = RenderContext(scene, camera)
        t0 = time.perf_counter()
        ctx.forward()
        ctx.backward(up)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="100,1000,5000",
                        help="comma-separated Gaussian counts")
    parser.add_argument("--side", type=int, default=128,
                        help="square image side in pixels")
    parser.add_argument("--repeats", type=int, default=3,
                        help="timing repeats; the best run is reported")
    args = parser.parse_args()

    sizes = [int(s) for s in args.sizes.split(",")]
    camera = make_camera(args.side, args.side, f=args.side * 0.8)
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    if not HAVE_NUMBA:
        print("numba unavailable; timing the numpy fallback only")

    rows = []
    for n in sizes:
        scene = random_scene(np.random.default_rng(42), n=n, embed_dim=4,
                             background=[0.1, 0.1, 0.1])
        timings = {}
        for backend in backends:
            with use_backend(backend):
                rasterize(scene, camera)  # warm-up / JIT compile
                timings[backend] = (time_forward(scene, camera,
                                                 args.repeats),
                                    time_backward(scene, camera,
                                                  args.repeats))
        rows.append((n, timings))

    header = f"{'gaussians':>10} {'pass':>10}"
    for backend in backends:
        header += f" {backend + ' (ms)':>12}"
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for n, timings in rows:
        for idx, label in ((0, "forward"), (1, "fwd+bwd")):
            line = f"{n:>10} {label:>10}"
            for backend in backends:
                line += f" {timings[backend][idx] * 1e3:>12.2f}"
            if len(backends) == 2:
                ratio = timings["numpy"][idx] / timings["numba"][idx]
                line += f" {ratio:>8.1f}x"
            print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
