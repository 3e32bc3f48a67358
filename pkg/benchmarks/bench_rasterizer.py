"""Compare the compiled and pure-Python rasterizer backends.

Run from the repository root:

    python3 benchmarks/bench_rasterizer.py [--repeats 5]

Times the forward render and the backward pass on a few scene sizes
and prints the per-call medians plus the resulting speedup.
"""

import argparse
import statistics
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from splat4d import scene as sc
from splat4d.rasterizer import (RenderSettings, available_backends,
                                render_backward, render_forward)

SCENES = ((200, 64, 64), (1000, 128, 128), (5000, 256, 256))


def make_scene(n, width, height, seed):
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cloud = sc.GaussianCloud(
        (dirs * (0.4 * rng.uniform(0.2, 1.0, n)[:, None])).astype(
            np.float32),
        np.log(rng.uniform(0.02, 0.08, n)).astype(np.float32),
        rng.uniform(-2.0, 1.5, n).astype(np.float32),
        rng.normal(0.0, 0.3, (n, 3, sc.SH_COEFFS)).astype(np.float32))
    cam = sc.Camera(eye=np.array([0.0, 0.5, 2.2]), look_at=np.zeros(3),
                    up=np.array([0.0, 1.0, 0.0]), fov_y=45.0,
                    width=width, height=height,
                    background=np.array([0.1, 0.1, 0.1]))
    return cloud, cam


def median_time(fn, repeats):
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = available_backends()
    if backends == ["python"]:
        print("compiled backend unavailable; nothing to compare")

    header = f"{'scene':>18s}  {'pass':>8s}"
    for name in backends:
        header += f"  {name:>12s}"
    if len(backends) > 1:
        header += f"  {'speedup':>8s}"
    print(header)

    for n, width, height in SCENES:
        cloud, cam = make_scene(n, width, height, seed=n)
        d_image = np.ones((height, width, 3))
        for label in ("forward", "backward"):
            row = f"{f'{n}g {width}x{height}':>18s}  {label:>8s}"
            times = []
            for name in backends:
                settings = RenderSettings(backend=name)
                out = render_forward(cloud, cam, settings)
                if label == "forward":
                    fn = lambda: render_forward(cloud, cam, settings)
                else:
                    fn = lambda: render_backward(out.aux, d_image)
                t = median_time(fn, args.repeats)
                times.append(t)
                row += f"  {t * 1e3:10.2f}ms"
            if len(times) > 1:
                row += f"  {times[1] / times[0]:7.1f}x"
            print(row, flush=True)


if __name__ == "__main__":
    main()
