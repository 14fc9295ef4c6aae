"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The first numba call (compilation) is excluded; it is reported separately.
"""

import argparse
import timeit

import numpy as np

from xviewgeo import kernels


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def cases(rng):
    a, c = unit_rows(rng, 64, 64), unit_rows(rng, 64, 64)
    img = rng.random((64, 64, 3))
    rows, cols = rng.uniform(0, 63, (32, 128)), rng.uniform(0, 63, (32, 128))
    sims = rng.random((512, 512))
    truth = rng.integers(0, 512, 512)
    keys = np.arange(512, dtype=np.int64)
    return {
        "contrastive_terms N=64 D=64": ("contrastive_terms", (a, c, np.eye(64, dtype=bool), 0.07)),
        "soft_triplet_terms N=64 D=64": ("soft_triplet_terms", (a, c)),
        "bilinear_sample 64x64 -> 32x128": ("bilinear_sample", (img, rows, cols, 0.0)),
        "truth_ranks 512x512": ("truth_ranks", (sims, truth, keys)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    print(f"{'kernel':34s} {'compile s':>10s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, (name, call_args) in cases(np.random.default_rng(0)).items():
        fast = getattr(kernels, f"{name}_numba")
        slow = getattr(kernels, f"{name}_numpy")
        compile_s = timeit.timeit(lambda: fast(*call_args), number=1)
        t_fast = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:34s} {compile_s:10.2f} {t_fast:10.3f} {t_slow:10.3f} {t_slow / t_fast:7.1f}x")


if __name__ == "__main__":
    main()
