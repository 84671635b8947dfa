"""Benchmark the jitted kernels against their pure-numpy fallbacks.

Run: python benchmarks/bench_kernels.py
The same kernels drive the mask rasterizer, the softassign inner loop and
the mixture L2 objective; IRIS3D_FORCE_NUMPY=1 selects the numpy path at
import time in the package itself.
"""

import time

import numpy as np

from iris3d import kernels


def timeit(fn, *args, repeats=5, setup=None):
    best = np.inf
    for _ in range(repeats):
        prepared = setup() if setup else args
        t0 = time.perf_counter()
        fn(*prepared)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_fill_triangles():
    rng = np.random.default_rng(0)
    height, width = 180, 320
    n = 600
    uv = rng.uniform([0, 0], [width, height], size=(n, 3, 2))
    z = rng.uniform(0.5, 10.0, size=(n, 3))
    index = rng.integers(0, 8, n)

    def fresh():
        return (
            uv.copy(),
            z.copy(),
            index.copy(),
            np.full((height, width), np.inf),
            np.full((height, width), -1, dtype=np.int64),
        )

    # agreement check
    a = fresh()
    kernels.fill_triangles_numpy(*a)
    b = fresh()
    kernels.fill_triangles_numba(*b)
    assert np.array_equal(a[4], b[4]) and np.allclose(a[3], b[3])

    kernels.fill_triangles_numba(*fresh())  # compile
    t_np = timeit(kernels.fill_triangles_numpy, setup=fresh)
    t_nb = timeit(kernels.fill_triangles_numba, setup=fresh)
    print(f"fill_triangles   ({n} tris @ {width}x{height}): numpy {t_np*1e3:8.2f} ms"
          f"   numba {t_nb*1e3:8.2f} ms   speedup {t_np/t_nb:6.1f}x")


def bench_sinkhorn():
    rng = np.random.default_rng(1)
    m0 = np.exp(rng.normal(size=(64, 64)) * 8.0)  # sharp: needs many sweeps

    def fresh():
        return (m0.copy(), 1e-9, 2000)

    a = kernels.sinkhorn_normalize_numpy(*fresh())
    b = kernels.sinkhorn_normalize_numba(*fresh())
    assert np.allclose(a, b)

    kernels.sinkhorn_normalize_numba(*fresh())  # compile
    t_np = timeit(kernels.sinkhorn_normalize_numpy, setup=fresh)
    t_nb = timeit(kernels.sinkhorn_normalize_numba, setup=fresh)
    print(f"sinkhorn         (64x64, 2000 sweeps):        numpy {t_np*1e3:8.2f} ms"
          f"   numba {t_nb*1e3:8.2f} ms   speedup {t_np/t_nb:6.1f}x")


def bench_gmm_cross():
    rng = np.random.default_rng(2)
    a_means = rng.normal(size=(800, 3))
    b_means = rng.normal(size=(800, 3))
    wa = rng.uniform(0.1, 1.0, 800)
    wb = rng.uniform(0.1, 1.0, 800)
    args = (a_means, wa, b_means, wb, 0.05)

    ca, ga = kernels.gmm_cross_term_numpy(*args)
    cb, gb = kernels.gmm_cross_term_numba(*args)
    assert np.isclose(ca, cb) and np.allclose(ga, gb)

    t_np = timeit(kernels.gmm_cross_term_numpy, *args)
    t_nb = timeit(kernels.gmm_cross_term_numba, *args)
    print(f"gmm_cross_term   (800 x 800 components):      numpy {t_np*1e3:8.2f} ms"
          f"   numba {t_nb*1e3:8.2f} ms   speedup {t_np/t_nb:6.1f}x")


if __name__ == "__main__":
    print(f"active backend: {'numba' if kernels.USE_NUMBA else 'numpy'}")
    bench_fill_triangles()
    bench_sinkhorn()
    bench_gmm_cross()
