"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The jitted path is the default whenever numba imports; set
``IRIS3D_FORCE_NUMPY=1`` to select the pure-numpy fallback. Both
implementations of every kernel are importable regardless of the flag so
they can be benchmarked and cross-checked against each other
(``benchmarks/bench_kernels.py``).
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("IRIS3D_FORCE_NUMPY", "0") != "1"


# ---------------------------------------------------------------------------
# Triangle rasterization: z-buffered fill over pixel centers.
#
# Screen convention: u grows right, v grows up (origin at the bottom-left
# pixel corner). Raster row r samples v = H - r - 0.5, column c samples
# u = c + 0.5. Depth is interpolated perspective-correctly (linear in 1/z).
# ---------------------------------------------------------------------------


def fill_triangles_numpy(uv, z, index, zbuf, idxbuf):
    """Rasterize triangles into a shared z/index buffer pair.

    uv:     (T, 3, 2) projected vertex positions
    z:      (T, 3) camera-space depths (> 0)
    index:  (T,) attribute index written for covered pixels
    zbuf:   (H, W) float depth buffer, mutated in place
    idxbuf: (H, W) int attribute buffer, mutated in place
    """
    height, width = zbuf.shape
    for t in range(uv.shape[0]):
        u0, v0 = uv[t, 0]
        u1, v1 = uv[t, 1]
        u2, v2 = uv[t, 2]
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area == 0.0:
            continue
        cmin = max(int(np.floor(min(u0, u1, u2) - 0.5)), 0)
        cmax = min(int(np.ceil(max(u0, u1, u2) - 0.5)), width - 1)
        vmin = min(v0, v1, v2)
        vmax = max(v0, v1, v2)
        rmin = max(int(np.floor(height - vmax - 0.5)), 0)
        rmax = min(int(np.ceil(height - vmin - 0.5)), height - 1)
        if cmin > cmax or rmin > rmax:
            continue
        cols = np.arange(cmin, cmax + 1)
        rows = np.arange(rmin, rmax + 1)
        pu = cols[None, :] + 0.5
        pv = (height - rows - 0.5)[:, None]
        w0 = ((u1 - pu) * (v2 - pv) - (u2 - pu) * (v1 - pv)) / area
        w1 = ((u2 - pu) * (v0 - pv) - (u0 - pu) * (v2 - pv)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        inv_z = w0 / z[t, 0] + w1 / z[t, 1] + w2 / z[t, 2]
        inside &= inv_z > 0.0
        depth = np.full(inv_z.shape, np.inf)
        depth[inside] = 1.0 / inv_z[inside]
        patch_z = zbuf[rmin : rmax + 1, cmin : cmax + 1]
        patch_i = idxbuf[rmin : rmax + 1, cmin : cmax + 1]
        win = inside & (depth < patch_z)
        patch_z[win] = depth[win]
        patch_i[win] = index[t]


def _fill_triangles_loop(uv, z, index, zbuf, idxbuf):
    height, width = zbuf.shape
    for t in range(uv.shape[0]):
        u0 = uv[t, 0, 0]
        v0 = uv[t, 0, 1]
        u1 = uv[t, 1, 0]
        v1 = uv[t, 1, 1]
        u2 = uv[t, 2, 0]
        v2 = uv[t, 2, 1]
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area == 0.0:
            continue
        umin = min(u0, min(u1, u2))
        umax = max(u0, max(u1, u2))
        vmin = min(v0, min(v1, v2))
        vmax = max(v0, max(v1, v2))
        cmin = max(int(np.floor(umin - 0.5)), 0)
        cmax = min(int(np.ceil(umax - 0.5)), width - 1)
        rmin = max(int(np.floor(height - vmax - 0.5)), 0)
        rmax = min(int(np.ceil(height - vmin - 0.5)), height - 1)
        iz0 = 1.0 / z[t, 0]
        iz1 = 1.0 / z[t, 1]
        iz2 = 1.0 / z[t, 2]
        for r in range(rmin, rmax + 1):
            pv = height - r - 0.5
            for c in range(cmin, cmax + 1):
                pu = c + 0.5
                w0 = ((u1 - pu) * (v2 - pv) - (u2 - pu) * (v1 - pv)) / area
                if w0 < 0.0:
                    continue
                w1 = ((u2 - pu) * (v0 - pv) - (u0 - pu) * (v2 - pv)) / area
                if w1 < 0.0:
                    continue
                w2 = 1.0 - w0 - w1
                if w2 < 0.0:
                    continue
                inv_z = w0 * iz0 + w1 * iz1 + w2 * iz2
                if inv_z <= 0.0:
                    continue
                depth = 1.0 / inv_z
                if depth < zbuf[r, c]:
                    zbuf[r, c] = depth
                    idxbuf[r, c] = index[t]


# ---------------------------------------------------------------------------
# Softassign normalization: alternate row/column sums toward a doubly
# stochastic matrix, stopping once every row and column sum sits within
# tol of 1 (the constraint-violation measure) or after max_sweeps.
# ---------------------------------------------------------------------------


def sinkhorn_normalize_numpy(m, tol, max_sweeps):
    for _ in range(max_sweeps):
        col = m.sum(axis=0)
        col[col == 0.0] = 1.0
        m /= col[None, :]
        row = m.sum(axis=1)
        row[row == 0.0] = 1.0
        m /= row[:, None]
        if np.max(np.abs(m.sum(axis=0) - 1.0)) < tol:
            break
    return m


def _sinkhorn_normalize_loop(m, tol, max_sweeps):
    n, k = m.shape
    for _ in range(max_sweeps):
        for j in range(k):
            s = 0.0
            for i in range(n):
                s += m[i, j]
            if s == 0.0:
                s = 1.0
            for i in range(n):
                m[i, j] /= s
        for i in range(n):
            s = 0.0
            for j in range(k):
                s += m[i, j]
            if s == 0.0:
                s = 1.0
            for j in range(k):
                m[i, j] /= s
        delta = 0.0
        for j in range(k):
            s = 0.0
            for i in range(n):
                s += m[i, j]
            d = abs(s - 1.0)
            if d > delta:
                delta = d
        if delta < tol:
            break
    return m


# ---------------------------------------------------------------------------
# Gaussian-mixture L2 cross term.
#
# cross = sum_ij wa_i * wb_j * N(a_i - b_j; 0, (va + vb) I)   (isotropic)
# grad_b[j] = d(cross)/d(b_j)
# ---------------------------------------------------------------------------


def gmm_cross_term_numpy(a, wa, b, wb, var_sum):
    norm = (2.0 * np.pi * var_sum) ** -1.5
    diff = a[:, None, :] - b[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    g = norm * np.exp(-d2 / (2.0 * var_sum))
    wg = wa[:, None] * wb[None, :] * g
    cross = wg.sum()
    grad_b = np.einsum("ij,ijk->jk", wg, diff) / var_sum
    return cross, grad_b


def _gmm_cross_term_loop(a, wa, b, wb, var_sum):
    m = a.shape[0]
    n = b.shape[0]
    norm = (2.0 * np.pi * var_sum) ** -1.5
    inv2v = 1.0 / (2.0 * var_sum)
    cross = 0.0
    grad_b = np.zeros((n, 3))
    for j in range(n):
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for i in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            w = wa[i] * wb[j] * norm * np.exp(-d2 * inv2v)
            cross += w
            gx += w * dx
            gy += w * dy
            gz += w * dz
        grad_b[j, 0] = gx / var_sum
        grad_b[j, 1] = gy / var_sum
        grad_b[j, 2] = gz / var_sum
    return cross, grad_b


if _HAVE_NUMBA:
    fill_triangles_numba = njit(cache=True)(_fill_triangles_loop)
    sinkhorn_normalize_numba = njit(cache=True)(_sinkhorn_normalize_loop)
    gmm_cross_term_numba = njit(cache=True)(_gmm_cross_term_loop)
else:  # pragma: no cover
    fill_triangles_numba = _fill_triangles_loop
    sinkhorn_normalize_numba = _sinkhorn_normalize_loop
    gmm_cross_term_numba = _gmm_cross_term_loop

if USE_NUMBA:
    fill_triangles = fill_triangles_numba
    sinkhorn_normalize = sinkhorn_normalize_numba
    gmm_cross_term = gmm_cross_term_numba
else:
    fill_triangles = fill_triangles_numpy
    sinkhorn_normalize = sinkhorn_normalize_numpy
    gmm_cross_term = gmm_cross_term_numpy
