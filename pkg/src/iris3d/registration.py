"""Point-set registration: thin-plate splines, TPS-RPM with deterministic
annealing and softassign, the 24-permutation correspondence repair for
4-point sets, and the rigid Umeyama fit.

The recovered transform is restricted to 9 DoF (translation, rotation,
anisotropic scale): whenever the decomposed shear reaches 0.1 the repair
searches all one-to-one correspondences for a skew-free fit and fails
loudly when none exists.
"""

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .camera import skew_of
from .errors import CameraError, DegenerateInputError, NoRestrictedTransformError

SKEW_THRESHOLD = 0.1
CDIST_EARLY_EXIT = 0.15


@dataclass(frozen=True)
class AnnealingConfig:
    rate: float = 0.93
    final_fraction: float = 0.01  # T_final = T0 * final_fraction
    iterations_per_temperature: int = 5
    lambda1: float = 1.0
    lambda2: float = 0.01
    softassign_tol: float = 1e-6
    softassign_max_sweeps: int = 5000
    skew_threshold: float = SKEW_THRESHOLD
    cdist_early_exit: float = CDIST_EARLY_EXIT
    parallel_repair: bool = True


# ---------------------------------------------------------------------------
# Thin-plate splines
# ---------------------------------------------------------------------------


def tps_kernel(r, dimension: int):
    """Radial kernel: r^2 log r in 2D (0 at r = 0), -r in 3D."""
    r = np.asarray(r, dtype=float)
    if dimension == 2:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(r > 0.0, r * r * np.log(np.where(r > 0.0, r, 1.0)), 0.0)
        return out if out.ndim else float(out)
    if dimension == 3:
        out = -r
        return out if out.ndim else float(out)
    raise DegenerateInputError(f"unsupported control-point dimension {dimension}")


def _kernel_matrix(a: np.ndarray, b: np.ndarray, dimension: int) -> np.ndarray:
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return tps_kernel(d, dimension)


class TpsSpline:
    """f(p) = [1, p] @ affine + U(|controls - p|) @ warp."""

    def __init__(self, controls: np.ndarray, warp: np.ndarray, affine: np.ndarray):
        self.controls = controls
        self.warp = warp  # (n, M)
        self.affine = affine  # (D+1, M)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        phi = _kernel_matrix(points, self.controls, self.controls.shape[1])
        ones = np.ones((len(points), 1))
        return np.hstack([ones, points]) @ self.affine + phi @ self.warp


def tps_fit(controls: np.ndarray, targets: np.ndarray, lam: float = 0.0) -> TpsSpline:
    """Solve L (W | A) = (Y | 0) with L = [[K + lam I, P], [P^T, 0]]."""
    controls = np.asarray(controls, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    n, dim = controls.shape
    if n < dim + 1:
        raise DegenerateInputError(f"need at least {dim + 1} control points, got {n}")
    k = _kernel_matrix(controls, controls, dim) + lam * np.eye(n)
    p = np.hstack([np.ones((n, 1)), controls])
    zero = np.zeros((dim + 1, dim + 1))
    lmat = np.block([[k, p], [p.T, zero]])
    rhs = np.vstack([targets, np.zeros((dim + 1, targets.shape[1]))])
    try:
        sol = np.linalg.solve(lmat, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInputError("degenerate control-point configuration") from exc
    return TpsSpline(controls, sol[:n], sol[n:])


# ---------------------------------------------------------------------------
# Softassign
# ---------------------------------------------------------------------------


def softassign_update(
    transformed: np.ndarray,
    targets: np.ndarray,
    temperature: float,
    tol: float = 1e-6,
    max_sweeps: int = 5000,
) -> np.ndarray:
    """Fuzzy correspondence matrix at the given temperature.

    m_ai = (1/T) exp(-|x_i - f(v_a)|^2 / 2T), then alternating row/column
    normalization toward a doubly stochastic matrix. Underflowed rows are
    re-seeded uniform.
    """
    if temperature <= 0:
        raise DegenerateInputError("temperature must be positive")
    diff = transformed[:, None, :] - targets[None, :, :]
    d2 = np.einsum("aik,aik->ai", diff, diff)
    m = np.exp(-d2 / (2.0 * temperature)) / temperature
    dead = m.sum(axis=1) == 0.0
    if dead.any():
        m[dead] = 1.0 / m.shape[1]
    return kernels.sinkhorn_normalize(m, tol, max_sweeps)


# ---------------------------------------------------------------------------
# TPS-RPM
# ---------------------------------------------------------------------------


@dataclass
class RegistrationResult:
    matrix: np.ndarray  # (4, 4)
    correspondence: np.ndarray  # source index a -> target index
    skew: float
    c_dist: float
    repaired: bool = False
    permutations_evaluated: int = 0
    early_exit: bool = False


def _validate_point_sets(v: np.ndarray, x: np.ndarray):
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    if v.ndim != 2 or x.ndim != 2 or v.shape[1] != 3 or x.shape[1] != 3:
        raise DegenerateInputError("point sets must be (N, 3)")
    if not (np.isfinite(v).all() and np.isfinite(x).all()):
        raise DegenerateInputError("point sets contain non-finite coordinates")
    if len(v) != len(x):
        raise DegenerateInputError(
            f"source and target must have equal point counts, got {len(v)} and {len(x)}"
        )
    if len(v) < 3:
        raise DegenerateInputError("need at least 3 points per set")
    sv = np.linalg.svd(v - v.mean(axis=0), compute_uv=False)
    if sv[2] < 1e-9 * max(sv[0], 1e-30) or sv[0] == 0.0:
        raise DegenerateInputError("source points are collinear or coplanar")
    return v, x


def _affine_fit(v: np.ndarray, x_corr: np.ndarray) -> np.ndarray:
    """Exact least-squares affine map v -> x_corr as a 4x4 matrix."""
    aug = np.hstack([v, np.ones((len(v), 1))])
    sol, *_ = np.linalg.lstsq(aug, x_corr, rcond=None)
    m = np.eye(4)
    m[:3, :3] = sol[:3].T
    m[:3, 3] = sol[3]
    return m


def apply_transform(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return points @ m[:3, :3].T + m[:3, 3]


def _c_dist(m: np.ndarray, v: np.ndarray, x_corr: np.ndarray, x_diag: float) -> float:
    res = apply_transform(m, v) - x_corr
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))) / x_diag)


def _target_diag(x: np.ndarray) -> float:
    d = float(np.linalg.norm(x.max(axis=0) - x.min(axis=0)))
    return d if d > 0 else 1.0


def _skew(m: np.ndarray) -> float:
    try:
        return skew_of(m)
    except CameraError:
        return np.inf  # singular fit: never eligible as a restricted transform


def _anneal_correspondence(v: np.ndarray, x: np.ndarray, config: AnnealingConfig) -> np.ndarray:
    """Run the alternating softassign / spline-update schedule; returns the
    binarized correspondence (per-row argmax at the final temperature)."""
    n = len(v)
    t0 = float(np.max(np.sum((v[:, None, :] - x[None, :, :]) ** 2, axis=-1)))
    if t0 == 0.0:
        return np.arange(n)
    t_final = t0 * config.final_fraction

    v_aug = np.hstack([np.ones((n, 1)), v])
    q, r = np.linalg.qr(v_aug, mode="complete")
    q1, q2 = q[:, :4], q[:, 4:]
    r = r[:4, :4]
    if np.min(np.abs(np.diag(r))) < 1e-12:
        raise DegenerateInputError("degenerate source configuration")
    phi = _kernel_matrix(v, v, 3)
    eye4 = np.eye(4)

    d = eye4.copy()
    w = np.zeros((n, 4))
    m = None
    temp = t0
    while temp >= t_final:
        lam1 = config.lambda1 * (temp / t0)
        lam2 = config.lambda2 * (temp / t0)
        for _ in range(config.iterations_per_temperature):
            f_v = (v_aug @ d + phi @ w)[:, 1:]
            m = softassign_update(
                f_v, x, temp, config.softassign_tol, config.softassign_max_sweeps
            )
            d, w = _update_spline(m, v_aug, x, phi, q1, q2, r, lam1, lam2, eye4)
        temp *= config.rate
    return np.argmax(m, axis=1)


def _update_spline(m, v_aug, x, phi, q1, q2, r, lam1, lam2, eye4):
    rowsum = m.sum(axis=1)
    rowsum[rowsum == 0.0] = 1.0
    y = (m @ x) / rowsum[:, None]
    y_aug = np.hstack([np.ones((len(y), 1)), y])
    if q2.shape[1] > 0:
        a = q2.T @ phi @ q2
        gamma = np.linalg.solve(a + lam1 * np.eye(a.shape[0]), q2.T @ y_aug)
        w = q2 @ gamma
    else:
        w = np.zeros((len(y), 4))
    d = np.linalg.solve(r.T @ r + lam2 * eye4, r.T @ (q1.T @ (y_aug - phi @ w)) + lam2 * eye4)
    return d, w


def _fit_given_correspondence(
    v: np.ndarray, x: np.ndarray, corr: np.ndarray, x_diag: float
) -> tuple[np.ndarray, float, float]:
    """Fixed-correspondence fit: (matrix, skew, c_dist)."""
    x_corr = x[corr]
    m = _affine_fit(v, x_corr)
    return m, _skew(m), _c_dist(m, v, x_corr, x_diag)


def tpsrpm(v, x, config: AnnealingConfig = AnnealingConfig()) -> RegistrationResult:
    """Recover the 9-DoF transform mapping point set v onto point set x.

    Runs annealed TPS-RPM; when the resulting correspondence needs skew
    >= 0.1 the 24-permutation repair takes over (4-point sets only).
    """
    v, x = _validate_point_sets(v, x)
    x_diag = _target_diag(x)
    corr = _anneal_correspondence(v, x, config)
    matrix, skew, c_dist = _fit_given_correspondence(v, x, corr, x_diag)
    if skew < config.skew_threshold:
        return RegistrationResult(matrix, corr, skew, c_dist)
    if len(v) != 4:
        raise NoRestrictedTransformError(
            f"annealed correspondence needs skew {skew:.3f} and repair requires 4 points"
        )
    return repair_correspondence(v, x, config)


def repair_correspondence(v, x, config: AnnealingConfig = AnnealingConfig()) -> RegistrationResult:
    """Search all 4! = 24 one-to-one correspondences for the best skew-free
    fit, early-exiting once some fit has c_dist below 0.15.

    Evaluations may run concurrently with a mutex-guarded shared best
    record; the returned result always follows canonical permutation order
    (minimum c_dist so far, stopping at the first sub-threshold hit), so
    the outcome is deterministic regardless of scheduling.
    """
    v, x = _validate_point_sets(v, x)
    if len(v) != 4:
        raise DegenerateInputError("correspondence repair is defined for 4-point sets")
    x_diag = _target_diag(x)
    perms = [np.array(p) for p in itertools.permutations(range(4))]
    fits: list = [None] * len(perms)

    if config.parallel_repair:
        lock = threading.Lock()
        shared = {"c_dist": np.inf, "matrix": None}

        def evaluate(index):
            fit = _fit_given_correspondence(v, x, perms[index], x_diag)
            fits[index] = fit
            matrix, skew, c_dist = fit
            with lock:
                if skew < config.skew_threshold and c_dist < shared["c_dist"]:
                    shared["c_dist"] = c_dist
                    shared["matrix"] = matrix

        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(evaluate, range(len(perms))))

    evaluated = 0
    early = False
    best: RegistrationResult | None = None
    for index, perm in enumerate(perms):
        if fits[index] is None:  # sequential mode evaluates lazily
            fits[index] = _fit_given_correspondence(v, x, perm, x_diag)
        matrix, skew, c_dist = fits[index]
        evaluated += 1
        if skew < config.skew_threshold and (best is None or c_dist < best.c_dist):
            best = RegistrationResult(matrix, perm, skew, c_dist, repaired=True)
        if best is not None and best.c_dist < config.cdist_early_exit:
            early = True
            break

    if best is None:
        raise NoRestrictedTransformError(
            "no permutation admits a transform with skew below "
            f"{config.skew_threshold} (evaluated {evaluated} of 24)"
        )
    best.permutations_evaluated = evaluated
    best.early_exit = early
    return best


# ---------------------------------------------------------------------------
# Umeyama rigid fit (6 DoF, reflection-free)
# ---------------------------------------------------------------------------


def umeyama(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Optimal rigid transform (det(R) = +1) mapping source onto target
    under known correspondence."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise DegenerateInputError("point sets must be matching (N, 3) arrays")
    if len(source) < 3:
        raise DegenerateInputError("need at least 3 correspondences")
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    sc = source - mu_s
    if np.linalg.matrix_rank(sc, tol=1e-12 * max(1.0, np.abs(sc).max())) < 2:
        raise DegenerateInputError("source points are collinear or coincident")
    cov = (target - mu_t).T @ sc / len(source)
    u, _, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = mu_t - rot @ mu_s
    return m
