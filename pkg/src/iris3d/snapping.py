"""Snap a roughly placed labeling element onto the scene.

Pipeline: decode the element and scene depth images to world point sets,
crop the scene around the element's AABB (+- 0.15 m), subsample, train a
one-class SVM on each set, convert the support vectors to isotropic
Gaussian mixtures, and minimize the closed-form L2 distance between the
mixtures over a rigid 6-DoF transform (applied about the world origin).

Depth matrices are read top-left, row by row: each row of the (u, v, z)
matrix holds the pixel column, pixel row and decoded depth in meters.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from sklearn.svm import OneClassSVM

from . import kernels
from .camera import (
    FAR_PLANE,
    CameraExtrinsics,
    CameraIntrinsics,
    back_project_points,
    decode_depth,
    quat_to_matrix,
)
from .errors import DegenerateInputError, NothingToSnapError, SolverError

MAX_DEPTH_PIXELS = 256 * 144
REDUCE_OFFSET = 0.15  # meters
BACKGROUND_THRESHOLD = 0.999  # decoded depth / far plane at or above is background


@dataclass(frozen=True)
class SnapConfig:
    nu: float = 0.3
    gamma: float | None = None  # None: 1 / (2 sigma^2), sigma = sigma_factor * crop diagonal
    sigma_factor: float = 0.02
    stage_multipliers: tuple = (6.0, 2.5, 1.0)  # coarse-to-fine kernel schedule
    offset: float = REDUCE_OFFSET
    max_points: int = 2000
    starts: int = 8
    start_angle_deg: float = 5.0
    seed: int = 0
    maxiter: int = 300


def depth_to_points(
    image: np.ndarray, k: CameraIntrinsics, e: CameraExtrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Decode a depth image into its (u, v, z) matrix and world points.

    Background pixels (at the far plane) are dropped from both outputs.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 4:
        raise DegenerateInputError("depth image must be (H, W, 4) RGBA")
    height, width = image.shape[:2]
    if height * width > MAX_DEPTH_PIXELS:
        raise DegenerateInputError(
            f"depth image exceeds the {MAX_DEPTH_PIXELS}-pixel cap: {width}x{height}"
        )
    depth = decode_depth(image)
    rows, cols = np.nonzero(depth / FAR_PLANE < BACKGROUND_THRESHOLD)
    order = np.lexsort((cols, rows))  # top-left, row by row
    rows, cols = rows[order], cols[order]
    z = depth[rows, cols]
    uvz = np.column_stack([cols.astype(float), rows.astype(float), z])
    if len(uvz) == 0:
        return uvz, np.empty((0, 3))
    k_img = k.scaled(width, height)
    pixels = np.column_stack([cols + 0.5, height - rows - 0.5])
    world = back_project_points(k_img, e, pixels, z)
    return uvz, world


def reduce_points(
    scene_points: np.ndarray, element_points: np.ndarray, offset: float = REDUCE_OFFSET
) -> np.ndarray:
    """Scene points inside the element AABB inflated by `offset` per axis."""
    element_points = np.asarray(element_points, dtype=float)
    if element_points.size == 0:
        raise NothingToSnapError("element point set is empty")
    scene_points = np.asarray(scene_points, dtype=float).reshape(-1, 3)
    lo = element_points.min(axis=0) - offset
    hi = element_points.max(axis=0) + offset
    inside = np.all((scene_points >= lo) & (scene_points <= hi), axis=1)
    kept = scene_points[inside]
    if len(kept) == 0:
        raise NothingToSnapError("nothing to snap to: crop around the element is empty")
    return kept


@dataclass
class FittedSvm:
    support_vectors: np.ndarray  # (m, 3)
    dual_coefs: np.ndarray  # (m,) positive
    gamma: float
    model: OneClassSVM


@dataclass
class GaussianMixture:
    means: np.ndarray  # (m, 3)
    weights: np.ndarray  # (m,) positive
    variance: float  # isotropic sigma^2 per component

    def density(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        diff = points[:, None, :] - self.means[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        norm = (2.0 * np.pi * self.variance) ** -1.5
        return (np.exp(-d2 / (2.0 * self.variance)) * norm) @ self.weights


def fit_one_class_svm(points: np.ndarray, nu: float, gamma: float, tol: float = 1e-3) -> FittedSvm:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 10:
        raise DegenerateInputError(f"need at least 10 points to train, got {len(points)}")
    if not 0.0 < nu <= 1.0:
        raise DegenerateInputError(f"nu must lie in (0, 1], got {nu}")
    model = OneClassSVM(kernel="rbf", nu=nu, gamma=gamma, tol=tol)
    model.fit(points)
    coefs = np.abs(model.dual_coef_.ravel())
    return FittedSvm(
        support_vectors=model.support_vectors_.copy(),
        dual_coefs=coefs,
        gamma=gamma,
        model=model,
    )


def svm_to_gmm(svm: FittedSvm) -> GaussianMixture:
    """One isotropic component per support vector, variance 1/(2 gamma)."""
    return GaussianMixture(
        means=svm.support_vectors,
        weights=svm.dual_coefs,
        variance=1.0 / (2.0 * svm.gamma),
    )


# ---------------------------------------------------------------------------
# L2 distance between mixtures under a rigid transform.
#
# theta = (qx, qy, qz, qw, tx, ty, tz); the rotation uses q / |q| so the
# analytic gradient matches finite differences at any (nonzero) q.
# ---------------------------------------------------------------------------


def _rotation_derivatives(q: np.ndarray):
    """R(q/|q|) and dR/dq_k (through the normalization), k = 0..3."""
    n = float(np.linalg.norm(q))
    if n == 0.0:
        raise DegenerateInputError("zero-length quaternion")
    u = q / n
    x, y, z, w = u
    rot = quat_to_matrix(u)
    d_unit = [
        np.array([[0, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]], dtype=float),
        np.array([[-4 * y, 2 * x, 2 * w], [2 * x, 0, 2 * z], [-2 * w, 2 * z, -4 * y]], dtype=float),
        np.array([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, 0]], dtype=float),
        np.array([[0, -2 * z, 2 * y], [2 * z, 0, -2 * x], [-2 * y, 2 * x, 0]], dtype=float),
    ]
    jac = np.eye(4) - np.outer(u, u)
    d_rot = [sum(d_unit[l] * (jac[k, l] / n) for l in range(4)) for k in range(4)]
    return rot, d_rot


def _self_term(g: GaussianMixture) -> float:
    cross, _ = kernels.gmm_cross_term(
        g.means, g.weights, g.means, g.weights, 2.0 * g.variance
    )
    return float(cross)


def l2_distance(
    fixed: GaussianMixture, moving: GaussianMixture, theta: np.ndarray
) -> tuple[float, np.ndarray]:
    """L2 distance between `fixed` and rigidly transformed `moving`, with
    the analytic gradient in theta."""
    theta = np.asarray(theta, dtype=float)
    q, t = theta[:4], theta[4:]
    rot, d_rot = _rotation_derivatives(q)
    moved = moving.means @ rot.T + t
    var_sum = fixed.variance + moving.variance
    cross, grad_moved = kernels.gmm_cross_term(
        fixed.means, fixed.weights, moved, moving.weights, var_sum
    )
    value = _self_term(fixed) + _self_term(moving) - 2.0 * cross
    grad = np.empty(7)
    outer = grad_moved.T @ moving.means  # (3, 3): sum_j grad_j mu_j^T
    for k in range(4):
        grad[k] = -2.0 * np.sum(d_rot[k] * outer)
    grad[4:] = -2.0 * grad_moved.sum(axis=0)
    return float(value), grad


def _identity_theta() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])


def _theta_to_matrix(theta: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = quat_to_matrix(theta[:4])
    m[:3, 3] = theta[4:]
    return m


def minimize_l2(
    fixed: GaussianMixture,
    moving: GaussianMixture,
    config: SnapConfig = SnapConfig(),
    theta0: np.ndarray | None = None,
) -> np.ndarray:
    """Quasi-Newton minimization: multi-start (identity plus small rotation
    perturbations) when no warm start is given. Returns the best theta."""
    if theta0 is not None:
        starts = [np.asarray(theta0, dtype=float)]
    else:
        rng = np.random.default_rng(config.seed)
        starts = [_identity_theta()]
        while len(starts) < config.starts:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = np.radians(config.start_angle_deg) * rng.uniform(0.3, 1.0)
            q = np.append(axis * np.sin(angle / 2.0), np.cos(angle / 2.0))
            starts.append(np.concatenate([q, np.zeros(3)]))

    best_value = np.inf
    best_theta = None
    for start in starts:
        res = minimize(
            lambda th: l2_distance(fixed, moving, th),
            start,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": config.maxiter},
        )
        if res.fun < best_value:
            best_value = float(res.fun)
            best_theta = res.x
    if best_theta is None:
        raise SolverError("L2 minimization failed from every start")
    return best_theta


def snap(
    scene_depth: np.ndarray,
    element_depth: np.ndarray,
    k: CameraIntrinsics,
    e: CameraExtrinsics,
    config: SnapConfig = SnapConfig(),
) -> np.ndarray:
    """Rigid 4x4 (world frame, applied about the origin) snapping the
    element onto the scene.

    The kernel width follows a coarse-to-fine schedule: the broadest stage
    runs the full multi-start search, later stages refine its optimum.
    """
    _, element_world = depth_to_points(element_depth, k, e)
    _, scene_world = depth_to_points(scene_depth, k, e)
    if len(element_world) == 0:
        raise NothingToSnapError("element depth image contains only background")
    scene_crop = reduce_points(scene_world, element_world, config.offset)

    rng = np.random.default_rng(config.seed)
    element_pts = _subsample(element_world, config.max_points, rng)
    scene_pts = _subsample(scene_crop, config.max_points, rng)

    if config.gamma is not None:
        base_gamma = config.gamma
    else:
        lo = element_world.min(axis=0) - config.offset
        hi = element_world.max(axis=0) + config.offset
        sigma = config.sigma_factor * float(np.linalg.norm(hi - lo))
        base_gamma = 1.0 / (2.0 * sigma * sigma)

    theta = None
    for multiplier in config.stage_multipliers:
        gamma = base_gamma / (multiplier * multiplier)  # sigma scaled by multiplier
        scene_gmm = svm_to_gmm(fit_one_class_svm(scene_pts, config.nu, gamma))
        element_gmm = svm_to_gmm(fit_one_class_svm(element_pts, config.nu, gamma))
        theta = minimize_l2(scene_gmm, element_gmm, config, theta0=theta)
    return _theta_to_matrix(theta)


def _subsample(points: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(points) <= cap:
        return points
    return points[rng.choice(len(points), size=cap, replace=False)]
