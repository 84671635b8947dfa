"""Mesh-less cuboid placement from 2D clicks.

Three clicked pixels are lifted onto rays from the camera center; the
distances between three picked points on the (known-size) cuboid pin down
where along each ray the object sits. The resulting nonlinear 3x3 system
is solved with a bound-constrained rectangular-trust-region dogleg method
and polished by Newton-Raphson, then a rigid Umeyama fit produces the
placement transform.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .camera import CameraExtrinsics, CameraIntrinsics, back_project
from .errors import DegenerateInputError, SolverError
from .registration import umeyama

_PAIRS = ((0, 1), (1, 2), (0, 2))


@dataclass
class RayProblem:
    origin: np.ndarray  # camera center O, (3,)
    rays: np.ndarray  # (3, 3) directions t_ci = c_i - O
    distances: np.ndarray  # (3,) target distances (d12, d23, d13)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.rays = np.asarray(self.rays, dtype=float).reshape(3, 3)
        self.distances = np.asarray(self.distances, dtype=float).reshape(3)
        norms = np.linalg.norm(self.rays, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError("zero-length ray direction")
        unit = self.rays / norms[:, None]
        for a, b in _PAIRS:
            if abs(unit[a] @ unit[b]) > 1.0 - 1e-12:
                raise DegenerateInputError(f"rays {a} and {b} are parallel")
        d12, d23, d13 = self.distances
        if np.any(self.distances <= 0.0):
            raise DegenerateInputError("target distances must be positive")
        if d12 + d23 < d13 or d12 + d13 < d23 or d23 + d13 < d12:
            raise DegenerateInputError("target distances violate the triangle inequality")


@dataclass
class SolverConfig:
    lower_bound: float = 1e-6
    initial_guess: np.ndarray = field(default_factory=lambda: np.ones(3))
    dogbox_tol: float = 1e-14
    dogbox_max_nfev: int = 2000
    newton_tol: float = 1e-10
    newton_max_iter: int = 50


def build_system(problem: RayProblem):
    """Squared-distance residuals and their analytic Jacobian.

    F_k(u) = |t_a u_a - t_b u_b|^2 - d_ab^2 over the pairs (0,1), (1,2),
    (0,2); the camera center cancels out of every difference.
    """
    t = problem.rays
    gram = t @ t.T
    d2 = problem.distances**2

    def residuals(u):
        u = np.asarray(u, dtype=float)
        out = np.empty(3)
        for k, (a, b) in enumerate(_PAIRS):
            out[k] = (
                u[a] * u[a] * gram[a, a]
                - 2.0 * u[a] * u[b] * gram[a, b]
                + u[b] * u[b] * gram[b, b]
                - d2[k]
            )
        return out

    def jacobian(u):
        u = np.asarray(u, dtype=float)
        jac = np.zeros((3, 3))
        for k, (a, b) in enumerate(_PAIRS):
            jac[k, a] = 2.0 * u[a] * gram[a, a] - 2.0 * u[b] * gram[a, b]
            jac[k, b] = 2.0 * u[b] * gram[b, b] - 2.0 * u[a] * gram[a, b]
        return jac

    return residuals, jacobian


def solve_dogbox(residuals, jacobian, config: SolverConfig = SolverConfig()) -> np.ndarray:
    """Bound-constrained dogleg solve; the lower bound keeps the box in
    front of the camera (rejecting the mirrored root)."""
    x0 = np.maximum(np.asarray(config.initial_guess, dtype=float), config.lower_bound)
    result = least_squares(
        residuals,
        x0,
        jac=jacobian,
        bounds=(config.lower_bound, np.inf),
        method="dogbox",
        xtol=config.dogbox_tol,
        ftol=config.dogbox_tol,
        gtol=config.dogbox_tol,
        max_nfev=config.dogbox_max_nfev,
    )
    initial_cost = float(np.sum(residuals(x0) ** 2))
    final_cost = float(np.sum(residuals(result.x) ** 2))
    if final_cost > initial_cost:
        raise SolverError("trust-region search failed to decrease the residual")
    return np.maximum(result.x, config.lower_bound)


def refine_newton(
    residuals,
    jacobian,
    u0: np.ndarray,
    config: SolverConfig = SolverConfig(),
) -> tuple[np.ndarray, bool]:
    """Newton-Raphson polish: u_{n+1} = u_n - J(u_n)^-1 F(u_n).

    Declines (returning u0 with flag False) on a singular Jacobian,
    three consecutive residual increases, a bound violation, or failure
    to reach tolerance: the dogleg answer is never made worse.
    """
    u = np.asarray(u0, dtype=float).copy()
    best_norm = float(np.max(np.abs(residuals(u))))
    if best_norm < config.newton_tol:
        return u, True
    growths = 0
    prev_norm = best_norm
    for _ in range(config.newton_max_iter):
        jac = jacobian(u)
        try:
            step = np.linalg.solve(jac, residuals(u))
        except np.linalg.LinAlgError:
            return np.asarray(u0, dtype=float), False
        u = u - step
        if np.any(u < config.lower_bound):
            return np.asarray(u0, dtype=float), False
        norm = float(np.max(np.abs(residuals(u))))
        if norm < config.newton_tol:
            return u, True
        if norm > prev_norm:
            growths += 1
            if growths >= 3:
                return np.asarray(u0, dtype=float), False
        else:
            growths = 0
        prev_norm = norm
    return np.asarray(u0, dtype=float), False


def solve_ray_problem(problem: RayProblem, config: SolverConfig = SolverConfig()):
    """Dogbox + Newton pipeline; returns (u, f points (3, 3), refined flag)."""
    residuals, jacobian = build_system(problem)
    u = solve_dogbox(residuals, jacobian, config)
    u, refined = refine_newton(residuals, jacobian, u, config)
    f = problem.origin[None, :] + problem.rays * u[:, None]
    return u, f, refined


def place_from_rays(
    points: np.ndarray,
    k: CameraIntrinsics,
    e: CameraExtrinsics,
    clicks: np.ndarray,
    config: SolverConfig = SolverConfig(),
) -> np.ndarray:
    """Rigid 4x4 mapping the three `points` onto the rays through `clicks`.

    Clicks are lifted to 3D at unit depth in the camera frame; any positive
    lift depth produces the same rays.
    """
    points = np.asarray(points, dtype=float).reshape(3, 3)
    clicks = np.asarray(clicks, dtype=float).reshape(3, 2)
    if len({tuple(c) for c in clicks.tolist()}) != 3:
        raise DegenerateInputError("clicks must be three distinct pixels")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[1] < 1e-12:
        raise DegenerateInputError("picked points are collinear")
    origin = e.camera_center
    lifted = np.stack([back_project(k, e, c, 1.0) for c in clicks])
    distances = np.array(
        [np.linalg.norm(points[a] - points[b]) for a, b in _PAIRS]
    )
    problem = RayProblem(origin=origin, rays=lifted - origin, distances=distances)
    _, f, _ = solve_ray_problem(problem, config)
    return umeyama(points, f)


def place_box(
    element,
    k: CameraIntrinsics,
    e: CameraExtrinsics,
    clicks: np.ndarray,
    picks_object_frame: np.ndarray,
    config: SolverConfig = SolverConfig(),
) -> np.ndarray:
    """Place a labeling element from three image clicks and three picks on
    the element (object frame). Returns the world-frame rigid correction
    to apply to the element's current pose."""
    picks = np.asarray(picks_object_frame, dtype=float).reshape(3, 3)
    pose = element.pose_matrix()
    world = picks @ pose[:3, :3].T + pose[:3, 3]
    return place_from_rays(world, k, e, clicks, config)
