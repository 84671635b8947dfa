"""Single-view geometry: camera matrices, projection, back-projection,
the RGBA depth codec, TRS(+shear) decomposition and AABB cuboid fitting.

Pixel convention: (0, 0) sits at the bottom-left of the image frame and v
grows upward. Raster arrays (PNG-style, row 0 on top) relate through
``row = height - 1 - floor(v)``; the snapping module documents its own
top-left (u, v) matrix layout and converts at the call site.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import CameraError, PointAtCameraPlaneError

FAR_PLANE = 65.0  # meters; depth codec full-scale

_DECODE_WEIGHTS = np.array([1.0, 1.0 / 256.0, 1.0 / 256.0**2, 1.0 / 256.0**3])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    s: float
    x0: float
    y0: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.x0 <= self.width and 0 <= self.y0 <= self.height):
            raise CameraError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, self.s, self.x0],
                [0.0, self.fy, self.y0],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera rendered at another resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            s=self.s * sx,
            x0=self.x0 * sx,
            y0=self.y0 * sy,
            width=width,
            height=height,
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "s": self.s,
            "x0": self.x0,
            "y0": self.y0,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(obj["fx"]),
                fy=float(obj["fy"]),
                s=float(obj.get("s", 0.0)),
                x0=float(obj["x0"]),
                y0=float(obj["y0"]),
                width=int(obj["width"]),
                height=int(obj["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CameraError(f"bad intrinsics document: {exc}") from exc


@dataclass(frozen=True)
class CameraExtrinsics:
    """World-to-camera transform [R|t] with homogeneous bottom row."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise CameraError("extrinsic matrix must be 4x4")
        object.__setattr__(self, "matrix", m)
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-9):
            raise CameraError("extrinsic bottom row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise CameraError("extrinsic rotation is not orthonormal")
        if not math.isclose(np.linalg.det(r), 1.0, abs_tol=1e-9):
            raise CameraError("extrinsic rotation has det != +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def camera_center(self) -> np.ndarray:
        """World-space camera position C, with t = -R C."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> np.ndarray:
        inv = np.eye(4)
        inv[:3, :3] = self.rotation.T
        inv[:3, 3] = self.camera_center
        return inv

    @classmethod
    def look_at(cls, center, target, up=(0.0, 1.0, 0.0)) -> "CameraExtrinsics":
        """Camera at `center` looking toward `target` (+z forward)."""
        center = np.asarray(center, dtype=float)
        fwd = np.asarray(target, dtype=float) - center
        n = np.linalg.norm(fwd)
        if n == 0:
            raise CameraError("look_at target coincides with camera center")
        fwd /= n
        right = np.cross(np.asarray(up, dtype=float), fwd)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            right = np.cross(np.array([1.0, 0.0, 0.0]), fwd)
            rn = np.linalg.norm(right)
        right /= rn
        cam_up = np.cross(fwd, right)
        r = np.stack([right, cam_up, fwd])  # rows: camera x (right), y (up), z (forward)
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = -r @ center
        return cls(m)


def projection_matrix(k: CameraIntrinsics, e: CameraExtrinsics) -> np.ndarray:
    """3x4 pinhole projection P = K [R|t]."""
    return k.matrix() @ e.matrix[:3, :]


def project_point(p: np.ndarray, world) -> tuple[np.ndarray, bool]:
    """Project one world point; returns ((u, v), in_front)."""
    w = np.append(np.asarray(world, dtype=float), 1.0)
    big_w = p @ w
    if big_w[2] == 0.0:
        raise PointAtCameraPlaneError("point lies on the camera plane (W3 = 0)")
    return big_w[:2] / big_w[2], bool(big_w[2] > 0.0)


def project_points(p: np.ndarray, world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of an (N, 3) array; returns (uv (N, 2), in_front (N,))."""
    world = np.asarray(world, dtype=float)
    homo = np.hstack([world, np.ones((world.shape[0], 1))])
    big_w = homo @ p.T
    depth = big_w[:, 2]
    if np.any(depth == 0.0):
        raise PointAtCameraPlaneError("point lies on the camera plane (W3 = 0)")
    return big_w[:, :2] / depth[:, None], depth > 0.0


def back_project(k: CameraIntrinsics, e: CameraExtrinsics, pixel, z: float) -> np.ndarray:
    """Invert the pinhole map: pixel + camera-frame depth -> world point."""
    if z <= 0:
        raise CameraError(f"depth must be positive, got {z}")
    uv1 = np.array([pixel[0], pixel[1], 1.0])
    ray = np.linalg.solve(k.matrix(), uv1)
    cam = np.append(z * ray, 1.0)
    return (e.inverse() @ cam)[:3]


def back_project_points(
    k: CameraIntrinsics, e: CameraExtrinsics, pixels: np.ndarray, z: np.ndarray
) -> np.ndarray:
    """Vectorized back-projection of (N, 2) pixels with (N,) depths."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise CameraError("depths must be positive")
    uv1 = np.hstack([np.asarray(pixels, dtype=float), np.ones((len(z), 1))])
    rays = np.linalg.solve(k.matrix(), uv1.T).T
    cam = np.hstack([rays * z[:, None], np.ones((len(z), 1))])
    return (e.inverse() @ cam.T).T[:, :3]


def intrinsics_from_fov(vertical_fov_deg: float, width: int, height: int) -> CameraIntrinsics:
    """Synthetic intrinsics: f = height / (2 tan(fov * pi / 360)), centered."""
    if not 0.0 < vertical_fov_deg < 180.0:
        raise CameraError(f"vertical fov must lie in (0, 180), got {vertical_fov_deg}")
    f = height / (2.0 * math.tan(vertical_fov_deg * math.pi / 360.0))
    return CameraIntrinsics(fx=f, fy=f, s=0.0, x0=width / 2.0, y0=height / 2.0, width=width, height=height)


# ---------------------------------------------------------------------------
# Depth codec. Decode is normative: bytes / 255, inner product with
# (1, 1/256, 1/256^2, 1/256^3), times the 65 m far plane. Encode produces
# the positional base-256 digits of 255 * z / 65, which is the right
# inverse of that decode to within 65 / (255 * 256^3).
# ---------------------------------------------------------------------------


def encode_depth(z) -> np.ndarray:
    """Encode linear depth (meters, [0, 65]) into RGBA uint8. Broadcasts."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0.0) or np.any(z > FAR_PLANE):
        raise CameraError("depth out of [0, 65] range")
    t = np.atleast_1d(z / FAR_PLANE * 255.0)
    out = np.empty(t.shape + (4,), dtype=np.uint8)
    for ch in range(4):
        digit = np.minimum(np.floor(t), 255.0)
        out[..., ch] = digit.astype(np.uint8)
        t = (t - digit) * 256.0
    return out.reshape(z.shape + (4,))


def decode_depth(rgba: np.ndarray) -> np.ndarray:
    """Decode RGBA uint8 (last axis 4) back to depth in meters."""
    rgba = np.asarray(rgba)
    if rgba.shape[-1] != 4:
        raise CameraError("depth codec expects 4 channels in the last axis")
    scaled = rgba.astype(float) / 255.0
    return scaled @ _DECODE_WEIGHTS * FAR_PLANE


# ---------------------------------------------------------------------------
# TRS + shear decomposition. The linear block factors as R @ diag(S) @ H
# with H unit upper-triangular; column scaling matches the S⊙R transform
# layout, and a reflection folds into S as a single negative scale.
# ---------------------------------------------------------------------------


class TrsDecomposition(NamedTuple):
    translation: np.ndarray  # (3,)
    rotation: np.ndarray  # (3, 3)
    scale: np.ndarray  # (3,)
    shear: np.ndarray  # (3,) coefficients (xy, xz, yz)


def decompose_trs(m: np.ndarray) -> TrsDecomposition:
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4) or not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
        raise CameraError("expected a 4x4 matrix with (0,0,0,1) bottom row")
    a = m[:3, :3].copy()
    if abs(np.linalg.det(a)) < 1e-300:
        raise CameraError("linear part is singular; cannot decompose")
    c0, c1, c2 = a[:, 0].copy(), a[:, 1].copy(), a[:, 2].copy()

    sx = np.linalg.norm(c0)
    r0 = c0 / sx
    d01 = r0 @ c1
    c1 -= d01 * r0
    sy = np.linalg.norm(c1)
    r1 = c1 / sy
    d02 = r0 @ c2
    d12 = r1 @ c2
    c2 -= d02 * r0 + d12 * r1
    sz = np.linalg.norm(c2)
    r2 = c2 / sz

    rot = np.column_stack([r0, r1, r2])
    scale = np.array([sx, sy, sz])
    if np.linalg.det(rot) < 0.0:
        rot[:, 2] = -rot[:, 2]
        scale[2] = -scale[2]
    shear = np.array([d01 / sx, d02 / sx, d12 / sy])
    return TrsDecomposition(m[:3, 3].copy(), rot, scale, shear)


def recompose_trs(decomp: TrsDecomposition) -> np.ndarray:
    t, r, s, h = decomp
    shear = np.array([[1.0, h[0], h[1]], [0.0, 1.0, h[2]], [0.0, 0.0, 1.0]])
    m = np.eye(4)
    m[:3, :3] = r @ np.diag(s) @ shear
    m[:3, 3] = t
    return m


def skew_of(m: np.ndarray) -> float:
    """Skew scalar: max absolute shear coefficient of the decomposition."""
    return float(np.max(np.abs(decompose_trs(m).shear)))


def fit_aabb_cuboid(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Axis-aligned cuboid pose for a point set: (center, identity quat, scale)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] != 3:
        raise CameraError("need at least one 3D point")
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    return (lo + hi) / 2.0, np.array([0.0, 0.0, 0.0, 1.0]), hi - lo


# ---------------------------------------------------------------------------
# Quaternions (x, y, z, w), used for pose serialization and the snapping
# optimizer's rotation parameterization.
# ---------------------------------------------------------------------------


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    if n == 0.0:
        raise CameraError("zero-length quaternion")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


def rotation_angle_deg(r: np.ndarray) -> float:
    """Rotation angle of a 3x3 rotation matrix, in degrees."""
    c = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))
