"""Software rasterizer: labeling elements -> per-shot color masks, and
mesh geometry -> RGBA-codec depth images.

Only labeling elements are ever drawn into masks (the scene mesh stays
out); overlap between elements resolves through a per-pixel z-buffer and
triangles crossing the camera plane are clipped at z = 1e-4 m.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .camera import FAR_PLANE, CameraExtrinsics, CameraIntrinsics, encode_depth
from .elements import LabelingElement

NEAR_PLANE = 1e-4
MASK_RESOLUTION = (320, 180)  # (width, height), the wire mask size
DEPTH_RESOLUTION = (256, 144)


@dataclass
class MaskImage:
    pixels: np.ndarray  # (H, W, 4) uint8, black background
    color_map: dict[tuple[int, int, int, int], int]  # color -> object id
    shot_id: int

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def _clip_near(verts_cam: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Clip triangles against z >= NEAR_PLANE; returns corner array (T, 3, 3)."""
    corners = verts_cam[tris]  # (T, 3, 3)
    z = corners[:, :, 2]
    n_front = (z >= NEAR_PLANE).sum(axis=1)
    out = [corners[n_front == 3]]
    for t in np.nonzero((n_front > 0) & (n_front < 3))[0]:
        poly = list(corners[t])
        clipped = []
        for i, p in enumerate(poly):
            q = poly[(i + 1) % 3]
            pin = p[2] >= NEAR_PLANE
            qin = q[2] >= NEAR_PLANE
            if pin:
                clipped.append(p)
            if pin != qin:
                alpha = (NEAR_PLANE - p[2]) / (q[2] - p[2])
                clipped.append(p + alpha * (q - p))
        for i in range(1, len(clipped) - 1):
            out.append(np.stack([clipped[0], clipped[i], clipped[i + 1]])[None])
    return np.concatenate(out, axis=0) if out else np.empty((0, 3, 3))


def _project_corners(corners_cam: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame triangle corners -> ((T,3,2) uv, (T,3) depth)."""
    z = corners_cam[:, :, 2]
    x = corners_cam[:, :, 0]
    y = corners_cam[:, :, 1]
    u = (k.fx * x + k.s * y) / z + k.x0
    v = k.fy * y / z + k.y0
    return np.stack([u, v], axis=-1), z


def _render(geometries, k: CameraIntrinsics, e: CameraExtrinsics, resolution):
    """Z-buffer render of [(verts_world, tris), ...]; returns (zbuf, idxbuf).

    idxbuf holds the geometry's position in the input list, -1 for background.
    """
    width, height = resolution
    k_r = k.scaled(width, height)
    zbuf = np.full((height, width), np.inf)
    idxbuf = np.full((height, width), -1, dtype=np.int64)
    rot = e.matrix[:3, :3]
    trans = e.matrix[:3, 3]
    for gi, (verts_world, tris) in enumerate(geometries):
        if len(tris) == 0:
            continue
        verts_cam = np.asarray(verts_world, dtype=float) @ rot.T + trans
        corners = _clip_near(verts_cam, np.asarray(tris))
        if len(corners) == 0:
            continue
        uv, z = _project_corners(corners, k_r)
        index = np.full(len(corners), gi, dtype=np.int64)
        kernels.fill_triangles(
            np.ascontiguousarray(uv), np.ascontiguousarray(z), index, zbuf, idxbuf
        )
    return zbuf, idxbuf


def rasterize_masks(
    elements: list[LabelingElement],
    k: CameraIntrinsics,
    e: CameraExtrinsics,
    shot_id: int = 0,
    resolution: tuple[int, int] = MASK_RESOLUTION,
) -> MaskImage:
    """Render elements into a color mask over a black background."""
    geoms = [el.world_geometry() for el in elements]
    _, idxbuf = _render(geoms, k, e, resolution)
    width, height = resolution
    pixels = np.zeros((height, width, 4), dtype=np.uint8)
    pixels[:, :, 3] = 255
    for gi, el in enumerate(elements):
        pixels[idxbuf == gi] = el.color
    color_map = {el.color: el.id for el in elements}
    return MaskImage(pixels=pixels, color_map=color_map, shot_id=shot_id)


def render_depth(
    geometries,
    k: CameraIntrinsics,
    e: CameraExtrinsics,
    resolution: tuple[int, int] = DEPTH_RESOLUTION,
) -> np.ndarray:
    """Render geometry into an RGBA-codec depth image (background = far plane)."""
    zbuf, _ = _render(geometries, k, e, resolution)
    depth = np.minimum(zbuf, FAR_PLANE)
    return encode_depth(depth)
