"""Labeling elements: posed, colored, class-tagged cuboids (or CAD meshes)."""

from dataclasses import dataclass, field

import numpy as np

from .camera import quat_to_matrix
from .errors import SessionError
from .plyio import TriangleMesh

# Unit cuboid centered at the origin, side length 1; scale gives the full
# edge length per axis. Faces wind counter-clockwise seen from outside.
_C = 0.5
CUBOID_VERTICES = np.array(
    [
        [-_C, -_C, -_C],
        [+_C, -_C, -_C],
        [+_C, +_C, -_C],
        [-_C, +_C, -_C],
        [-_C, -_C, +_C],
        [+_C, -_C, +_C],
        [+_C, +_C, +_C],
        [-_C, +_C, +_C],
    ]
)
CUBOID_TRIANGLES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # z-
        [4, 5, 6], [4, 6, 7],  # z+
        [0, 1, 5], [0, 5, 4],  # y-
        [2, 3, 7], [2, 7, 6],  # y+
        [1, 2, 6], [1, 6, 5],  # x+
        [3, 0, 4], [3, 4, 7],  # x-
    ]
)


@dataclass
class LabelingElement:
    id: int
    class_name: str
    color: tuple[int, int, int, int]
    position: np.ndarray  # (3,) meters
    rotation: np.ndarray  # (4,) unit quaternion (x, y, z, w)
    scale: np.ndarray  # (3,) meters per axis
    shape: TriangleMesh | None = field(default=None)  # None = unit cuboid

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(4)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.color = tuple(int(c) for c in self.color)
        if len(self.color) != 4:
            raise SessionError(f"element {self.id}: color must be RGBA")
        if self.color[:3] == (0, 0, 0):
            raise SessionError(f"element {self.id}: black is reserved for background")
        if np.any(self.scale <= 0):
            raise SessionError(f"element {self.id}: scale components must be positive")

    def pose_matrix(self) -> np.ndarray:
        """Object-to-world transform T @ R @ diag(S)."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation) @ np.diag(self.scale)
        m[:3, 3] = self.position
        return m

    def world_geometry(self) -> tuple[np.ndarray, np.ndarray]:
        """(vertices (V, 3) in world space, triangles (T, 3))."""
        if self.shape is None:
            verts, tris = CUBOID_VERTICES, CUBOID_TRIANGLES
        else:
            verts, tris = np.asarray(self.shape.vertices, dtype=float), self.shape.triangles
        pose = self.pose_matrix()
        world = verts @ pose[:3, :3].T + pose[:3, 3]
        return world, tris

    def corners_world(self) -> np.ndarray:
        """The 8 cuboid corners in world space (cuboid-shaped elements)."""
        pose = self.pose_matrix()
        return CUBOID_VERTICES @ pose[:3, :3].T + pose[:3, 3]
