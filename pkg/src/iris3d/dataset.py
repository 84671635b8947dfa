"""IRIS dataset directories, session files and annotation exports.

Dataset layout (normative for this artifact):

    <root>/rgb/<id>.png            RGB shots, ids numbered from 0 onward
    <root>/depth/<id>.png          matching depth shots (RGBA codec)
    <root>/intrinsics.json         {fx, fy, s, x0, y0, width, height}
    <root>/extrinsics.json         {"<id>": [16 row-major numbers], ...}
    <root>/timestamps.json         {"<old timestamp>": "<image name>", ...}
    <root>/registration/*.ply      optional scene mesh
    <root>/pc/<id>.ply             optional per-shot point clouds
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraExtrinsics, CameraIntrinsics
from .elements import LabelingElement
from .errors import DatasetError, SessionError
from .plyio import PointCloud, TriangleMesh, parse_ply

SESSION_SCHEMA_VERSION = 1


@dataclass
class Shot:
    id: int
    rgb_path: Path
    depth_path: Path
    extrinsics: CameraExtrinsics


@dataclass
class Dataset:
    root: Path
    intrinsics: CameraIntrinsics
    shots: dict[int, Shot]
    timestamps: dict[str, str]
    filter_step: int
    mesh: TriangleMesh | None = None
    pointclouds: dict[int, PointCloud] = field(default_factory=dict)


def _load_json(path: Path):
    if not path.is_file():
        raise DatasetError(f"missing {path.name}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path.name}: {exc}") from exc


def _numbered_ids(folder: Path) -> dict[int, Path]:
    ids = {}
    for p in sorted(folder.glob("*.png")):
        m = re.fullmatch(r"(\d+)", p.stem)
        if m:
            ids[int(m.group(1))] = p
    return ids


def load_dataset(path, filter_step: int = 1) -> Dataset:
    """Load an IRIS dataset, keeping only shot ids that are multiples of
    filter_step."""
    if filter_step < 1:
        raise DatasetError(f"filter_step must be a positive integer, got {filter_step}")
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    intr = CameraIntrinsics.from_json(_load_json(root / "intrinsics.json"))
    extr_raw = _load_json(root / "extrinsics.json")
    timestamps = {str(k): str(v) for k, v in _load_json(root / "timestamps.json").items()}

    rgb_dir = root / "rgb"
    depth_dir = root / "depth"
    if not rgb_dir.is_dir():
        raise DatasetError("missing rgb/ folder")
    if not depth_dir.is_dir():
        raise DatasetError("missing depth/ folder")
    rgb_ids = _numbered_ids(rgb_dir)
    depth_ids = _numbered_ids(depth_dir)
    if set(rgb_ids) != set(depth_ids):
        raise DatasetError(
            f"id mismatch between rgb/ and depth/: {sorted(set(rgb_ids) ^ set(depth_ids))}"
        )

    shots = {}
    for key, flat in extr_raw.items():
        try:
            sid = int(key)
        except ValueError as exc:
            raise DatasetError(f"non-integer shot id {key!r} in extrinsics.json") from exc
        if sid not in rgb_ids:
            raise DatasetError(f"shot {sid} has extrinsics but no images on disk")
        if sid % filter_step != 0:
            continue
        mat = np.asarray(flat, dtype=float)
        if mat.size != 16:
            raise DatasetError(f"extrinsic for shot {sid} must hold 16 numbers")
        shots[sid] = Shot(
            id=sid,
            rgb_path=rgb_ids[sid],
            depth_path=depth_ids[sid],
            extrinsics=CameraExtrinsics(mat.reshape(4, 4)),
        )

    mesh = None
    reg_dir = root / "registration"
    if reg_dir.is_dir():
        plys = sorted(reg_dir.glob("*.ply"))
        if plys:
            parsed = parse_ply(plys[0].read_bytes())
            if not isinstance(parsed, TriangleMesh):
                raise DatasetError(f"{plys[0].name} is not a mesh")
            mesh = parsed

    pointclouds = {}
    pc_dir = root / "pc"
    if pc_dir.is_dir():
        for p in sorted(pc_dir.glob("*.ply")):
            m = re.fullmatch(r"(\d+)", p.stem)
            if not m:
                continue
            sid = int(m.group(1))
            if sid % filter_step != 0:
                continue
            parsed = parse_ply(p.read_bytes())
            if isinstance(parsed, TriangleMesh):
                parsed = PointCloud(points=parsed.vertices, colors=parsed.colors)
            pointclouds[sid] = parsed

    return Dataset(
        root=root,
        intrinsics=intr,
        shots=shots,
        timestamps=timestamps,
        filter_step=filter_step,
        mesh=mesh,
        pointclouds=pointclouds,
    )


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


@dataclass
class Session:
    elements: list[LabelingElement]
    dataset_path: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = [e.id for e in self.elements]
        if len(set(ids)) != len(ids):
            raise SessionError("duplicate element ids in session")
        colors = [e.color for e in self.elements]
        if len(set(colors)) != len(colors):
            raise SessionError("two elements share a color; rectangles would merge")

    def element_by_id(self, eid: int) -> LabelingElement:
        for e in self.elements:
            if e.id == eid:
                return e
        raise SessionError(f"no element with id {eid}")


def element_to_json(e: LabelingElement) -> dict:
    if e.shape is not None:
        raise SessionError(f"element {e.id}: CAD-shaped elements are not serializable")
    return {
        "id": e.id,
        "className": e.class_name,
        "color": list(e.color),
        "position": [float(v) for v in e.position],
        "rotation": [float(v) for v in e.rotation],
        "scale": [float(v) for v in e.scale],
        "shape": "cuboid",
    }


def element_from_json(obj: dict) -> LabelingElement:
    try:
        if obj.get("shape", "cuboid") != "cuboid":
            raise SessionError(f"unknown element shape {obj.get('shape')!r}")
        return LabelingElement(
            id=int(obj["id"]),
            class_name=str(obj["className"]),
            color=tuple(obj["color"]),
            position=obj["position"],
            rotation=obj["rotation"],
            scale=obj["scale"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SessionError(f"bad element document: {exc}") from exc


def save_session(session: Session) -> bytes:
    doc = {
        "version": SESSION_SCHEMA_VERSION,
        "dataset": session.dataset_path,
        "elements": [element_to_json(e) for e in session.elements],
    }
    return (json.dumps(doc, indent=2) + "\n").encode("utf-8")


def load_session(data: bytes) -> Session:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SessionError(f"malformed session JSON: {exc}") from exc
    version = doc.get("version")
    if version != SESSION_SCHEMA_VERSION:
        raise SessionError(
            f"session schema version mismatch: expected {SESSION_SCHEMA_VERSION}, got {version}"
        )
    elements = [element_from_json(o) for o in doc.get("elements", [])]
    return Session(elements=elements, dataset_path=str(doc.get("dataset", "")))


# ---------------------------------------------------------------------------
# Annotation exports: one 2D document keyed by shot and one 3D document
# keyed by object, with the five 2D fields (shotId, objectId, className,
# min, max, color) and the three 3D fields (center, rotation, color).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        if self.min_x > self.max_x or self.min_y > self.max_y:
            raise SessionError("rectangle has min > max")

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y


@dataclass
class AnnotationSet:
    # (shot id, object id) -> (class name, Rect, color)
    rect2d: dict[tuple[int, int], tuple[str, Rect, tuple[int, int, int, int]]] = field(
        default_factory=dict
    )
    # object id -> (center (3,), rotation quat (4,), color)
    pose3d: dict[int, tuple[np.ndarray, np.ndarray, tuple[int, int, int, int]]] = field(
        default_factory=dict
    )

    def validate(self, session: Session):
        known = {e.id for e in session.elements}
        for (_, oid) in self.rect2d:
            if oid not in known:
                raise SessionError(f"2D annotation references unknown object {oid}")
        for oid in self.pose3d:
            if oid not in known:
                raise SessionError(f"3D annotation references unknown object {oid}")


def export_annotations(annotations: AnnotationSet) -> tuple[bytes, bytes]:
    """Serialize to (2D JSON bytes, 3D JSON bytes)."""
    by_shot: dict[str, list] = {}
    for (sid, oid), (cls, rect, color) in sorted(annotations.rect2d.items()):
        by_shot.setdefault(str(sid), []).append(
            {
                "shotId": sid,
                "objectId": oid,
                "className": cls,
                "min": [rect.min_x, rect.min_y],
                "max": [rect.max_x, rect.max_y],
                "color": list(color),
            }
        )
    by_object = {
        str(oid): {
            "center": [float(v) for v in center],
            "rotation": [float(v) for v in rotation],
            "color": list(color),
        }
        for oid, (center, rotation, color) in sorted(annotations.pose3d.items())
    }
    two_d = (json.dumps(by_shot, indent=2) + "\n").encode("utf-8")
    three_d = (json.dumps(by_object, indent=2) + "\n").encode("utf-8")
    return two_d, three_d


def parse_annotations_2d(data: bytes) -> dict[tuple[int, int], dict]:
    """Parse an exported 2D document back into (shot, object) -> entry."""
    doc = json.loads(data.decode("utf-8"))
    out = {}
    for entries in doc.values():
        for e in entries:
            out[(int(e["shotId"]), int(e["objectId"]))] = e
    return out


def parse_annotations_3d(data: bytes) -> dict[int, dict]:
    doc = json.loads(data.decode("utf-8"))
    return {int(oid): entry for oid, entry in doc.items()}
