"""PLY (Stanford triangle format) parsing and serialization.

Supports ascii and binary_little_endian read/write plus binary_big_endian
read. Meshes keep their faces exactly as declared (quads survive a
round-trip); `TriangleMesh.triangles` exposes a fan-triangulated (T, 3)
view for the geometry pipelines.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import PlyError

_SCALAR_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}
_TYPE_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
               "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}
_UNSIGNED = {"u1", "u2", "u4"}


@dataclass
class PlyProperty:
    name: str
    kind: str  # numpy kind code without byte order, e.g. "f4"
    is_list: bool = False
    count_kind: str | None = None


@dataclass
class PlyElement:
    name: str
    count: int
    properties: list[PlyProperty] = field(default_factory=list)


@dataclass
class PlyHeader:
    encoding: str  # ascii | binary_little_endian | binary_big_endian
    elements: list[PlyElement] = field(default_factory=list)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float
    faces: list[tuple[int, ...]]  # each >= 3 vertex indices
    colors: np.ndarray | None = None  # (V, 4) uint8 RGBA
    normals: np.ndarray | None = None  # (V, 3) float

    _triangles: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def triangles(self) -> np.ndarray:
        """Fan-triangulated faces as an (T, 3) int array (cached)."""
        if self._triangles is None:
            tris = []
            for f in self.faces:
                for i in range(1, len(f) - 1):
                    tris.append((f[0], f[i], f[i + 1]))
            self._triangles = np.array(tris, dtype=np.int64).reshape(-1, 3)
        return self._triangles


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float
    colors: np.ndarray | None = None  # (N, 4) uint8 RGBA


def _parse_header(data: bytes) -> tuple[PlyHeader, int]:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("not a PLY file (missing 'ply'/'end_header')")
    body_start = data.find(b"\n", end)
    if body_start < 0:
        raise PlyError("header is not newline-terminated")
    body_start += 1
    text = data[:end].decode("ascii", errors="replace")
    encoding = None
    elements: list[PlyElement] = []
    for line in text.splitlines()[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment" or tokens[0] == "obj_info":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2:
                raise PlyError("malformed format line")
            encoding = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise PlyError(f"malformed element line: {line!r}")
            try:
                count = int(tokens[2])
            except ValueError as exc:
                raise PlyError(f"bad element count: {line!r}") from exc
            if count < 0:
                raise PlyError(f"negative element count: {line!r}")
            elements.append(PlyElement(tokens[1], count))
        elif tokens[0] == "property":
            if not elements:
                raise PlyError("property before any element")
            if tokens[1] == "list":
                if len(tokens) != 5:
                    raise PlyError(f"malformed list property: {line!r}")
                count_kind = _SCALAR_TYPES.get(tokens[2])
                item_kind = _SCALAR_TYPES.get(tokens[3])
                if count_kind is None or item_kind is None:
                    raise PlyError(f"unknown list property types: {line!r}")
                if count_kind not in _UNSIGNED and count_kind not in ("i1", "i2", "i4"):
                    raise PlyError(f"bad list count type: {line!r}")
                prop = PlyProperty(tokens[4], item_kind, True, count_kind)
            else:
                if len(tokens) != 3:
                    raise PlyError(f"malformed property: {line!r}")
                kind = _SCALAR_TYPES.get(tokens[1])
                if kind is None:
                    raise PlyError(f"unknown property type: {line!r}")
                prop = PlyProperty(tokens[2], kind)
            if any(p.name == prop.name for p in elements[-1].properties):
                raise PlyError(f"duplicate property {prop.name!r} in element {elements[-1].name!r}")
            elements[-1].properties.append(prop)
        else:
            raise PlyError(f"unrecognized header line: {line!r}")
    if encoding is None:
        raise PlyError("header has no format line")
    if encoding not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyError(f"unsupported encoding {encoding!r}")
    return PlyHeader(encoding, elements), body_start


def _parse_ascii_body(header: PlyHeader, body: bytes) -> dict:
    tokens = body.split()
    pos = 0
    out = {}
    for elem in header.elements:
        columns: dict[str, list] = {p.name: [] for p in elem.properties}
        for _ in range(elem.count):
            for prop in elem.properties:
                try:
                    if prop.is_list:
                        n = int(tokens[pos])
                        pos += 1
                        vals = [float(t) if prop.kind.startswith("f") else int(t)
                                for t in tokens[pos : pos + n]]
                        if len(vals) != n:
                            raise IndexError
                        pos += n
                        columns[prop.name].append(vals)
                    else:
                        t = tokens[pos]
                        pos += 1
                        columns[prop.name].append(float(t) if prop.kind.startswith("f") else int(t))
                except (IndexError, ValueError) as exc:
                    raise PlyError(
                        f"truncated or malformed ascii body in element {elem.name!r}"
                    ) from exc
        out[elem.name] = (elem, columns)
    return out


def _parse_binary_body(header: PlyHeader, body: bytes) -> dict:
    bo = "<" if header.encoding == "binary_little_endian" else ">"
    out = {}
    offset = 0
    for elem in header.elements:
        has_list = any(p.is_list for p in elem.properties)
        columns: dict[str, list] = {p.name: [] for p in elem.properties}
        if not has_list:
            dtype = np.dtype([(p.name, bo + p.kind) for p in elem.properties])
            need = dtype.itemsize * elem.count
            if offset + need > len(body):
                raise PlyError(f"truncated binary body in element {elem.name!r}")
            rec = np.frombuffer(body, dtype=dtype, count=elem.count, offset=offset)
            offset += need
            for p in elem.properties:
                columns[p.name] = rec[p.name]
        elif len(elem.properties) == 1 and elem.count > 0:
            # Single list property (the common face layout): try the uniform
            # fast path, falling back to a per-record scan on mixed counts.
            prop = elem.properties[0]
            cdt = np.dtype(bo + prop.count_kind)
            idt = np.dtype(bo + prop.kind)
            if offset + cdt.itemsize > len(body):
                raise PlyError(f"truncated binary body in element {elem.name!r}")
            first_n = int(np.frombuffer(body, cdt, 1, offset)[0])
            rec_size = cdt.itemsize + first_n * idt.itemsize
            need = rec_size * elem.count
            uniform = False
            if first_n >= 0 and offset + need <= len(body):
                dtype = np.dtype([("n", bo + prop.count_kind), ("v", bo + prop.kind, (first_n,))])
                rec = np.frombuffer(body, dtype=dtype, count=elem.count, offset=offset)
                if np.all(rec["n"] == first_n):
                    uniform = True
                    columns[prop.name] = [tuple(row) for row in rec["v"].tolist()]
                    offset += need
            if not uniform:
                for _ in range(elem.count):
                    if offset + cdt.itemsize > len(body):
                        raise PlyError(f"truncated binary body in element {elem.name!r}")
                    n = int(np.frombuffer(body, cdt, 1, offset)[0])
                    offset += cdt.itemsize
                    if n < 0 or offset + n * idt.itemsize > len(body):
                        raise PlyError(f"truncated binary body in element {elem.name!r}")
                    columns[prop.name].append(
                        np.frombuffer(body, idt, n, offset).tolist()
                    )
                    offset += n * idt.itemsize
        else:
            for _ in range(elem.count):
                for prop in elem.properties:
                    if prop.is_list:
                        cdt = np.dtype(bo + prop.count_kind)
                        idt = np.dtype(bo + prop.kind)
                        if offset + cdt.itemsize > len(body):
                            raise PlyError(f"truncated binary body in element {elem.name!r}")
                        n = int(np.frombuffer(body, cdt, 1, offset)[0])
                        offset += cdt.itemsize
                        if n < 0 or offset + n * idt.itemsize > len(body):
                            raise PlyError(f"truncated binary body in element {elem.name!r}")
                        columns[prop.name].append(np.frombuffer(body, idt, n, offset).tolist())
                        offset += n * idt.itemsize
                    else:
                        dt = np.dtype(bo + prop.kind)
                        if offset + dt.itemsize > len(body):
                            raise PlyError(f"truncated binary body in element {elem.name!r}")
                        columns[prop.name].append(np.frombuffer(body, dt, 1, offset)[0])
                        offset += dt.itemsize
        out[elem.name] = (elem, columns)
    if offset != len(body.rstrip(b"\r\n")) and offset != len(body):
        # Exact consumption check: parsed counts must account for the body.
        raise PlyError(
            f"binary body length mismatch: consumed {offset} of {len(body)} bytes"
        )
    return out


def _vertex_arrays(elem: PlyElement, columns: dict):
    names = [p.name for p in elem.properties]
    kinds = {p.name: p.kind for p in elem.properties}
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
    vdtype = np.dtype(kinds["x"]) if kinds["x"].startswith("f") else np.dtype("f8")
    verts = np.column_stack(
        [np.asarray(columns["x"]), np.asarray(columns["y"]), np.asarray(columns["z"])]
    ).astype(vdtype, copy=False)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        alpha = (
            np.asarray(columns["alpha"])
            if "alpha" in names
            else np.full(elem.count, 255, dtype=np.uint8)
        )
        colors = np.column_stack(
            [columns["red"], columns["green"], columns["blue"], alpha]
        ).astype(np.uint8)
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = np.column_stack([columns["nx"], columns["ny"], columns["nz"]]).astype(float)
    return verts, colors, normals


def parse_ply(data: bytes):
    """Parse PLY bytes into a PointCloud (vertices only) or TriangleMesh."""
    header, body_start = _parse_header(data)
    body = data[body_start:]
    if header.encoding == "ascii":
        parsed = _parse_ascii_body(header, body)
    else:
        parsed = _parse_binary_body(header, body)

    vertex_entry = parsed.get("vertex")
    if vertex_entry is None:
        raise PlyError("PLY file declares no vertex element")
    verts, colors, normals = _vertex_arrays(*vertex_entry)

    face_entry = parsed.get("face")
    faces: list[tuple[int, ...]] = []
    if face_entry is not None and face_entry[0].count > 0:
        elem, columns = face_entry
        list_props = [p for p in elem.properties if p.is_list]
        if not list_props:
            raise PlyError("face element has no list property")
        name = next(
            (p.name for p in list_props if p.name in ("vertex_index", "vertex_indices")),
            list_props[0].name,
        )
        nverts = len(verts)
        for idx in columns[name]:
            face = tuple(int(i) for i in idx)
            if len(face) < 3:
                raise PlyError(f"face with fewer than 3 indices: {face}")
            if any(i < 0 or i >= nverts for i in face):
                raise PlyError(f"face index out of range: {face}")
            faces.append(face)

    if face_entry is None:
        return PointCloud(points=verts, colors=colors)
    return TriangleMesh(vertices=verts, faces=faces, colors=colors, normals=normals)


def _float_name(arr: np.ndarray) -> str:
    return "float" if arr.dtype == np.float32 else "double"


def serialize_ply(obj, encoding: str = "binary_little_endian") -> bytes:
    """Serialize a TriangleMesh or PointCloud to PLY bytes."""
    if encoding not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported write encoding {encoding!r}")
    is_mesh = isinstance(obj, TriangleMesh)
    verts = np.asarray(obj.vertices if is_mesh else obj.points)
    colors = obj.colors
    normals = obj.normals if is_mesh else None
    fname = _float_name(verts)

    lines = ["ply", f"format {encoding} 1.0", f"element vertex {len(verts)}"]
    lines += [f"property {fname} {ax}" for ax in ("x", "y", "z")]
    if normals is not None:
        nname = _float_name(np.asarray(normals))
        lines += [f"property {nname} {ax}" for ax in ("nx", "ny", "nz")]
    if colors is not None:
        lines += [f"property uchar {c}" for c in ("red", "green", "blue", "alpha")]
    if is_mesh:
        lines.append(f"element face {len(obj.faces)}")
        lines.append("property list uchar int vertex_index")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    if encoding == "ascii":
        rows = []
        for i in range(len(verts)):
            parts = [repr(float(v)) for v in verts[i]]
            if normals is not None:
                parts += [repr(float(v)) for v in normals[i]]
            if colors is not None:
                parts += [str(int(v)) for v in colors[i]]
            rows.append(" ".join(parts))
        if is_mesh:
            for face in obj.faces:
                rows.append(" ".join([str(len(face))] + [str(int(i)) for i in face]))
        return header + ("\n".join(rows) + "\n").encode("ascii")

    vkind = "f4" if verts.dtype == np.float32 else "f8"
    fields = [("x", "<" + vkind), ("y", "<" + vkind), ("z", "<" + vkind)]
    if normals is not None:
        nk = "f4" if np.asarray(normals).dtype == np.float32 else "f8"
        fields += [("nx", "<" + nk), ("ny", "<" + nk), ("nz", "<" + nk)]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1"), ("alpha", "u1")]
    rec = np.zeros(len(verts), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = verts[:, 0], verts[:, 1], verts[:, 2]
    if normals is not None:
        normals = np.asarray(normals)
        rec["nx"], rec["ny"], rec["nz"] = normals[:, 0], normals[:, 1], normals[:, 2]
    if colors is not None:
        for i, c in enumerate(("red", "green", "blue", "alpha")):
            rec[c] = colors[:, i]
    chunks = [header, rec.tobytes()]
    if is_mesh:
        for face in obj.faces:
            chunks.append(struct.pack("<B", len(face)))
            chunks.append(struct.pack(f"<{len(face)}i", *[int(i) for i in face]))
    return b"".join(chunks)


def recompute_normals(mesh: TriangleMesh) -> TriangleMesh:
    """Area-weighted per-vertex normals from incident face normals.

    Degenerate (zero-area) faces contribute nothing; vertices with no
    incident area fall back to +z so every normal has unit length.
    """
    if len(mesh.faces) < 1:
        raise PlyError("mesh has no faces; nothing to recompute")
    verts = np.asarray(mesh.vertices, dtype=float)
    tris = mesh.triangles
    e1 = verts[tris[:, 1]] - verts[tris[:, 0]]
    e2 = verts[tris[:, 2]] - verts[tris[:, 0]]
    cross = np.cross(e1, e2)  # magnitude = 2 * area
    acc = np.zeros_like(verts)
    for k in range(3):
        np.add.at(acc, tris[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    fallback = norms < 1e-300
    acc[fallback] = (0.0, 0.0, 1.0)
    norms[fallback] = 1.0
    return TriangleMesh(
        vertices=mesh.vertices,
        faces=mesh.faces,
        colors=mesh.colors,
        normals=acc / norms[:, None],
    )
