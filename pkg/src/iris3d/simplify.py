"""Quadric-error-metric edge-collapse mesh simplification.

Every vertex carries the sum of squared-distance quadrics of its incident
face planes; collapsing a pair merges quadrics additively and moves the
survivor to the cost-minimizing position. Collapses pop off a heap in
cost order until the triangle count reaches quality * original count.
"""

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError
from .plyio import TriangleMesh

COLLIDER_VERTEX_CAP = 65536


def face_plane(v0, v1, v2):
    """Unit-normal plane (a, b, c, d) through a triangle; None if degenerate."""
    n = np.cross(v1 - v0, v2 - v0)
    norm = np.linalg.norm(n)
    if norm < 1e-300:
        return None
    n = n / norm
    return np.append(n, -n @ v0)


def plane_quadric(plane: np.ndarray) -> np.ndarray:
    return np.outer(plane, plane)


def vertex_quadrics(mesh: TriangleMesh) -> np.ndarray:
    """(V, 4, 4) sum of incident-face plane quadrics; zero-area faces skipped."""
    verts = np.asarray(mesh.vertices, dtype=float)
    quadrics = np.zeros((len(verts), 4, 4))
    for tri in mesh.triangles:
        plane = face_plane(verts[tri[0]], verts[tri[1]], verts[tri[2]])
        if plane is None:
            continue
        q = plane_quadric(plane)
        for vid in tri:
            quadrics[vid] += q
    return quadrics


def quadric_cost(q: np.ndarray, v: np.ndarray) -> float:
    homo = np.append(v, 1.0)
    return float(homo @ q @ homo)


def optimal_position(q1: np.ndarray, q2: np.ndarray, v1=None, v2=None):
    """Cost-minimizing collapse position for the merged quadric.

    Solves the stationarity system; a singular system (flat or line-like
    neighborhoods) still has consistent normal equations, so the
    least-squares solution lands on the zero-cost set when one exists.
    The endpoint/midpoint probes backstop numerically hopeless cases.
    """
    q = q1 + q2
    a = q[:3, :3]
    b = -q[:3, 3]
    candidates = []
    try:
        v = np.linalg.solve(a, b)
        if np.all(np.isfinite(v)):
            candidates.append(v)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(a, b, rcond=None)
        if np.all(np.isfinite(sol)):
            candidates.append(sol)
    if v1 is not None and v2 is not None:
        v1 = np.asarray(v1, dtype=float)
        v2 = np.asarray(v2, dtype=float)
        candidates += [v1, v2, (v1 + v2) / 2.0]
    elif not candidates:
        candidates.append(np.zeros(3))
    costs = [quadric_cost(q, c) for c in candidates]
    best = int(np.argmin(costs))
    return candidates[best], max(costs[best], 0.0)


@dataclass
class _State:
    verts: np.ndarray
    quadrics: np.ndarray
    alive: np.ndarray  # vertex liveness
    version: np.ndarray  # bumped on every vertex move/merge
    neighbors: list  # vertex -> set of adjacent vertices
    vertex_faces: list  # vertex -> set of face ids
    faces: np.ndarray  # (F, 3), rows invalidated on collapse
    face_alive: np.ndarray


def _build_state(mesh: TriangleMesh) -> _State:
    verts = np.asarray(mesh.vertices, dtype=float).copy()
    faces = mesh.triangles.copy()
    n = len(verts)
    neighbors = [set() for _ in range(n)]
    vertex_faces = [set() for _ in range(n)]
    for fid, (a, b, c) in enumerate(faces):
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
        vertex_faces[a].add(fid)
        vertex_faces[b].add(fid)
        vertex_faces[c].add(fid)
    return _State(
        verts=verts,
        quadrics=vertex_quadrics(mesh),
        alive=np.ones(n, dtype=bool),
        version=np.zeros(n, dtype=np.int64),
        neighbors=neighbors,
        vertex_faces=vertex_faces,
        faces=faces,
        face_alive=np.ones(len(faces), dtype=bool),
    )


_heap_seq = 0


def _candidate(state: _State, v1: int, v2: int):
    global _heap_seq
    _heap_seq += 1
    pos, cost = optimal_position(
        state.quadrics[v1], state.quadrics[v2], state.verts[v1], state.verts[v2]
    )
    # the sequence number keeps the numpy position out of tuple comparison
    return (cost, v1, v2, state.version[v1], state.version[v2], _heap_seq, pos)


def _collapse_flips_face(state: _State, moved: int, gone: int, pos: np.ndarray) -> bool:
    """Would moving `moved` to `pos` (with `gone` merged in) flip any
    surviving face normal beyond 90 degrees?"""
    for vid in (moved, gone):
        for fid in state.vertex_faces[vid]:
            if not state.face_alive[fid]:
                continue
            tri = state.faces[fid]
            if moved in tri and gone in tri:
                continue  # face vanishes in the collapse
            before = [state.verts[t] for t in tri]
            after = [pos if t in (moved, gone) else state.verts[t] for t in tri]
            n0 = np.cross(before[1] - before[0], before[2] - before[0])
            n1 = np.cross(after[1] - after[0], after[2] - after[0])
            if n0 @ n1 < 0.0:
                return True
    return False


def simplify(
    mesh: TriangleMesh,
    quality: float,
    epsilon: float = 0.0,
    max_vertices: int | None = None,
) -> TriangleMesh:
    """Collapse lowest-cost pairs until the live triangle count is at most
    quality * original count (and the vertex count is within max_vertices
    when given). epsilon > 0 additionally admits non-edge pairs closer
    than epsilon."""
    if not 0.0 < quality <= 1.0:
        raise DegenerateInputError(f"quality must lie in (0, 1], got {quality}")
    tris = mesh.triangles
    if len(tris) == 0:
        raise DegenerateInputError("mesh has no triangles")
    state = _build_state(mesh)
    n_faces = len(tris)
    target_faces = quality * n_faces
    live_faces = int(state.face_alive.sum())
    live_verts = int(state.alive.sum())

    heap = []
    seen = set()
    for a in range(len(state.verts)):
        for b in state.neighbors[a]:
            pair = (min(a, b), max(a, b))
            if pair not in seen:
                seen.add(pair)
                heap.append(_candidate(state, *pair))
    if epsilon > 0.0:
        for a in range(len(state.verts)):
            for b in range(a + 1, len(state.verts)):
                if b not in state.neighbors[a] and (a, b) not in seen:
                    if np.linalg.norm(state.verts[a] - state.verts[b]) < epsilon:
                        seen.add((a, b))
                        heap.append(_candidate(state, a, b))
    heapq.heapify(heap)

    def done():
        faces_ok = live_faces <= target_faces
        verts_ok = max_vertices is None or live_verts <= max_vertices
        return faces_ok and verts_ok

    while heap and not done():
        cost, v1, v2, ver1, ver2, _, pos = heapq.heappop(heap)
        if not (state.alive[v1] and state.alive[v2]):
            continue
        if state.version[v1] != ver1 or state.version[v2] != ver2:
            continue
        if v2 not in state.neighbors[v1] and epsilon == 0.0:
            continue
        if _collapse_flips_face(state, v1, v2, pos):
            # fall back to endpoint/midpoint targets before giving up
            alternatives = [state.verts[v1], state.verts[v2],
                            (state.verts[v1] + state.verts[v2]) / 2.0]
            pos = None
            for alt in alternatives:
                if not _collapse_flips_face(state, v1, v2, alt):
                    pos = alt
                    break
            if pos is None:
                continue

        # merge v2 into v1 at pos
        state.verts[v1] = pos
        state.quadrics[v1] = state.quadrics[v1] + state.quadrics[v2]
        state.alive[v2] = False
        live_verts -= 1
        state.version[v1] += 1
        state.version[v2] += 1

        for fid in list(state.vertex_faces[v2]):
            if not state.face_alive[fid]:
                continue
            tri = state.faces[fid]
            if v1 in tri:
                state.face_alive[fid] = False
                live_faces -= 1
                for t in tri:
                    state.vertex_faces[t].discard(fid)
            else:
                state.faces[fid] = [v1 if t == v2 else t for t in tri]
                state.vertex_faces[v2].discard(fid)
                state.vertex_faces[v1].add(fid)

        moved_neighbors = (state.neighbors[v1] | state.neighbors[v2]) - {v1, v2}
        for nb in state.neighbors[v2]:
            state.neighbors[nb].discard(v2)
            if nb != v1:
                state.neighbors[nb].add(v1)
        state.neighbors[v1] |= state.neighbors[v2] - {v1}
        state.neighbors[v2] = set()

        for nb in moved_neighbors:
            if state.alive[nb]:
                pair = (min(v1, nb), max(v1, nb))
                heapq.heappush(heap, _candidate(state, *pair))

    # compact the surviving mesh
    remap = -np.ones(len(state.verts), dtype=np.int64)
    keep = np.nonzero(state.alive)[0]
    remap[keep] = np.arange(len(keep))
    new_faces = []
    for fid in np.nonzero(state.face_alive)[0]:
        tri = [int(remap[t]) for t in state.faces[fid]]
        if len(set(tri)) == 3:
            new_faces.append(tuple(tri))
    colors = mesh.colors[keep] if mesh.colors is not None else None
    return TriangleMesh(vertices=state.verts[keep], faces=new_faces, colors=colors)


def simplify_to_collider(
    mesh: TriangleMesh, max_vertices: int = COLLIDER_VERTEX_CAP
) -> TriangleMesh:
    """Simplify until the vertex count fits the collider cap."""
    if len(mesh.vertices) <= max_vertices:
        return mesh
    quality = max_vertices / len(mesh.vertices)
    out = mesh
    while len(out.vertices) > max_vertices and quality > 1e-6:
        out = simplify(mesh, quality, max_vertices=max_vertices)
        quality /= 2.0
    return out


def collider_cache_path(mesh_path) -> str:
    return str(mesh_path) + ".collider.json"


def save_collider_cache(path, mesh: TriangleMesh) -> None:
    import json

    doc = {
        "vertices": np.asarray(mesh.vertices, dtype=float).tolist(),
        "faces": [list(map(int, f)) for f in mesh.faces],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_collider_cache(path) -> TriangleMesh:
    import json

    with open(path) as fh:
        doc = json.load(fh)
    return TriangleMesh(
        vertices=np.asarray(doc["vertices"], dtype=float),
        faces=[tuple(f) for f in doc["faces"]],
    )


def load_or_build_collider(mesh_path, mesh: TriangleMesh, max_vertices: int = COLLIDER_VERTEX_CAP):
    """Collider-grade mesh with a JSON sidecar cache next to the input."""
    import os

    cache = collider_cache_path(mesh_path)
    if os.path.exists(cache):
        return load_collider_cache(cache)
    simplified = simplify_to_collider(mesh, max_vertices)
    save_collider_cache(cache, simplified)
    return simplified
