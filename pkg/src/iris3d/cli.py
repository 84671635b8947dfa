"""Batch command-line entry point.

Subcommands: inspect, annotate, register, meshless, snap, simplify, serve.
All point/click files are small JSON documents with the same schemas as
the wire payloads. Errors exit with status 1 and a message on stderr.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .bbox import BboxConfig, bbox_for_shot
from .camera import CameraExtrinsics, CameraIntrinsics
from .dataset import AnnotationSet, export_annotations, load_dataset, load_session
from .dataset import element_from_json
from .errors import Iris3dError
from .meshless import place_box
from .plyio import parse_ply, serialize_ply, TriangleMesh
from .registration import tpsrpm
from .service import DEFAULT_PORT, serve_blocking
from .simplify import simplify, simplify_to_collider, save_collider_cache, collider_cache_path
from .snapping import SnapConfig, snap


def _print_matrix(matrix: np.ndarray) -> None:
    print(json.dumps([float(v) for v in np.asarray(matrix).ravel()]))


def _load_json_file(path):
    with open(path) as fh:
        return json.load(fh)


def _cmd_inspect(args) -> int:
    ds = load_dataset(args.dataset, args.filter_step)
    print(f"shots: {len(ds.shots)}")
    print(f"resolution: {ds.intrinsics.width}x{ds.intrinsics.height}")
    if ds.mesh is not None:
        print(f"mesh: {len(ds.mesh.vertices)} vertices, {len(ds.mesh.faces)} faces")
    else:
        print("mesh: absent")
    print(f"pointclouds: {len(ds.pointclouds)}")
    return 0


def _cmd_annotate(args) -> int:
    ds = load_dataset(args.dataset, args.filter_step)
    session = load_session(Path(args.session).read_bytes())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = BboxConfig()
    annotations = AnnotationSet()

    def one_shot(shot):
        return shot.id, bbox_for_shot(
            session.elements, ds.intrinsics, shot.extrinsics, shot.id, config
        )

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        for sid, rects in pool.map(one_shot, ds.shots.values()):
            for oid, rect in rects.items():
                element = session.element_by_id(oid)
                annotations.rect2d[(sid, oid)] = (element.class_name, rect, element.color)
    for element in session.elements:
        annotations.pose3d[element.id] = (
            element.position,
            element.rotation,
            element.color,
        )
    annotations.validate(session)
    two_d, three_d = export_annotations(annotations)
    (out_dir / "annotations_2d.json").write_bytes(two_d)
    (out_dir / "annotations_3d.json").write_bytes(three_d)
    print(f"wrote {out_dir / 'annotations_2d.json'} and {out_dir / 'annotations_3d.json'}")
    return 0


def _cmd_register(args) -> int:
    source = np.asarray(_load_json_file(args.source), dtype=float)
    target = np.asarray(_load_json_file(args.target), dtype=float)
    _print_matrix(tpsrpm(source, target).matrix)
    return 0


def _cmd_meshless(args) -> int:
    ds = load_dataset(args.dataset, args.filter_step)
    if args.shot not in ds.shots:
        raise Iris3dError(f"shot {args.shot} not in the dataset")
    element = element_from_json(_load_json_file(args.element))
    doc = _load_json_file(args.clicks)
    clicks = np.asarray(doc["clicks"], dtype=float)
    picks = np.asarray(doc["picks"], dtype=float)
    matrix = place_box(element, ds.intrinsics, ds.shots[args.shot].extrinsics, clicks, picks)
    _print_matrix(matrix)
    return 0


def _cmd_snap(args) -> int:
    camera = _load_json_file(args.camera)
    k = CameraIntrinsics.from_json(camera["intrinsics"])
    e = CameraExtrinsics(np.asarray(camera["extrinsics"], dtype=float).reshape(4, 4))
    scene = _read_rgba_png(args.scene_depth)
    element = _read_rgba_png(args.element_depth)
    _print_matrix(snap(scene, element, k, e, SnapConfig()))
    return 0


def _cmd_simplify(args) -> int:
    mesh = parse_ply(Path(args.mesh).read_bytes())
    if not isinstance(mesh, TriangleMesh) or len(mesh.faces) == 0:
        raise Iris3dError(f"{args.mesh} holds no triangle mesh")
    if args.collider:
        simplified = simplify_to_collider(mesh, args.collider_cap)
        save_collider_cache(collider_cache_path(args.mesh), simplified)
    else:
        simplified = simplify(mesh, args.quality)
    out = args.out or (str(args.mesh) + ".simplified.ply")
    Path(out).write_bytes(serialize_ply(simplified))
    print(
        f"{len(mesh.vertices)} -> {len(simplified.vertices)} vertices, "
        f"{len(mesh.faces)} -> {len(simplified.faces)} faces -> {out}"
    )
    return 0


def _cmd_serve(args) -> int:
    print(f"listening on {args.host}:{args.port}")
    serve_blocking(args.host, args.port)
    return 0


def _read_rgba_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGBA"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iris3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print dataset statistics")
    p.add_argument("dataset")
    p.add_argument("--filter-step", type=int, default=1, dest="filter_step")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("annotate", help="run the bbox pipeline over all shots")
    p.add_argument("dataset")
    p.add_argument("session")
    p.add_argument("--out", required=True)
    p.add_argument("--filter-step", type=int, default=1, dest="filter_step")
    p.add_argument("--jobs", type=int, default=4)
    p.set_defaults(func=_cmd_annotate)

    p = sub.add_parser("register", help="9-DoF point-set registration")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("meshless", help="place a cuboid from image clicks")
    p.add_argument("--dataset", required=True)
    p.add_argument("--shot", type=int, required=True)
    p.add_argument("--element", required=True, help="JSON element document")
    p.add_argument("--clicks", required=True, help='JSON {"clicks": [[u,v]x3], "picks": [[x,y,z]x3]}')
    p.add_argument("--filter-step", type=int, default=1, dest="filter_step")
    p.set_defaults(func=_cmd_meshless)

    p = sub.add_parser("snap", help="snap an element onto the scene")
    p.add_argument("--scene-depth", required=True, dest="scene_depth")
    p.add_argument("--element-depth", required=True, dest="element_depth")
    p.add_argument("--camera", required=True, help='JSON {"intrinsics": ..., "extrinsics": [16]}')
    p.set_defaults(func=_cmd_snap)

    p = sub.add_parser("simplify", help="quadric edge-collapse simplification")
    p.add_argument("mesh")
    p.add_argument("--quality", type=float, default=1.0)
    p.add_argument("--out")
    p.add_argument("--collider", action="store_true", help="target the collider vertex cap")
    p.add_argument("--collider-cap", type=int, default=65536, dest="collider_cap")
    p.set_defaults(func=_cmd_simplify)

    p = sub.add_parser("serve", help="run the TCP annotation service")
    p.add_argument("--host", default=os.environ.get("IRIS3D_HOST", "0.0.0.0"))
    p.add_argument(
        "--port", type=int, default=int(os.environ.get("IRIS3D_PORT", DEFAULT_PORT))
    )
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Iris3dError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
