"""Message-framed TCP service exposing the solvers.

Frame format: 4-byte big-endian payload length, then UTF-8 JSON. One
response per request, in order, on the same connection; connections stay
open across requests. Binary payloads (PNG bytes) travel as base64 text.

Request types and payloads:
  registration: {"source": [[x,y,z]...], "target": [[x,y,z]...]}
  2D:           {"source": [[x,y,z] x3], "clicks": [[u,v] x3],
                 "intrinsics": {...}, "extrinsics": [16 numbers]}
  bbox:         {"mask": "<base64 PNG>", "colors": {"<objectId>": [r,g,b,a]},
                 "shotId": n}
  snap:         {"sceneDepth": "<base64 PNG>", "elementDepth": "<base64 PNG>",
                 "intrinsics": {...}, "extrinsics": [16 numbers]}

Responses: {"status": "ok", "result": ...} with a 16-number row-major
matrix for transform types, or {objectId: {"shotId", "min", "max"}} for
bbox; errors are {"status": "error", "error": {"code", "message"}}.
"""

import base64
import io
import json
import socket
import socketserver
import struct
import threading

import numpy as np
from PIL import Image

from .bbox import BboxConfig, rects_from_mask
from .camera import CameraExtrinsics, CameraIntrinsics
from .errors import (
    CameraError,
    DegenerateInputError,
    Iris3dError,
    NoRestrictedTransformError,
    NothingToSnapError,
    ProtocolError,
    SolverError,
)
from .meshless import place_from_rays
from .raster import MaskImage
from .registration import tpsrpm
from .snapping import SnapConfig, snap

DEFAULT_PORT = 4444
MAX_FRAME_BYTES = 64 * 1024 * 1024


class FrameSyncError(ProtocolError):
    """Framing broken beyond recovery; the connection must close."""

_ERROR_CODES = {
    ProtocolError: "bad_request",
    DegenerateInputError: "degenerate_input",
    NoRestrictedTransformError: "no_restricted_transform",
    NothingToSnapError: "nothing_to_snap",
    SolverError: "solver_failure",
    CameraError: "bad_camera",
}


def send_frame(sock: socket.socket, obj) -> None:
    body = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">I", len(body)) + body)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def recv_frame(sock: socket.socket):
    """Read one frame; None on clean EOF. Raises ProtocolError on an
    oversized length prefix (the stream cannot be resynchronized)."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise FrameSyncError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES} cap")
    body = _recv_exact(sock, length)
    if body is None:
        return None
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON payload: {exc}") from exc


def _matrix_result(matrix: np.ndarray) -> dict:
    return {"status": "ok", "result": [float(v) for v in np.asarray(matrix).ravel()]}


def _error(code: str, message: str) -> dict:
    return {"status": "error", "error": {"code": code, "message": message}}


def _require(payload: dict, key: str):
    if key not in payload:
        raise ProtocolError(f"missing required field {key!r}")
    return payload[key]


def _parse_camera(payload: dict) -> tuple[CameraIntrinsics, CameraExtrinsics]:
    intr = CameraIntrinsics.from_json(_require(payload, "intrinsics"))
    flat = np.asarray(_require(payload, "extrinsics"), dtype=float)
    if flat.size != 16:
        raise ProtocolError("extrinsics must hold 16 row-major numbers")
    return intr, CameraExtrinsics(flat.reshape(4, 4))


def _decode_png(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        with Image.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("RGBA"))
    except Exception as exc:
        raise ProtocolError(f"payload is not a base64 PNG: {exc}") from exc


def _points(payload, key, rows=None) -> np.ndarray:
    arr = np.asarray(_require(payload, key), dtype=float)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ProtocolError(f"{key!r} must be a 2D point array")
    if rows is not None and arr.shape[0] != rows:
        raise ProtocolError(f"{key!r} must hold exactly {rows} points")
    return arr


def dispatch(request) -> dict:
    """Route one request object to its solver; never raises."""
    try:
        if not isinstance(request, dict):
            raise ProtocolError("request must be a JSON object")
        rtype = request.get("type")
        if rtype == "registration":
            source = _points(request, "source")
            target = _points(request, "target")
            return _matrix_result(tpsrpm(source, target).matrix)
        if rtype == "2D":
            source = _points(request, "source", rows=3)
            clicks = _points(request, "clicks", rows=3)
            k, e = _parse_camera(request)
            return _matrix_result(place_from_rays(source, k, e, clicks))
        if rtype == "bbox":
            pixels = _decode_png(_require(request, "mask"))
            shot_id = int(request.get("shotId", 0))
            colors = _require(request, "colors")
            color_map = {}
            for oid, color in colors.items():
                if len(color) != 4:
                    raise ProtocolError("colors must be RGBA quadruples")
                color_map[tuple(int(c) for c in color)] = int(oid)
            mask = MaskImage(pixels=pixels, color_map=color_map, shot_id=shot_id)
            rects = rects_from_mask(mask, BboxConfig())
            result = {
                str(oid): {
                    "shotId": shot_id,
                    "min": [rect.min_x, rect.min_y],
                    "max": [rect.max_x, rect.max_y],
                }
                for oid, rect in sorted(rects.items())
            }
            return {"status": "ok", "result": result}
        if rtype == "snap":
            scene = _decode_png(_require(request, "sceneDepth"))
            element = _decode_png(_require(request, "elementDepth"))
            k, e = _parse_camera(request)
            return _matrix_result(snap(scene, element, k, e, SnapConfig()))
        raise ProtocolError(f"unknown request type {rtype!r}")
    except Iris3dError as exc:
        code = _ERROR_CODES.get(type(exc), "bad_request")
        return _error(code, str(exc))
    except Exception as exc:  # noqa: BLE001 - the service must never crash
        return _error("internal", f"{type(exc).__name__}: {exc}")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        while True:
            try:
                request = recv_frame(sock)
            except ProtocolError as exc:
                # bad JSON keeps the stream aligned; an oversized length
                # prefix does not, so that connection closes after replying
                try:
                    send_frame(sock, _error("parse_error", str(exc)))
                except OSError:
                    return
                if isinstance(exc, FrameSyncError):
                    return
                continue
            except OSError:
                return
            if request is None:
                return
            try:
                send_frame(sock, dispatch(request))
            except OSError:
                return


class AnnotationServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve(host: str = "0.0.0.0", port: int = DEFAULT_PORT) -> AnnotationServer:
    """Bind and serve forever on a background thread; returns the server
    (callers stop it with .shutdown())."""
    server = AnnotationServer((host, port), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def serve_blocking(host: str = "0.0.0.0", port: int = DEFAULT_PORT) -> None:
    with AnnotationServer((host, port), _Handler) as server:
        server.serve_forever()


def request_over_socket(address: tuple, request: dict, timeout: float = 60.0) -> dict:
    """One request/response round trip (client helper)."""
    with socket.create_connection(address, timeout=timeout) as sock:
        send_frame(sock, request)
        response = recv_frame(sock)
    if response is None:
        raise ProtocolError("connection closed before a response arrived")
    return response
