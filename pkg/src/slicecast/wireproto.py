"""Backend wire protocol: newline-delimited JSON over stdio or TCP.

Every request is one JSON object per line with a ``type`` and a client-side
monotonically increasing ``id``; every request gets exactly one terminal
response with the matching id. ``propagate`` streams ``mask`` items (each
carrying the request id) terminated by ``done``. Masks cross the wire as
background-first run-length encodings; frame pixels are the only base64
payload.
"""

from __future__ import annotations

import base64
import json
import shlex
import socket
import subprocess
import sys
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, ProtocolError, TransportError
from .prompts import BoxPrompt, PointPrompt
from .volio import Frame


# ---------------------------------------------------------------------------
# RLE mask codec


@dataclass(frozen=True)
class RleMask:
    width: int
    height: int
    runs: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"w": self.width, "h": self.height, "runs": list(self.runs)}

    @classmethod
    def from_dict(cls, d) -> "RleMask":
        return cls(width=int(d["w"]), height=int(d["h"]),
                   runs=tuple(int(r) for r in d["runs"]))


def encode_mask_rle(mask: np.ndarray) -> RleMask:
    """Row-major scan, alternating runs starting with background.

    A leading zero run marks a scan that starts on foreground.
    """
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    flat = m.ravel()
    n = flat.size
    if n == 0:
        return RleMask(width=w, height=h, runs=())
    changes = np.flatnonzero(np.diff(flat))
    bounds = np.concatenate(([0], changes + 1, [n]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(width=w, height=h, runs=tuple(int(r) for r in runs))


def decode_mask_rle(rle: RleMask) -> np.ndarray:
    """Exact inverse of encode; rejects malformed run lists."""
    n = rle.width * rle.height
    runs = rle.runs
    if any(r < 0 for r in runs):
        raise CodecError("negative run length")
    if any(r == 0 for r in runs[1:]):
        raise CodecError("interior zero run")
    if sum(runs) != n:
        raise CodecError(f"run sum {sum(runs)} != {rle.width}x{rle.height}={n}")
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    return flat.reshape(rle.height, rle.width)


# ---------------------------------------------------------------------------
# Wire helpers


def frame_to_wire(frame: Frame) -> dict:
    return {
        "index": frame.slice_index,
        "w": frame.width,
        "h": frame.height,
        "b64": base64.b64encode(frame.pixels.tobytes()).decode("ascii"),
    }


def wire_to_frame(d: dict) -> Frame:
    w, h = int(d["w"]), int(d["h"])
    raw = base64.b64decode(d["b64"])
    if len(raw) != w * h:
        raise ProtocolError(f"frame payload {len(raw)} bytes, expected {w * h}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return Frame(slice_index=int(d.get("index", 0)), pixels=pixels)


def prompt_to_wire(p) -> dict:
    if isinstance(p, PointPrompt):
        return {"kind": "point", "x": p.x, "y": p.y,
                "label": 1 if p.sign == "positive" else 0,
                "object": p.object_id}
    if isinstance(p, BoxPrompt):
        return {"kind": "box", "box": [p.x_min, p.y_min, p.x_max, p.y_max],
                "object": p.object_id}
    raise TypeError(f"not a prompt: {p!r}")


# ---------------------------------------------------------------------------
# Client


@dataclass(frozen=True)
class Capabilities:
    backend_id: str
    modes: tuple[str, ...]


class BackendConnection:
    """Single-threaded client for one backend over stdio-child or TCP."""

    def __init__(self, reader, writer, proc=None, sock=None):
        self._reader = reader
        self._writer = writer
        self._proc = proc
        self._sock = sock
        self._next_id = 1
        self.capabilities: Capabilities | None = None

    @classmethod
    def spawn(cls, command) -> "BackendConnection":
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            proc = subprocess.Popen(argv, stdin=subprocess.PIPE,
                                    stdout=subprocess.PIPE)
        except OSError as e:
            raise TransportError(f"cannot spawn backend {argv[0]!r}: {e}") from e
        return cls(reader=proc.stdout, writer=proc.stdin, proc=proc)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float | None = 30.0
                ) -> "BackendConnection":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise TransportError(f"cannot connect to {host}:{port}: {e}") from e
        f = sock.makefile("rwb")
        return cls(reader=f, writer=f, sock=sock)

    def close(self) -> None:
        try:
            self._writer.close()
        except Exception:
            pass
        if self._sock is not None:
            self._sock.close()
        if self._proc is not None:
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- plumbing

    def _send(self, msg_type: str, **body) -> int:
        req_id = self._next_id
        self._next_id += 1
        line = json.dumps({"type": msg_type, "id": req_id, **body})
        try:
            self._writer.write((line + "\n").encode("utf-8"))
            self._writer.flush()
        except (OSError, ValueError) as e:
            raise TransportError(f"write failed: {e}") from e
        return req_id

    def _recv(self) -> dict:
        try:
            line = self._reader.readline()
        except OSError as e:
            raise TransportError(f"read failed: {e}") from e
        if not line:
            raise TransportError("backend closed the connection")
        try:
            return json.loads(line)
        except json.JSONDecodeError as e:
            raise ProtocolError(f"unparseable message: {line[:200]!r}") from e

    def _expect(self, req_id: int, *types: str) -> dict:
        msg = self._recv()
        if msg.get("type") == "error":
            raise ProtocolError(msg.get("text", "backend error"),
                                code=msg.get("code"))
        if msg.get("id") != req_id:
            raise ProtocolError(
                f"response id {msg.get('id')} does not match request {req_id}")
        if msg.get("type") not in types:
            raise ProtocolError(
                f"unexpected message type {msg.get('type')!r}, wanted {types}")
        return msg

    # -- operations

    def hello(self) -> Capabilities:
        req_id = self._send("hello")
        msg = self._expect(req_id, "capabilities")
        caps = Capabilities(backend_id=str(msg["backend_id"]),
                            modes=tuple(msg["modes"]))
        self.capabilities = caps
        return caps

    def _require_mode(self, mode: str) -> None:
        if self.capabilities is None:
            raise ProtocolError("handshake not completed; call hello() first")
        if mode not in self.capabilities.modes:
            raise ProtocolError(
                f"backend {self.capabilities.backend_id} does not advertise "
                f"{mode!r} mode")

    def segment_image(self, frame: Frame, prompts, objects) -> dict:
        """One request, one mask per requested object id."""
        self._require_mode("image")
        prompts = list(prompts)
        if not prompts:
            raise ProtocolError("segment_image requires at least one prompt")
        req_id = self._send("segment_image",
                            frame=frame_to_wire(frame),
                            prompts=[prompt_to_wire(p) for p in prompts],
                            objects=list(objects))
        msg = self._expect(req_id, "masks")
        out = {}
        for item in msg["masks"]:
            obj = item["object"]
            rle = RleMask.from_dict(item["rle"])
            if (rle.height, rle.width) != frame.pixels.shape:
                raise ProtocolError(
                    f"mask dims {(rle.height, rle.width)} != frame "
                    f"{frame.pixels.shape}")
            out[obj] = decode_mask_rle(rle)
        missing = [o for o in objects if o not in out]
        if missing:
            raise ProtocolError(f"backend omitted masks for objects {missing}")
        return out

    def start_session(self, n_frames: int) -> None:
        self._require_mode("video")
        req_id = self._send("start_session", n_frames=n_frames)
        self._expect(req_id, "ok")

    def append_frame(self, frame: Frame) -> None:
        req_id = self._send("append_frame", index=frame.slice_index,
                            frame=frame_to_wire(frame))
        self._expect(req_id, "ok")

    def add_points(self, frame_index: int, object_id, points) -> None:
        """points: iterable of (x, y, label) with label 1 positive, 0 negative."""
        req_id = self._send("add_points", frame=frame_index, object=object_id,
                            points=[{"x": x, "y": y, "label": label}
                                    for x, y, label in points])
        self._expect(req_id, "ok")

    def propagate(self, direction: str) -> list[tuple[int, object, np.ndarray]]:
        """Stream masks from the prompted frame to one end of the sequence."""
        if direction not in ("forward", "backward"):
            raise ValueError(f"bad direction {direction!r}")
        req_id = self._send("propagate", direction=direction)
        results = []
        while True:
            msg = self._recv()
            if msg.get("type") == "error":
                raise ProtocolError(msg.get("text", "backend error"),
                                    code=msg.get("code"))
            if msg.get("id") != req_id:
                raise ProtocolError(
                    f"stream item id {msg.get('id')} != request {req_id}")
            if msg.get("type") == "done":
                return results
            if msg.get("type") != "mask":
                raise ProtocolError(
                    f"unexpected stream message {msg.get('type')!r}")
            mask = decode_mask_rle(RleMask.from_dict(msg["rle"]))
            results.append((int(msg["frame"]), msg["object"], mask))

    def end_session(self) -> None:
        req_id = self._send("end_session")
        self._expect(req_id, "ok")


def open_backend(spec: str) -> BackendConnection:
    """Open a connection from a backend spec: ``host:port`` or a command line."""
    if ":" in spec and " " not in spec:
        host, port = spec.rsplit(":", 1)
        if port.isdigit():
            return BackendConnection.connect(host, int(port))
    return BackendConnection.spawn(spec)


# ---------------------------------------------------------------------------
# Server side


class BackendHandler:
    """Interface backends implement; raise SlicecastError to report failures."""

    backend_id = "unnamed"
    modes: tuple[str, ...] = ("image",)

    def segment_image(self, frame: Frame, prompts: list[dict],
                      objects: list) -> dict:
        raise NotImplementedError

    def start_session(self, n_frames: int) -> None:
        raise ProtocolError("video mode not supported", code="no_video")

    def append_frame(self, frame: Frame) -> None:
        raise ProtocolError("video mode not supported", code="no_video")

    def add_points(self, frame_index: int, object_id, points: list[dict]) -> None:
        raise ProtocolError("video mode not supported", code="no_video")

    def propagate(self, direction: str):
        raise ProtocolError("video mode not supported", code="no_video")

    def end_session(self) -> None:
        raise ProtocolError("video mode not supported", code="no_video")


def serve(handler: BackendHandler, reader, writer) -> None:
    """Dispatch loop: one connection, strict request/response."""

    def reply(obj):
        writer.write((json.dumps(obj) + "\n").encode("utf-8"))
        writer.flush()

    while True:
        line = reader.readline()
        if not line:
            return
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            reply({"type": "error", "id": None, "code": "parse",
                   "text": "unparseable request"})
            continue
        req_id = msg.get("id")
        msg_type = msg.get("type")
        try:
            if msg_type == "hello":
                reply({"type": "capabilities", "id": req_id,
                       "backend_id": handler.backend_id,
                       "modes": list(handler.modes)})
            elif msg_type == "segment_image":
                frame = wire_to_frame(msg["frame"])
                prompts = msg.get("prompts", [])
                if not prompts:
                    raise ProtocolError("no prompts supplied", code="no_prompts")
                masks = handler.segment_image(frame, prompts,
                                              msg.get("objects", []))
                reply({"type": "masks", "id": req_id,
                       "masks": [{"object": obj,
                                  "rle": encode_mask_rle(m).to_dict()}
                                 for obj, m in masks.items()]})
            elif msg_type == "start_session":
                handler.start_session(int(msg["n_frames"]))
                reply({"type": "ok", "id": req_id})
            elif msg_type == "append_frame":
                frame = wire_to_frame(msg["frame"])
                frame = Frame(slice_index=int(msg["index"]), pixels=frame.pixels)
                handler.append_frame(frame)
                reply({"type": "ok", "id": req_id})
            elif msg_type == "add_points":
                handler.add_points(int(msg["frame"]), msg["object"],
                                   msg.get("points", []))
                reply({"type": "ok", "id": req_id})
            elif msg_type == "propagate":
                direction = msg.get("direction")
                if direction not in ("forward", "backward"):
                    raise ProtocolError(f"bad direction {direction!r}",
                                        code="bad_direction")
                for frame_index, obj, mask in handler.propagate(direction):
                    reply({"type": "mask", "id": req_id, "frame": frame_index,
                           "object": obj,
                           "rle": encode_mask_rle(mask).to_dict()})
                reply({"type": "done", "id": req_id})
            elif msg_type == "end_session":
                handler.end_session()
                reply({"type": "ok", "id": req_id})
            else:
                raise ProtocolError(f"unknown message type {msg_type!r}",
                                    code="bad_type")
        except ProtocolError as e:
            reply({"type": "error", "id": req_id,
                   "code": e.code or "protocol", "text": str(e)})
        except Exception as e:  # surface backend faults, keep serving
            reply({"type": "error", "id": req_id, "code": "internal",
                   "text": f"{type(e).__name__}: {e}"})


def serve_stdio(handler: BackendHandler) -> None:
    serve(handler, sys.stdin.buffer, sys.stdout.buffer)


def serve_tcp(handler: BackendHandler, port: int, host: str = "127.0.0.1") -> None:
    """Serve connections one at a time; sessions are per-connection."""
    srv = socket.create_server((host, port))
    try:
        while True:
            conn, _ = srv.accept()
            with conn:
                f = conn.makefile("rwb")
                serve(handler, f, f)
    finally:
        srv.close()
