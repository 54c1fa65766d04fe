"""Wire-protocol server: newline-delimited JSON over stdio or TCP.

Implements the slicecast backend contract: `hello` -> `capabilities`,
`segment_image` -> `masks`, and the video session messages
(`start_session`, `append_frame`, `add_points`, `propagate` -> `mask`
stream + `done`, `end_session`). Masks leave as background-first RLE.
"""

from __future__ import annotations

import base64
import json
import socket
import sys

import numpy as np

from .config import AdapterConfig
from .predictors import load_predictors, to_rgb


class WireError(Exception):
    def __init__(self, text, code="protocol"):
        self.code = code
        super().__init__(text)


def encode_rle(mask: np.ndarray) -> dict:
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    flat = m.ravel()
    changes = np.flatnonzero(np.diff(flat))
    bounds = np.concatenate(([0], changes + 1, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"w": w, "h": h, "runs": [int(r) for r in runs]}


def decode_frame(d: dict) -> np.ndarray:
    w, h = int(d["w"]), int(d["h"])
    raw = base64.b64decode(d["b64"])
    if len(raw) != w * h:
        raise WireError(f"frame payload {len(raw)} bytes, expected {w * h}",
                        code="bad_frame")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


def _split_prompts(prompts, object_id):
    """Points (N,2), labels (N,), and at most one box for one object."""
    coords, labels, box = [], [], None
    for p in prompts:
        if p.get("object") != object_id:
            continue
        if p.get("kind") == "point":
            coords.append([float(p["x"]), float(p["y"])])
            labels.append(int(p.get("label", 1)))
        elif p.get("kind") == "box":
            box = np.asarray(p["box"], dtype=np.float64)
    if coords:
        return np.asarray(coords), np.asarray(labels, dtype=np.int64), box
    return None, None, box


class _Session:
    def __init__(self, n_frames: int):
        self.n_frames = n_frames
        self.frames: dict[int, np.ndarray] = {}
        self.points: dict = {}  # object -> (frame, coords, labels)

    def append(self, index: int, gray: np.ndarray) -> None:
        if not (0 <= index < self.n_frames):
            raise WireError(f"frame index {index} outside session of "
                            f"{self.n_frames}", code="bad_frame")
        self.frames[index] = gray

    def add_points(self, frame: int, object_id, points) -> None:
        if frame not in self.frames:
            raise WireError(f"frame {frame} not appended", code="bad_frame")
        coords = np.asarray([[float(p["x"]), float(p["y"])] for p in points])
        labels = np.asarray([int(p.get("label", 1)) for p in points],
                            dtype=np.int64)
        if len(coords) == 0:
            raise WireError("add_points with no points", code="no_points")
        self.points[object_id] = (frame, coords, labels)

    def order(self, direction: str) -> list[int]:
        if not self.points:
            raise WireError("propagate before add_points", code="no_points")
        anchor = min(frame for frame, _, _ in self.points.values())
        if direction == "forward":
            return list(range(anchor, self.n_frames))
        return list(range(anchor, -1, -1))


class AdapterServer:
    def __init__(self, config: AdapterConfig):
        self.config = config
        self.image_predictor, self.video_predictor = load_predictors(config)
        self.session: _Session | None = None

    # -- message handlers

    def _capabilities(self, msg):
        return {"type": "capabilities", "backend_id": self.config.backend_id,
                "modes": list(self.config.modes)}

    def _segment_image(self, msg):
        prompts = msg.get("prompts", [])
        if not prompts:
            raise WireError("no prompts supplied", code="no_prompts")
        gray = decode_frame(msg["frame"])
        self.image_predictor.set_image(to_rgb(gray))
        masks = []
        for obj in msg.get("objects", []):
            coords, labels, box = _split_prompts(prompts, obj)
            if coords is None and box is None:
                mask = np.zeros(gray.shape, dtype=bool)
            else:
                mask = self.image_predictor.predict(coords, labels, box)
            if mask.shape != gray.shape:
                raise WireError("predictor returned wrong mask dims",
                                code="internal")
            masks.append({"object": obj, "rle": encode_rle(mask)})
        return {"type": "masks", "masks": masks}

    def _require_video(self):
        if self.video_predictor is None:
            raise WireError(f"{self.config.backend_id} is image-only",
                            code="no_video")

    def _start_session(self, msg):
        self._require_video()
        if self.session is not None:
            raise WireError("session already active", code="busy")
        self.session = _Session(int(msg["n_frames"]))
        return {"type": "ok"}

    def _session_or_die(self) -> _Session:
        if self.session is None:
            raise WireError("no active session", code="no_session")
        return self.session

    def _append_frame(self, msg):
        sess = self._session_or_die()
        sess.append(int(msg["index"]), decode_frame(msg["frame"]))
        return {"type": "ok"}

    def _add_points(self, msg):
        sess = self._session_or_die()
        sess.add_points(int(msg["frame"]), msg["object"],
                        msg.get("points", []))
        return {"type": "ok"}

    def _propagate_stream(self, msg):
        sess = self._session_or_die()
        direction = msg.get("direction")
        if direction not in ("forward", "backward"):
            raise WireError(f"bad direction {direction!r}",
                            code="bad_direction")
        order = sess.order(direction)
        missing = [i for i in order if i not in sess.frames]
        if missing:
            raise WireError(f"frames {missing} were never appended",
                            code="bad_frame")
        # Wire object ids may be strings; predictors want ints.
        keys = {obj: i + 1 for i, obj in
                enumerate(sorted(sess.points, key=str))}
        objects = {v: k for k, v in keys.items()}
        frames = [to_rgb(sess.frames[i]) if i in sess.frames
                  else np.zeros((*next(iter(sess.frames.values())).shape, 3),
                                np.uint8)
                  for i in range(sess.n_frames)]
        self.video_predictor.init_state(frames)
        for obj, (frame, coords, labels) in sess.points.items():
            self.video_predictor.add_points(frame, keys[obj], coords, labels)
        for frame_index, key, mask in self.video_predictor.propagate(order):
            yield {"type": "mask", "frame": int(frame_index),
                   "object": objects[int(key)], "rle": encode_rle(mask)}

    def _end_session(self, msg):
        self._session_or_die()
        self.session = None
        return {"type": "ok"}

    # -- dispatch loop

    def serve(self, reader, writer) -> None:
        def reply(obj):
            writer.write((json.dumps(obj) + "\n").encode("utf-8"))
            writer.flush()

        handlers = {
            "hello": self._capabilities,
            "segment_image": self._segment_image,
            "start_session": self._start_session,
            "append_frame": self._append_frame,
            "add_points": self._add_points,
            "end_session": self._end_session,
        }
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
                if msg_type == "propagate":
                    for item in self._propagate_stream(msg):
                        reply({**item, "id": req_id})
                    reply({"type": "done", "id": req_id})
                elif msg_type in handlers:
                    reply({**handlers[msg_type](msg), "id": req_id})
                else:
                    raise WireError(f"unknown message type {msg_type!r}",
                                    code="bad_type")
            except WireError as e:
                reply({"type": "error", "id": req_id, "code": e.code,
                       "text": str(e)})
            except Exception as e:
                reply({"type": "error", "id": req_id, "code": "internal",
                       "text": f"{type(e).__name__}: {e}"})

    def serve_stdio(self) -> None:
        self.serve(sys.stdin.buffer, sys.stdout.buffer)

    def serve_tcp(self, port: int, host: str = "127.0.0.1") -> None:
        srv = socket.create_server((host, port))
        try:
            while True:
                conn, _ = srv.accept()
                with conn:
                    f = conn.makefile("rwb")
                    self.serve(f, f)
        finally:
            srv.close()
