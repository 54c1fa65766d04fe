"""Full-volume orchestration: per-slice image mode and anchor-then-propagate
video mode, plus the prediction file format."""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (FormatError, GridError, PartialResultError, ProtocolError,
                     SlicecastError, TransportError)
from .prompts import VIDEO_SCHEMES, PointPrompt, PromptSet
from .volio import Frame
from .wireproto import (BackendConnection, RleMask, decode_mask_rle,
                        encode_mask_rle)

PRED_FORMAT = "slicecast-pred/1"


@dataclass
class PredictionSet:
    """One binary mask per (object, slice), with run provenance."""

    dims: tuple[int, int, int]
    masks: dict  # object_id -> (S, H, W) bool array
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        s, h, w = self.dims
        for obj, stack in self.masks.items():
            if stack.shape != (s, h, w):
                raise GridError(f"object {obj}: mask stack {stack.shape} != "
                                f"{(s, h, w)}")

    def save(self, path) -> None:
        objects = sorted(self.masks, key=lambda o: (isinstance(o, str), str(o)))
        header = {"format": PRED_FORMAT, "dims": list(self.dims),
                  "objects": objects, "provenance": self.provenance}
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for obj in objects:
                for s in range(self.dims[0]):
                    rle = encode_mask_rle(self.masks[obj][s])
                    f.write(json.dumps({"object": obj, "slice": s,
                                        "runs": list(rle.runs)}) + "\n")

    @classmethod
    def load(cls, path) -> "PredictionSet":
        with open(path, "r", encoding="utf-8") as f:
            header = json.loads(f.readline())
            if header.get("format") != PRED_FORMAT:
                raise FormatError(
                    f"unexpected prediction format {header.get('format')!r}")
            s, h, w = header["dims"]
            masks = {obj: np.zeros((s, h, w), dtype=bool)
                     for obj in header["objects"]}
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                rle = RleMask(width=w, height=h, runs=tuple(rec["runs"]))
                masks[rec["object"]][rec["slice"]] = decode_mask_rle(rle)
        return cls(dims=(s, h, w), masks=masks,
                   provenance=header.get("provenance", {}))


def _base_provenance(ps: PromptSet, conn: BackendConnection, window,
                     deterministic: bool) -> dict:
    prov = {
        "scheme": ps.scheme,
        "backend_id": (conn.capabilities.backend_id
                       if conn.capabilities else None),
        "anchor_slice": ps.anchor_slice,
        "window": list(window) if window is not None else None,
    }
    if not deterministic:
        prov["timestamps"] = {
            "started": datetime.datetime.now(datetime.timezone.utc).isoformat()
        }
    return prov


def _default_objects(ps: PromptSet) -> list:
    objs = [o for o in ps.object_ids if isinstance(o, (int, np.integer))]
    if not objs:
        raise ValueError("prompt set targets no integer-labelled objects")
    return objs


def run_image_mode(frames: list[Frame], ps: PromptSet, conn: BackendConnection,
                   objects=None, window=None,
                   deterministic: bool = False) -> PredictionSet:
    """Per-slice requests; slices without prompts yield empty masks."""
    if ps.scheme not in ("point", "box"):
        raise ValueError(f"image mode requires a per-slice scheme, got "
                         f"{ps.scheme!r}")
    if conn.capabilities is None:
        conn.hello()
    objects = _default_objects(ps) if objects is None else list(objects)
    s_count = len(frames)
    h, w = frames[0].pixels.shape
    masks = {obj: np.zeros((s_count, h, w), dtype=bool) for obj in objects}
    prov = _base_provenance(ps, conn, window, deterministic)
    done = []
    for frame in frames:
        slice_prompts = ps.on_slice(frame.slice_index)
        if not slice_prompts:
            continue
        try:
            result = conn.segment_image(frame, slice_prompts, objects)
        except (ProtocolError, TransportError) as e:
            prov["partial"] = {"completed_slices": done, "failed_at":
                               frame.slice_index}
            err = PartialResultError(
                f"backend failed at slice {frame.slice_index}: {e}",
                completed=done)
            err.provenance = prov
            raise err from e
        for obj in objects:
            masks[obj][frame.slice_index] = result[obj]
        done.append(frame.slice_index)
    pred = PredictionSet(dims=(s_count, h, w), masks=masks, provenance=prov)
    pred.validate()
    return pred


def _anchor_points(ps: PromptSet, obj) -> list[tuple[float, float, int]]:
    pts = []
    for p in ps.prompts:
        if isinstance(p, PointPrompt) and p.object_id == obj:
            pts.append((p.x, p.y, 1 if p.sign == "positive" else 0))
    return pts


def _run_direction(conn, frames, ps, objects, direction):
    conn.start_session(len(frames))
    for frame in frames:
        conn.append_frame(frame)
    for obj in objects:
        pts = _anchor_points(ps, obj)
        if pts:
            conn.add_points(ps.anchor_slice, obj, pts)
    results = conn.propagate(direction)
    conn.end_session()
    return results


def run_video_mode(frames: list[Frame], ps: PromptSet, conn: BackendConnection,
                   objects=None, window=None, deterministic: bool = False,
                   per_object_sessions: bool = False) -> PredictionSet:
    """Anchor prompts, then one session per direction; forward wins the anchor.

    Forward covers anchor..S-1 and backward anchor..0; merging the two gives
    every (object, slice) exactly one mask.
    """
    if ps.scheme not in VIDEO_SCHEMES:
        raise ValueError(f"video mode requires a video scheme, got {ps.scheme!r}")
    if conn.capabilities is None:
        conn.hello()
    objects = _default_objects(ps) if objects is None else list(objects)
    s_count = len(frames)
    h, w = frames[0].pixels.shape
    anchor = ps.anchor_slice
    if not (0 <= anchor < s_count):
        raise ValueError(f"anchor {anchor} outside [0, {s_count})")
    masks = {obj: np.zeros((s_count, h, w), dtype=bool) for obj in objects}
    filled = {obj: np.zeros(s_count, dtype=bool) for obj in objects}
    prov = _base_provenance(ps, conn, window, deterministic)

    object_groups = [[obj] for obj in objects] if per_object_sessions \
        else [objects]
    # Backward first so the forward pass overwrites the shared anchor frame.
    for direction in ("backward", "forward"):
        for group in object_groups:
            try:
                results = _run_direction(conn, frames, ps, group, direction)
            except (ProtocolError, TransportError, SlicecastError) as e:
                err = PartialResultError(
                    f"{direction} pass failed: {e}",
                    completed=[(o, int(i)) for o in filled
                               for i in np.flatnonzero(filled[o])])
                err.direction = direction
                raise err from e
            for frame_index, obj, mask in results:
                if obj not in masks:
                    continue
                masks[obj][frame_index] = mask
                filled[obj][frame_index] = True

    for obj in objects:
        if not filled[obj].all():
            missing = np.flatnonzero(~filled[obj]).tolist()
            raise PartialResultError(
                f"object {obj}: no mask for slices {missing}",
                completed=[(obj, int(i)) for i in np.flatnonzero(filled[obj])])
    pred = PredictionSet(dims=(s_count, h, w), masks=masks, provenance=prov)
    pred.validate()
    return pred


def run(frames, ps, conn, mode: str, **kwargs) -> PredictionSet:
    if mode == "image":
        return run_image_mode(frames, ps, conn, **kwargs)
    if mode == "video":
        return run_video_mode(frames, ps, conn, **kwargs)
    raise ValueError(f"unknown mode {mode!r}")
