"""Deterministic, GPU-free reference backends and synthetic test cases.

The gt-echo backend replays ground truth whenever a positive prompt lands
inside a structure, making it an exact oracle for the whole pipeline. The
region-grow backend is a real (if tiny) segmenter: tolerance-bounded flood
fill with a previous-frame memory rule standing in for cross-frame memory.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ProtocolError
from .prompts import AuxPoint, AuxPointFile
from .volio import Frame, LabelVolume, Volume, load_labels
from .wireproto import BackendHandler, serve_stdio, serve_tcp

PRESETS = ("two_bars", "two_bars_noisy", "touching_bars")

# 4-neighborhood for component labeling and fills.
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SyntheticCase:
    volume: Volume
    labels: LabelVolume
    aux: AuxPointFile
    preset: str
    seed: int


@dataclass(frozen=True)
class RegionGrowConfig:
    tolerance: float = 0.0
    connectivity: int = 4

    def __post_init__(self):
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.connectivity != 4:
            raise ValueError("only 4-connectivity is supported")


def make_synthetic_case(preset: str, seed: int = 0) -> SyntheticCase:
    """Two-bar phantoms at 16x32x32 with an aux blob mimicking the patella.

    ``two_bars``: intensity-separated bars; ``two_bars_noisy`` adds Gaussian
    sigma-10 noise to intensities only; ``touching_bars`` gives both bars the
    same intensity and makes them adjacent so a flood fill leaks between them.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    s, h, w = 16, 32, 32
    vox = np.zeros((s, h, w), dtype=np.float32)
    labels = np.zeros((s, h, w), dtype=np.int32)
    if preset in ("two_bars", "two_bars_noisy"):
        vox[2:14, 4:12, 4:12] = 200.0
        labels[2:14, 4:12, 4:12] = 1
        vox[2:14, 20:28, 18:26] = 120.0
        labels[2:14, 20:28, 18:26] = 2
        vox[8, 13:17, 27:31] = 160.0  # aux blob, unlabeled
        aux_pt = AuxPoint(structure="patella", slice_index=8, x=28.5, y=14.5)
    else:  # touching_bars: same intensity, shared border at col 15/16
        vox[2:14, 4:12, 4:16] = 200.0
        labels[2:14, 4:12, 4:16] = 1
        vox[2:14, 4:12, 16:28] = 200.0
        labels[2:14, 4:12, 16:28] = 2
        vox[8, 20:24, 14:18] = 160.0
        aux_pt = AuxPoint(structure="patella", slice_index=8, x=15.5, y=21.5)
    if preset == "two_bars_noisy":
        rng = np.random.default_rng(seed)
        vox = vox + rng.normal(0.0, 10.0, size=vox.shape).astype(np.float32)
    volume = Volume(voxels=vox.astype(np.float32), source_dtype="f32")
    label_vol = LabelVolume(labels=labels,
                            label_names={1: "femur", 2: "tibia"})
    return SyntheticCase(volume=volume, labels=label_vol,
                         aux=AuxPointFile(points=(aux_pt,)),
                         preset=preset, seed=seed)


# ---------------------------------------------------------------------------
# gt-echo


def _point_hits(gt: LabelVolume, slice_index: int, x: float, y: float,
                object_id: int) -> bool:
    s, h, w = gt.dims
    r, c = int(round(y)), int(round(x))
    if not (0 <= r < h and 0 <= c < w and 0 <= slice_index < s):
        return False
    return int(gt.labels[slice_index, r, c]) == object_id


def gt_echo_segment(frame_index: int, prompts: list[dict], gt: LabelVolume,
                    objects=None) -> dict:
    """Return the GT slice mask for each object one of whose positive prompts
    lands inside it; empty otherwise. Negatives are ignored."""
    if objects is None:
        objects = sorted({p["object"] for p in prompts
                          if isinstance(p["object"], int)})
    out = {}
    for obj in objects:
        hit = False
        for p in prompts:
            if p.get("object") != obj:
                continue
            if p.get("kind") == "point" and p.get("label", 1) == 1:
                if _point_hits(gt, frame_index, p["x"], p["y"], obj):
                    hit = True
                    break
            elif p.get("kind") == "box":
                x0, y0, x1, y1 = p["box"]
                r0, r1 = int(np.floor(y0)), int(np.ceil(y1)) + 1
                c0, c1 = int(np.floor(x0)), int(np.ceil(x1)) + 1
                region = gt.labels[frame_index, max(r0, 0):r1, max(c0, 0):c1]
                if np.any(region == obj):
                    hit = True
                    break
        out[obj] = gt.mask_for(obj, frame_index) if hit \
            else np.zeros(gt.dims[1:], dtype=bool)
    return out


class _VideoSession:
    def __init__(self, n_frames: int):
        self.n_frames = n_frames
        self.frames: dict[int, np.ndarray] = {}
        self.points: dict = {}  # object -> (frame_index, [point dicts])

    def add_frame(self, frame: Frame) -> None:
        if not (0 <= frame.slice_index < self.n_frames):
            raise ProtocolError(
                f"frame index {frame.slice_index} outside session of "
                f"{self.n_frames}", code="bad_frame")
        self.frames[frame.slice_index] = frame.pixels

    def add_points(self, frame_index: int, object_id, points) -> None:
        if frame_index not in self.frames:
            raise ProtocolError(f"frame {frame_index} not appended",
                                code="bad_frame")
        self.points.setdefault(object_id, (frame_index, []))
        anchor, pts = self.points[object_id]
        if anchor != frame_index:
            raise ProtocolError("prompts must all target one frame",
                                code="multi_anchor")
        pts.extend(points)

    def frame_range(self, direction: str):
        anchors = {a for a, _ in self.points.values()}
        if not anchors:
            raise ProtocolError("propagate before add_points", code="no_points")
        anchor = min(anchors)
        if direction == "forward":
            return list(range(anchor, self.n_frames))
        return list(range(anchor, -1, -1))


class GtEchoHandler(BackendHandler):
    backend_id = "gtecho"
    modes = ("image", "video")

    def __init__(self, gt: LabelVolume):
        self.gt = gt
        self.session: _VideoSession | None = None

    def segment_image(self, frame, prompts, objects):
        return gt_echo_segment(frame.slice_index, prompts, self.gt,
                               objects or None)

    def start_session(self, n_frames):
        if self.session is not None:
            raise ProtocolError("session already active", code="busy")
        self.session = _VideoSession(n_frames)

    def _session(self) -> _VideoSession:
        if self.session is None:
            raise ProtocolError("no active session", code="no_session")
        return self.session

    def append_frame(self, frame):
        self._session().add_frame(frame)

    def add_points(self, frame_index, object_id, points):
        self._session().add_points(frame_index, object_id, points)

    def propagate(self, direction):
        sess = self._session()
        order = sess.frame_range(direction)
        hits = {}
        for obj, (anchor, pts) in sess.points.items():
            hits[obj] = any(
                p.get("label", 1) == 1
                and _point_hits(self.gt, anchor, p["x"], p["y"], obj)
                for p in pts)
        empty = np.zeros(self.gt.dims[1:], dtype=bool)
        for frame_index in order:
            for obj in sorted(sess.points, key=str):
                mask = self.gt.mask_for(obj, frame_index) if hits[obj] else empty
                yield frame_index, obj, mask

    def end_session(self):
        self._session()
        self.session = None


# ---------------------------------------------------------------------------
# region-grow


def _fill_from(admissible: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Union of 4-connected components of `admissible` containing any seed."""
    if not seeds.any():
        return np.zeros_like(admissible)
    comp, n = ndimage.label(admissible, structure=_CROSS)
    ids = np.unique(comp[seeds & admissible])
    ids = ids[ids != 0]
    if len(ids) == 0:
        return np.zeros_like(admissible)
    return np.isin(comp, ids)


def _geodesic(admissible: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """4-connected geodesic distance inside `admissible`; inf if unreachable."""
    dist = np.full(admissible.shape, np.inf)
    frontier = seeds & admissible
    d = 0
    while frontier.any():
        dist[frontier] = d
        reached = np.isfinite(dist)
        frontier = ndimage.binary_dilation(frontier, structure=_CROSS) \
            & admissible & ~reached
        d += 1
    return dist


def _claim(admissible: np.ndarray, pos_seed: np.ndarray,
           neg_seed: np.ndarray) -> np.ndarray:
    """Pixels geodesically closer to a positive than to any negative.

    Negatives win ties, so an equidistant border pixel is excluded; a
    component holding only negatives is removed entirely.
    """
    dist_pos = _geodesic(admissible, pos_seed)
    if not neg_seed.any():
        return np.isfinite(dist_pos)
    dist_neg = _geodesic(admissible, neg_seed)
    return np.isfinite(dist_pos) & (dist_pos < dist_neg)


def region_grow_segment(pixels: np.ndarray, prompts: list[dict],
                        cfg: RegionGrowConfig,
                        memory: np.ndarray | None = None,
                        ref_intensity: float | None = None) -> np.ndarray:
    """Tolerance-bounded 4-connected flood fill with negative-prompt pruning.

    Positive points seed fills admitting pixels within ``cfg.tolerance`` of
    the seed intensity; pixels of ``memory`` (the previous frame's mask) that
    still satisfy the criterion seed the fill too. Negative points compete
    with positives for geodesically closer pixels (ties to the negative), so
    a component containing only a negative disappears entirely, and a
    negative in a touching same-intensity structure cuts the fill at the
    equidistant border.
    """
    img = pixels.astype(np.float64)
    h, w = img.shape
    positives = [(p["x"], p["y"]) for p in prompts
                 if p.get("kind") == "point" and p.get("label", 1) == 1]
    negatives = [(p["x"], p["y"]) for p in prompts
                 if p.get("kind") == "point" and p.get("label", 1) == 0]
    boxes = [tuple(p["box"]) for p in prompts if p.get("kind") == "box"]
    if not positives and not boxes and (memory is None or not memory.any()):
        raise ValueError("need a positive seed, a box, or nonempty memory")

    neg_seed = np.zeros((h, w), dtype=bool)
    for x, y in negatives:
        r, c = int(round(y)), int(round(x))
        if 0 <= r < h and 0 <= c < w:
            neg_seed[r, c] = True

    mask = np.zeros((h, w), dtype=bool)
    for x, y in positives:
        r, c = int(round(y)), int(round(x))
        if not (0 <= r < h and 0 <= c < w):
            continue
        ref = img[r, c] if ref_intensity is None else ref_intensity
        admissible = np.abs(img - ref) <= cfg.tolerance
        seed = np.zeros((h, w), dtype=bool)
        seed[r, c] = True
        mask |= _claim(admissible, seed, neg_seed)

    # A box seeds at its center and confines the fill to its interior.
    for x0, y0, x1, y1 in boxes:
        r, c = int(round((y0 + y1) / 2)), int(round((x0 + x1) / 2))
        if not (0 <= r < h and 0 <= c < w):
            continue
        ref = img[r, c] if ref_intensity is None else ref_intensity
        admissible = np.abs(img - ref) <= cfg.tolerance
        inside = np.zeros((h, w), dtype=bool)
        inside[max(int(np.floor(y0)), 0):int(np.ceil(y1)) + 1,
               max(int(np.floor(x0)), 0):int(np.ceil(x1)) + 1] = True
        seed = np.zeros((h, w), dtype=bool)
        seed[r, c] = True
        mask |= _claim(admissible & inside, seed, neg_seed)

    if memory is not None and memory.any():
        ref = ref_intensity
        if ref is None and positives:
            r, c = int(round(positives[0][1])), int(round(positives[0][0]))
            ref = img[r, c]
        if ref is not None:
            admissible = np.abs(img - ref) <= cfg.tolerance
            mask |= _claim(admissible, memory, neg_seed)
    return mask


class RegionGrowHandler(BackendHandler):
    backend_id = "regiongrow"
    modes = ("image", "video")

    def __init__(self, cfg: RegionGrowConfig | None = None):
        self.cfg = cfg or RegionGrowConfig()
        self.session: _VideoSession | None = None

    def segment_image(self, frame, prompts, objects):
        out = {}
        for obj in objects:
            obj_prompts = [p for p in prompts if p.get("object") == obj]
            has_seed = any(
                p.get("kind") == "box"
                or (p.get("kind") == "point" and p.get("label", 1) == 1)
                for p in obj_prompts)
            if has_seed:
                out[obj] = region_grow_segment(frame.pixels, obj_prompts,
                                               self.cfg)
            else:
                out[obj] = np.zeros(frame.pixels.shape, dtype=bool)
        return out

    def start_session(self, n_frames):
        if self.session is not None:
            raise ProtocolError("session already active", code="busy")
        self.session = _VideoSession(n_frames)

    def _session(self) -> _VideoSession:
        if self.session is None:
            raise ProtocolError("no active session", code="no_session")
        return self.session

    def append_frame(self, frame):
        self._session().add_frame(frame)

    def add_points(self, frame_index, object_id, points):
        self._session().add_points(frame_index, object_id, points)

    def propagate(self, direction):
        sess = self._session()
        order = sess.frame_range(direction)
        state = {}
        for obj, (anchor, pts) in sess.points.items():
            prompts = [{"kind": "point", **p} for p in pts]
            pixels = sess.frames[anchor]
            ref = None
            for p in pts:
                if p.get("label", 1) == 1:
                    r, c = int(round(p["y"])), int(round(p["x"]))
                    ref = float(pixels[r, c])
                    break
            mask = region_grow_segment(pixels, prompts, self.cfg,
                                       ref_intensity=ref)
            state[obj] = (mask, ref)
        for i, frame_index in enumerate(order):
            pixels = sess.frames.get(frame_index)
            if pixels is None:
                raise ProtocolError(f"frame {frame_index} was never appended",
                                    code="bad_frame")
            for obj in sorted(sess.points, key=str):
                prev, ref = state[obj]
                if i == 0:
                    mask = prev
                elif prev.any():
                    mask = region_grow_segment(pixels, [], self.cfg,
                                               memory=prev, ref_intensity=ref)
                else:
                    mask = np.zeros_like(prev)
                state[obj] = (mask, ref)
                yield frame_index, obj, mask

    def end_session(self):
        self._session()
        self.session = None


# ---------------------------------------------------------------------------
# entry points


def _serve(handler: BackendHandler, port: int | None) -> None:
    if port is None:
        serve_stdio(handler)
    else:
        serve_tcp(handler, port)


def _parse_names(spec: str | None):
    if spec is None:
        return None
    out = {}
    for part in spec.split(","):
        k, v = part.split(":")
        out[int(k)] = v.strip()
    return out


def gtecho_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="slicecast-backend-gtecho")
    ap.add_argument("gt", help="ground-truth label volume")
    ap.add_argument("--names", help="label names, e.g. '1:femur,2:tibia'")
    ap.add_argument("--port", type=int)
    args = ap.parse_args(argv)
    gt = load_labels(args.gt, label_names=_parse_names(args.names))
    _serve(GtEchoHandler(gt), args.port)
    return 0


def regiongrow_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="slicecast-backend-regiongrow")
    ap.add_argument("--tolerance", type=float, default=0.0)
    ap.add_argument("--port", type=int)
    args = ap.parse_args(argv)
    _serve(RegionGrowHandler(RegionGrowConfig(tolerance=args.tolerance)),
           args.port)
    return 0
