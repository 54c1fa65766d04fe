"""Point/box prompt derivation from reference masks and scheme assembly.

Four schemes: per-slice centroid points, per-slice bounding boxes, a single
anchor-slice point per object for video propagation, and the anchor point
plus negative points at the other structures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AnchorMissError, FormatError, GridError
from .volio import LabelVolume

SCHEMES = ("point", "box", "point_video", "three_point_video")
VIDEO_SCHEMES = ("point_video", "three_point_video")

PROMPTS_FORMAT = "slicecast-prompts/1"
AUX_FORMAT = "slicecast-aux/1"


@dataclass(frozen=True)
class PointPrompt:
    x: float
    y: float
    sign: str  # "positive" | "negative"
    slice_index: int
    object_id: int | str

    def __post_init__(self):
        if self.sign not in ("positive", "negative"):
            raise ValueError(f"bad sign {self.sign!r}")


@dataclass(frozen=True)
class BoxPrompt:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    slice_index: int
    object_id: int | str

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError("inverted box")


@dataclass(frozen=True)
class AuxPoint:
    structure: str
    slice_index: int
    x: float
    y: float


@dataclass(frozen=True)
class AuxPointFile:
    """Manually supplied points, e.g. a patella point on the middle slice."""

    points: tuple[AuxPoint, ...] = ()

    @classmethod
    def from_dict(cls, d) -> "AuxPointFile":
        pts = tuple(
            AuxPoint(p["structure"], int(p["slice"]), float(p["x"]), float(p["y"]))
            for p in d.get("points", [])
        )
        return cls(points=pts)

    def to_dict(self) -> dict:
        return {
            "format": AUX_FORMAT,
            "points": [
                {"structure": p.structure, "slice": p.slice_index,
                 "x": p.x, "y": p.y}
                for p in self.points
            ],
        }

    @classmethod
    def load(cls, path) -> "AuxPointFile":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


@dataclass(frozen=True)
class PromptSet:
    scheme: str
    prompts: tuple = ()
    anchor_slice: int | None = None
    aux_points: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme in VIDEO_SCHEMES:
            if self.anchor_slice is None:
                raise ValueError("video scheme requires an anchor slice")
            for p in self.prompts:
                if p.slice_index != self.anchor_slice:
                    raise ValueError("video-scheme prompt off the anchor slice")
        elif self.anchor_slice is not None:
            raise ValueError("per-slice scheme must not carry an anchor slice")
        keys = [_dedup_key(p) for p in self.prompts]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate prompts in set")

    def on_slice(self, slice_index: int) -> list:
        return [p for p in self.prompts if p.slice_index == slice_index]

    @property
    def object_ids(self) -> list:
        """Label ids the set targets with positive prompts (ints before strs)."""
        seen = []
        for p in self.prompts:
            sign = getattr(p, "sign", "positive")
            if sign == "positive" and p.object_id not in seen:
                seen.append(p.object_id)
        return sorted(seen, key=lambda o: (isinstance(o, str), o))

    def to_dict(self) -> dict:
        return {
            "format": PROMPTS_FORMAT,
            "scheme": self.scheme,
            "anchor_slice": self.anchor_slice,
            "prompts": [_prompt_to_dict(p) for p in self.prompts],
            "aux_points": {
                name: _prompt_to_dict(p) for name, p in sorted(self.aux_points.items())
            },
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d) -> "PromptSet":
        if d.get("format") != PROMPTS_FORMAT:
            raise FormatError(f"unexpected prompts format {d.get('format')!r}")
        return cls(
            scheme=d["scheme"],
            anchor_slice=d.get("anchor_slice"),
            prompts=tuple(_prompt_from_dict(p) for p in d["prompts"]),
            aux_points={k: _prompt_from_dict(v)
                        for k, v in d.get("aux_points", {}).items()},
            provenance=d.get("provenance", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, s: str) -> "PromptSet":
        return cls.from_dict(json.loads(s))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path) -> "PromptSet":
        with open(path, "r", encoding="utf-8") as f:
            return cls.loads(f.read())


def _dedup_key(p):
    if isinstance(p, PointPrompt):
        return ("pt", p.slice_index, p.object_id, p.sign, p.x, p.y)
    return ("box", p.slice_index, p.object_id, p.x_min, p.y_min, p.x_max, p.y_max)


def _prompt_to_dict(p) -> dict:
    if isinstance(p, PointPrompt):
        return {"kind": "point", "x": p.x, "y": p.y, "sign": p.sign,
                "slice": p.slice_index, "object": p.object_id}
    return {"kind": "box", "x_min": p.x_min, "y_min": p.y_min,
            "x_max": p.x_max, "y_max": p.y_max,
            "slice": p.slice_index, "object": p.object_id}


def _prompt_from_dict(d):
    if d["kind"] == "point":
        return PointPrompt(x=d["x"], y=d["y"], sign=d["sign"],
                           slice_index=d["slice"], object_id=d["object"])
    if d["kind"] == "box":
        return BoxPrompt(x_min=d["x_min"], y_min=d["y_min"],
                         x_max=d["x_max"], y_max=d["y_max"],
                         slice_index=d["slice"], object_id=d["object"])
    raise FormatError(f"unknown prompt kind {d.get('kind')!r}")


def centroid(mask: np.ndarray) -> tuple[float, float] | None:
    """Foreground centroid as (x, y) floats, None for an empty mask.

    The mean is not snapped into the mask; for concave foreground it may
    land outside.
    """
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return float(xs.mean()), float(ys.mean())


def snap_to_foreground(mask: np.ndarray, x: float, y: float) -> tuple[float, float]:
    """Nearest foreground pixel to (x, y), euclidean, ties by scan order."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("cannot snap into an empty mask")
    d2 = (xs - x) ** 2 + (ys - y) ** 2
    i = int(np.argmin(d2))
    return float(xs[i]), float(ys[i])


def bounding_box(mask: np.ndarray):
    """Tight (x_min, y_min, x_max, y_max) over foreground, None if empty."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))


def default_anchor(n_slices: int) -> int:
    return n_slices // 2


def build_prompts(labels: LabelVolume, scheme: str,
                  aux: AuxPointFile | None = None,
                  anchor: int | None = None,
                  snap: bool = False) -> PromptSet:
    """Assemble a PromptSet for one of the four schemes.

    Per-slice schemes emit one prompt per object per non-empty slice; video
    schemes prompt only the anchor slice (defaults to S // 2).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    s_count, h, w = labels.dims
    objects = sorted(labels.label_names)
    aux_pts = list(aux.points) if aux is not None else []
    for p in aux_pts:
        if not (0 <= p.slice_index < s_count):
            raise GridError(
                f"aux point {p.structure!r} references slice {p.slice_index} "
                f"outside [0, {s_count})"
            )

    provenance: dict = {"snap": snap}
    warnings: list[str] = []

    def _centroid_prompt(obj, s, sign="positive"):
        mask = labels.mask_for(obj, s)
        c = centroid(mask)
        if c is None:
            return None
        x, y = c
        if snap and not mask[int(round(y)), int(round(x))]:
            x, y = snap_to_foreground(mask, x, y)
        return PointPrompt(x=x, y=y, sign=sign, slice_index=s, object_id=obj)

    if scheme == "point":
        prompts = []
        for obj in objects:
            for s in range(s_count):
                p = _centroid_prompt(obj, s)
                if p is not None:
                    prompts.append(p)
        for ap in aux_pts:
            prompts.append(PointPrompt(x=ap.x, y=ap.y, sign="positive",
                                       slice_index=ap.slice_index,
                                       object_id=ap.structure))
        return PromptSet(scheme=scheme, prompts=tuple(prompts),
                         provenance=provenance)

    if scheme == "box":
        prompts = []
        for obj in objects:
            for s in range(s_count):
                bb = bounding_box(labels.mask_for(obj, s))
                if bb is not None:
                    prompts.append(BoxPrompt(*bb, slice_index=s, object_id=obj))
        return PromptSet(scheme=scheme, prompts=tuple(prompts),
                         provenance=provenance)

    # Video schemes.
    anchor_slice = default_anchor(s_count) if anchor is None else anchor
    if not (0 <= anchor_slice < s_count):
        raise ValueError(f"anchor {anchor_slice} outside [0, {s_count})")
    provenance["anchor_rule"] = "floor(S/2)" if anchor is None else "explicit"

    positives = {}
    for obj in objects:
        p = _centroid_prompt(obj, anchor_slice)
        if p is None:
            raise AnchorMissError(obj, anchor_slice)
        positives[obj] = p

    prompts = list(positives.values())
    aux_on_anchor = []
    aux_points = {}
    for ap in aux_pts:
        pt = PointPrompt(x=ap.x, y=ap.y, sign="positive",
                         slice_index=ap.slice_index, object_id=ap.structure)
        aux_points[ap.structure] = pt
        if ap.slice_index == anchor_slice:
            aux_on_anchor.append(ap)
        elif scheme == "three_point_video":
            warnings.append(
                f"aux point {ap.structure!r} is on slice {ap.slice_index}, "
                f"not the anchor {anchor_slice}; unusable as a video negative"
            )

    if scheme == "three_point_video":
        for obj in objects:
            n_others = 0
            for other in objects:
                if other == obj:
                    continue
                src = positives[other]
                prompts.append(PointPrompt(x=src.x, y=src.y, sign="negative",
                                           slice_index=anchor_slice,
                                           object_id=obj))
                n_others += 1
            for ap in aux_on_anchor:
                prompts.append(PointPrompt(x=ap.x, y=ap.y, sign="negative",
                                           slice_index=anchor_slice,
                                           object_id=obj))
                n_others += 1
            if n_others < 2:
                warnings.append(
                    f"object {obj}: only {n_others} other structure(s) "
                    f"available for negatives; scheme degraded"
                )

    if warnings:
        provenance["warnings"] = warnings
    return PromptSet(scheme=scheme, prompts=tuple(prompts),
                     anchor_slice=anchor_slice, aux_points=aux_points,
                     provenance=provenance)


def summarize(ps: PromptSet) -> dict:
    """Counts per sign and per object, plus totals."""
    per_object: dict = {}
    positives = negatives = boxes = 0
    for p in ps.prompts:
        rec = per_object.setdefault(str(p.object_id),
                                    {"positive": 0, "negative": 0, "box": 0})
        if isinstance(p, BoxPrompt):
            boxes += 1
            rec["box"] += 1
        elif p.sign == "positive":
            positives += 1
            rec["positive"] += 1
        else:
            negatives += 1
            rec["negative"] += 1
    return {
        "scheme": ps.scheme,
        "total": len(ps.prompts),
        "positives": positives,
        "negatives": negatives,
        "boxes": boxes,
        "per_object": per_object,
    }
