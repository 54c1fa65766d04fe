"""Protocol conformance probe for backends (the `backend-check` subcommand).

Generates a small synthetic case, connects to the backend under test, and
exercises every advertised mode, verifying message shapes, RLE validity,
and propagation coverage.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, SlicecastError
from .prompts import build_prompts
from .refbackends import make_synthetic_case
from .volio import save_labels, volume_to_frames
from .wireproto import open_backend


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _prepare_case(workdir):
    case = make_synthetic_case("two_bars")
    labels_path = os.path.join(workdir, "conformance_labels.nii")
    save_labels(case.labels, labels_path)
    return case, labels_path


def run_backend_check(backend_spec: str, workdir: str) -> list[CheckResult]:
    """Run the conformance suite; `{labels}` in the spec is replaced with a
    generated ground-truth path so oracle backends can be probed too."""
    results: list[CheckResult] = []
    case, labels_path = _prepare_case(workdir)
    spec = backend_spec.replace("{labels}", labels_path)
    frames = volume_to_frames(case.volume)
    objects = sorted(case.labels.label_names)

    try:
        conn = open_backend(spec)
    except SlicecastError as e:
        return [CheckResult("connect", False, str(e))]

    with conn:
        try:
            caps = conn.hello()
            ok = bool(caps.backend_id) and set(caps.modes) <= {"image", "video"} \
                and len(caps.modes) >= 1
            results.append(CheckResult(
                "handshake", ok,
                f"backend_id={caps.backend_id!r} modes={list(caps.modes)}"))
        except SlicecastError as e:
            results.append(CheckResult("handshake", False, str(e)))
            return results

        if "image" in caps.modes:
            results += _check_image_mode(conn, case, frames, objects)
        if "video" in caps.modes:
            results += _check_video_mode(conn, case, frames, objects)

        # A clean backend has no unconsumed messages: a fresh request must
        # get a fresh, well-formed response.
        try:
            conn.hello()
            results.append(CheckResult("quiescent", True))
        except SlicecastError as e:
            results.append(CheckResult("quiescent", False, str(e)))
    return results


def _check_image_mode(conn, case, frames, objects) -> list[CheckResult]:
    out = []
    ps = build_prompts(case.labels, "point")
    anchor = case.labels.dims[0] // 2
    frame = frames[anchor]
    try:
        masks = conn.segment_image(frame, ps.on_slice(anchor), objects)
        shape_ok = all(m.shape == frame.pixels.shape for m in masks.values())
        out.append(CheckResult(
            "image.masks", set(masks) == set(objects) and shape_ok,
            f"objects={sorted(masks, key=str)}"))
    except SlicecastError as e:
        out.append(CheckResult("image.masks", False, str(e)))
    try:
        conn.segment_image(frame, [], objects)
        out.append(CheckResult("image.empty_prompts_rejected", False,
                               "empty prompt list was accepted"))
    except ProtocolError:
        out.append(CheckResult("image.empty_prompts_rejected", True))
    except SlicecastError as e:
        out.append(CheckResult("image.empty_prompts_rejected", False, str(e)))
    return out


def _check_video_mode(conn, case, frames, objects) -> list[CheckResult]:
    out = []
    ps = build_prompts(case.labels, "point_video")
    anchor = ps.anchor_slice
    n = len(frames)
    for direction, expected in (("forward", list(range(anchor, n))),
                                ("backward", list(range(anchor, -1, -1)))):
        try:
            conn.start_session(n)
            for f in frames:
                conn.append_frame(f)
            for obj in objects:
                pts = [(p.x, p.y, 1) for p in ps.on_slice(anchor)
                       if p.object_id == obj]
                conn.add_points(anchor, obj, pts)
            results = conn.propagate(direction)
            conn.end_session()
            per_obj: dict = {}
            order_ok = True
            for frame_index, obj, mask in results:
                per_obj.setdefault(obj, []).append(frame_index)
                if mask.shape != frames[0].pixels.shape:
                    order_ok = False
            coverage_ok = all(
                sorted(per_obj.get(obj, [])) == sorted(expected)
                for obj in objects)
            seq_ok = all(idxs == sorted(idxs, reverse=(direction == "backward"))
                         for idxs in per_obj.values())
            out.append(CheckResult(
                f"video.{direction}", coverage_ok and order_ok and seq_ok,
                f"frames={len(results)}"))
        except SlicecastError as e:
            out.append(CheckResult(f"video.{direction}", False, str(e)))
    try:
        conn.start_session(n)
        for f in frames[:2]:
            conn.append_frame(f)
        conn.propagate("forward")
        out.append(CheckResult("video.propagate_requires_points", False,
                               "propagate without points succeeded"))
        conn.end_session()
    except ProtocolError:
        out.append(CheckResult("video.propagate_requires_points", True))
        try:
            conn.end_session()
        except SlicecastError:
            pass
    return out


def render_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        detail = f"  ({r.detail})" if r.detail else ""
        lines.append(f"{status}  {r.name}{detail}")
    n_fail = sum(1 for r in results if not r.ok)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
