"""Acceptance gate: one test per release criterion, printing a PASS/FAIL
line each. Run with `pytest tests/test_acceptance.py -s`."""

import shutil
import time

import numpy as np
import pytest

from conftest import connect_handler, full_occupancy_labels
from slicecast.cli import dispatch
from slicecast.driver import run_video_mode
from slicecast.errors import CodecError
from slicecast.metrics import dsc, load_records
from slicecast.prompts import (AuxPoint, AuxPointFile, PointPrompt, PromptSet,
                               build_prompts, centroid)
from slicecast.refbackends import (RegionGrowConfig, make_synthetic_case,
                                   region_grow_segment)
from slicecast.volio import Volume, load_volume, save_volume, volume_to_frames
from slicecast.wireproto import RleMask, decode_mask_rle, encode_mask_rle
from test_driver import DirectionMarkHandler, _frames, _video_ps
from test_metrics import brute_force_dsc


_failed_key = pytest.StashKey()


@pytest.fixture(autouse=True)
def announce(request, capsys):
    yield
    status = "FAIL" if request.node.stash.get(_failed_key, False) else "PASS"
    with capsys.disabled():
        print(f"[acceptance] {status}  {request.node.name}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    out = yield
    report = out.get_result()
    if report.when == "call" and report.failed:
        item.stash[_failed_key] = True


def test_end_to_end_oracle_dsc_one(tmp_path):
    # synth -> prompts -> run (video, gt-echo) -> eval, all via the CLI,
    # in under 10 seconds, with every DSC exactly 1.0.
    gtecho = shutil.which("slicecast-backend-gtecho")
    assert gtecho, "console scripts must be installed"
    start = time.monotonic()
    case = tmp_path / "case"
    assert dispatch(["synth", "--preset", "two_bars", "--out", str(case)]) == 0
    p = tmp_path / "p.json"
    assert dispatch(["prompts", "--labels", str(case / "labels.nii"),
                     "--names", "1:femur,2:tibia",
                     "--scheme", "three_point_video",
                     "--aux", str(case / "aux.json"), "--out", str(p)]) == 0
    pred = tmp_path / "pred.json"
    assert dispatch(["run", "--volume", str(case / "volume.nii"),
                     "--prompts", str(p),
                     "--backend",
                     f"{gtecho} {case / 'labels.nii'} --names 1:femur,2:tibia",
                     "--mode", "video", "--deterministic",
                     "--out", str(pred)]) == 0
    m = tmp_path / "m.jsonl"
    assert dispatch(["eval", "--pred", str(pred),
                     "--labels", str(case / "labels.nii"),
                     "--names", "1:femur,2:tibia", "--out", str(m)]) == 0
    elapsed = time.monotonic() - start
    (rec,) = load_records(m)
    assert rec.per_structure["femur"] == 1.0
    assert rec.per_structure["tibia"] == 1.0
    assert rec.combined == 1.0
    assert elapsed < 10.0


def test_prompt_count_identities():
    labels = full_occupancy_labels(n_slices=160)
    aux = AuxPointFile(points=(AuxPoint("patella", 80, 4.0, 4.0),))
    assert len(build_prompts(labels, "point", aux=aux).prompts) == 321
    boxes = build_prompts(labels, "box", aux=aux).prompts
    assert len(boxes) == 320
    assert 4 * len(boxes) == 1280
    assert len(build_prompts(labels, "three_point_video", aux=aux).prompts) == 6


def test_dsc_oracle_equivalence():
    rng = np.random.default_rng(2024)
    for i in range(1000):
        hi = 64 if i % 100 == 0 else 10
        shape = tuple(int(rng.integers(1, hi + 1)) for _ in range(3))
        a = rng.random(shape) < rng.random()
        b = rng.random(shape) < rng.random()
        got = dsc(a, b)
        assert abs(got - brute_force_dsc(a, b)) <= 1e-12
        assert dsc(b, a) == got
    z = np.zeros((3, 3, 3), dtype=bool)
    assert dsc(z, z) == 1.0


def test_rle_codec_round_trip():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        h, w = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        mask = rng.random((h, w)) < rng.random()
        np.testing.assert_array_equal(decode_mask_rle(encode_mask_rle(mask)),
                                      mask)
    with pytest.raises(CodecError):
        decode_mask_rle(RleMask(width=3, height=2, runs=(5,)))
    with pytest.raises(CodecError):
        decode_mask_rle(RleMask(width=3, height=2, runs=(4, 3)))


def test_volume_io_round_trip(tmp_path):
    dtypes = {"u8": np.uint8, "i16": np.int16, "u16": np.uint16,
              "f32": np.float32}
    rng = np.random.default_rng(8)
    for name, np_dtype in dtypes.items():
        arr = rng.integers(0, 250, size=(4, 5, 6)).astype(np_dtype)
        vol = Volume(voxels=arr, source_dtype=name)
        plain = tmp_path / f"{name}.nii"
        zipped = tmp_path / f"{name}.nii.gz"
        save_volume(vol, plain)
        save_volume(vol, zipped)
        np.testing.assert_array_equal(load_volume(plain).voxels, arr)
        np.testing.assert_array_equal(load_volume(zipped).voxels,
                                      load_volume(plain).voxels)


def test_propagation_coverage_and_anchor_rule():
    rng = np.random.default_rng(5)
    forward = np.ones((4, 4), dtype=bool)
    backward = np.zeros((4, 4), dtype=bool)
    backward[:, 0] = True
    for s in (1, 2, 7, 16):
        for anchor in sorted({int(a) for a in rng.integers(0, s, size=3)}):
            conn = connect_handler(DirectionMarkHandler((4, 4)))
            with conn:
                pred = run_video_mode(_frames(s), _video_ps(anchor), conn,
                                      deterministic=True)
            for obj in (1, 2):
                assert pred.masks[obj].shape[0] == s  # one mask per slice
                np.testing.assert_array_equal(pred.masks[obj][anchor],
                                              forward)  # forward wins
                for i in range(s):
                    np.testing.assert_array_equal(
                        pred.masks[obj][i],
                        forward if i >= anchor else backward)


def test_region_grow_negative_prompt_property():
    case = make_synthetic_case("touching_bars")
    frame = volume_to_frames(case.volume)[8]
    cx1, cy1 = centroid(case.labels.mask_for(1, 8))
    cx2, cy2 = centroid(case.labels.mask_for(2, 8))
    prompts = [
        {"kind": "point", "x": cx1, "y": cy1, "label": 1, "object": 1},
        {"kind": "point", "x": cx2, "y": cy2, "label": 0, "object": 1},
    ]
    mask = region_grow_segment(frame.pixels, prompts, RegionGrowConfig())
    np.testing.assert_array_equal(mask, case.labels.mask_for(1, 8))


def test_report_fixture_rows():
    from slicecast.metrics import SummaryTable, render_report
    table = SummaryTable()
    table.add_row("3 points + video", "sam2_hiera_large",
                  {"femur": 0.9322, "tibia": 0.9222, "combined": 0.9196,
                   "n_volumes": 122})
    table.add_row("point", "sam2_hiera_base_plus",
                  {"femur": 0.7409, "tibia": 0.8155, "combined": 0.7664,
                   "n_volumes": 122})
    text = render_report(table, fmt="markdown")
    assert "| 0.9322 | 0.9222 | 0.9196 |" in text
    assert "| 0.7409 | 0.8155 | 0.7664 |" in text
