import numpy as np
import pytest

from conftest import connect_handler
from slicecast.driver import PredictionSet, run_image_mode, run_video_mode
from slicecast.errors import FormatError, PartialResultError
from slicecast.metrics import evaluate_volume
from slicecast.prompts import PointPrompt, PromptSet, build_prompts
from slicecast.refbackends import GtEchoHandler
from slicecast.volio import LabelVolume, volume_to_frames
from slicecast.wireproto import BackendHandler


class DirectionMarkHandler(BackendHandler):
    """Video backend whose masks encode the producing direction.

    Forward masks are all-True, backward masks mark only column 0. Used to
    verify the anchor-conflict rule (forward wins) and per-direction
    attribution of merged results.
    """

    backend_id = "dirmark"
    modes = ("image", "video")

    def __init__(self, shape):
        self.shape = shape
        self.n_frames = 0
        self.anchor = None
        self.objects = []

    def segment_image(self, frame, prompts, objects):
        return {o: np.ones(self.shape, dtype=bool) for o in objects}

    def start_session(self, n_frames):
        self.n_frames = n_frames
        self.anchor = None
        self.objects = []

    def append_frame(self, frame):
        pass

    def add_points(self, frame_index, object_id, points):
        self.anchor = frame_index
        self.objects.append(object_id)

    def propagate(self, direction):
        if direction == "forward":
            order = range(self.anchor, self.n_frames)
            mask = np.ones(self.shape, dtype=bool)
        else:
            order = range(self.anchor, -1, -1)
            mask = np.zeros(self.shape, dtype=bool)
            mask[:, 0] = True
        for i in order:
            for obj in self.objects:
                yield i, obj, mask

    def end_session(self):
        pass


def _video_ps(anchor, objects=(1, 2)):
    prompts = tuple(PointPrompt(x=1.0, y=1.0, sign="positive",
                                slice_index=anchor, object_id=o)
                    for o in objects)
    return PromptSet(scheme="point_video", prompts=prompts,
                     anchor_slice=anchor)


def _frames(s, h=4, w=4):
    from slicecast.volio import Frame
    return [Frame(slice_index=i, pixels=np.zeros((h, w), np.uint8))
            for i in range(s)]


@pytest.mark.parametrize("s,anchor", [(1, 0), (2, 0), (2, 1), (7, 3),
                                      (7, 0), (7, 6), (16, 8), (16, 15)])
def test_video_coverage_and_merge(s, anchor):
    conn = connect_handler(DirectionMarkHandler((4, 4)))
    with conn:
        pred = run_video_mode(_frames(s), _video_ps(anchor), conn,
                              deterministic=True)
        forward = np.ones((4, 4), dtype=bool)
        backward = np.zeros((4, 4), dtype=bool)
        backward[:, 0] = True
        for obj in (1, 2):
            assert pred.masks[obj].shape == (s, 4, 4)
            # Anchor-conflict rule: the forward pass wins the anchor frame.
            np.testing.assert_array_equal(pred.masks[obj][anchor], forward)
            for i in range(s):
                expected = forward if i >= anchor else backward
                np.testing.assert_array_equal(pred.masks[obj][i], expected)


def test_video_coverage_exactly_one_mask_per_cell():
    conn = connect_handler(DirectionMarkHandler((4, 4)))
    with conn:
        pred = run_video_mode(_frames(7), _video_ps(3), conn,
                              deterministic=True)
    cells = sum(m.shape[0] for m in pred.masks.values())
    assert cells == 2 * 7


def test_video_gt_echo_end_to_end(two_bars):
    conn = connect_handler(GtEchoHandler(two_bars.labels))
    with conn:
        frames = volume_to_frames(two_bars.volume)
        ps = build_prompts(two_bars.labels, "three_point_video",
                           aux=two_bars.aux)
        pred = run_video_mode(frames, ps, conn, deterministic=True)
    rec = evaluate_volume(pred, two_bars.labels)
    assert rec.per_structure == {"femur": 1.0, "tibia": 1.0}
    assert rec.combined == 1.0
    assert pred.provenance["scheme"] == "three_point_video"
    assert pred.provenance["backend_id"] == "gtecho"


def test_video_per_object_sessions(two_bars):
    conn = connect_handler(GtEchoHandler(two_bars.labels))
    with conn:
        frames = volume_to_frames(two_bars.volume)
        ps = build_prompts(two_bars.labels, "point_video")
        pred = run_video_mode(frames, ps, conn, deterministic=True,
                              per_object_sessions=True)
    rec = evaluate_volume(pred, two_bars.labels)
    assert rec.combined == 1.0


def test_video_single_slice():
    labels = np.zeros((1, 4, 4), dtype=np.int32)
    labels[0, 1:3, 1:3] = 1
    lv = LabelVolume(labels=labels, label_names={1: "a"})
    conn = connect_handler(GtEchoHandler(lv))
    with conn:
        ps = build_prompts(lv, "point_video")
        pred = run_video_mode(_frames(1), ps, conn, deterministic=True)
    np.testing.assert_array_equal(pred.masks[1][0], lv.mask_for(1, 0))


def test_image_mode_full_prompts(two_bars):
    conn = connect_handler(GtEchoHandler(two_bars.labels))
    with conn:
        frames = volume_to_frames(two_bars.volume)
        ps = build_prompts(two_bars.labels, "point")
        pred = run_image_mode(frames, ps, conn, deterministic=True)
    for obj in (1, 2):
        np.testing.assert_array_equal(pred.masks[obj],
                                      two_bars.labels.mask_for(obj))


def test_image_mode_no_prompts(two_bars):
    conn = connect_handler(GtEchoHandler(two_bars.labels))
    with conn:
        frames = volume_to_frames(two_bars.volume)
        ps = PromptSet(scheme="point")
        pred = run_image_mode(frames, ps, conn, objects=[1, 2],
                              deterministic=True)
    assert not any(m.any() for m in pred.masks.values())


def test_image_mode_partial_object_prompts(two_bars):
    conn = connect_handler(GtEchoHandler(two_bars.labels))
    with conn:
        frames = volume_to_frames(two_bars.volume)
        full = build_prompts(two_bars.labels, "point")
        femur_only = PromptSet(
            scheme="point",
            prompts=tuple(p for p in full.prompts if p.object_id == 1))
        pred = run_image_mode(frames, femur_only, conn, objects=[1, 2],
                              deterministic=True)
    np.testing.assert_array_equal(pred.masks[1], two_bars.labels.mask_for(1))
    assert not pred.masks[2].any()


def test_determinism_against_deterministic_backend(two_bars):
    def one_run():
        conn = connect_handler(GtEchoHandler(two_bars.labels))
        with conn:
            frames = volume_to_frames(two_bars.volume)
            ps = build_prompts(two_bars.labels, "point_video")
            return run_video_mode(frames, ps, conn, deterministic=True)

    a, b = one_run(), one_run()
    for obj in (1, 2):
        np.testing.assert_array_equal(a.masks[obj], b.masks[obj])
    assert a.provenance == b.provenance


def test_video_mode_scheme_validation(two_bars):
    conn = connect_handler(GtEchoHandler(two_bars.labels))
    with conn:
        frames = volume_to_frames(two_bars.volume)
        with pytest.raises(ValueError):
            run_video_mode(frames, build_prompts(two_bars.labels, "point"),
                           conn)
        with pytest.raises(ValueError):
            run_image_mode(frames,
                           build_prompts(two_bars.labels, "point_video"),
                           conn)


def test_video_partial_result_on_mid_stream_failure():
    class Dying(DirectionMarkHandler):
        def propagate(self, direction):
            count = 0
            for item in super().propagate(direction):
                if count >= 3:
                    raise RuntimeError("gpu fell off")
                count += 1
                yield item

    conn = connect_handler(Dying((4, 4)))
    with conn:
        with pytest.raises(PartialResultError) as exc:
            run_video_mode(_frames(7), _video_ps(3), conn, deterministic=True)
        assert "backward" in str(exc.value)


def test_prediction_file_round_trip(two_bars, tmp_path):
    conn = connect_handler(GtEchoHandler(two_bars.labels))
    with conn:
        frames = volume_to_frames(two_bars.volume)
        ps = build_prompts(two_bars.labels, "point_video")
        pred = run_video_mode(frames, ps, conn, deterministic=True)
    path = tmp_path / "pred.json"
    pred.save(path)
    back = PredictionSet.load(path)
    assert back.dims == pred.dims
    assert back.provenance == pred.provenance
    for obj in pred.masks:
        np.testing.assert_array_equal(back.masks[obj], pred.masks[obj])
    # Re-saving the loaded set is byte-identical.
    path2 = tmp_path / "pred2.json"
    back.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_prediction_file_bad_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "nope/9", "dims": [1,1,1], "objects": []}\n')
    with pytest.raises(FormatError):
        PredictionSet.load(path)
