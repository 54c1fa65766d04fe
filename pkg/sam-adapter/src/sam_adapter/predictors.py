"""Predictor backends: real SAM1/SAM2 wrappers (lazy imports) and stub
predictors used to exercise the protocol layer without checkpoints.

Frames arrive pre-windowed 8-bit grayscale; they are replicated to 3
channels here, at the adapter boundary, and no further normalization is
applied. When a model returns several candidate masks the highest-scoring
one is selected.
"""

from __future__ import annotations

import numpy as np

from .config import AdapterConfig, MODEL_NAMES


class ImagePredictor:
    """Segment one image given point/box prompts for one object."""

    def set_image(self, rgb: np.ndarray) -> None:
        raise NotImplementedError

    def predict(self, points: np.ndarray | None, labels: np.ndarray | None,
                box: np.ndarray | None) -> np.ndarray:
        raise NotImplementedError


class VideoPredictor:
    """Propagate object masks across an ordered frame sequence."""

    def init_state(self, frames: list[np.ndarray]) -> None:
        raise NotImplementedError

    def add_points(self, frame_index: int, object_key: int,
                   points: np.ndarray, labels: np.ndarray) -> None:
        raise NotImplementedError

    def propagate(self, frame_order: list[int]):
        """Yield (frame_index, object_key, bool_mask) along frame_order."""
        raise NotImplementedError


def to_rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(gray[:, :, None], 3, axis=2)


# ---------------------------------------------------------------------------
# Stubs: intensity-matching segmenters, deterministic and checkpoint-free.


class StubImagePredictor(ImagePredictor):
    def __init__(self, tolerance: float = 0.0):
        self.tolerance = tolerance
        self._gray: np.ndarray | None = None

    def set_image(self, rgb: np.ndarray) -> None:
        self._gray = rgb[:, :, 0].astype(np.float64)

    def predict(self, points, labels, box):
        img = self._gray
        mask = np.zeros(img.shape, dtype=bool)
        if points is not None and labels is not None:
            for (x, y), label in zip(points, labels):
                r, c = int(round(y)), int(round(x))
                if not (0 <= r < img.shape[0] and 0 <= c < img.shape[1]):
                    continue
                match = np.abs(img - img[r, c]) <= self.tolerance
                if label == 1:
                    mask |= match
                else:
                    mask &= ~match
        if box is not None:
            x0, y0, x1, y1 = box
            inside = np.zeros(img.shape, dtype=bool)
            inside[int(np.floor(y0)):int(np.ceil(y1)) + 1,
                   int(np.floor(x0)):int(np.ceil(x1)) + 1] = True
            r, c = int(round((y0 + y1) / 2)), int(round((x0 + x1) / 2))
            match = np.abs(img - img[r, c]) <= self.tolerance
            mask |= match & inside
        return mask


class StubVideoPredictor(VideoPredictor):
    def __init__(self, tolerance: float = 0.0):
        self.tolerance = tolerance
        self._frames: list[np.ndarray] = []
        self._refs: dict = {}  # object_key -> (ref intensity, neg intensities)

    def init_state(self, frames) -> None:
        self._frames = [f[:, :, 0].astype(np.float64) for f in frames]
        self._refs = {}

    def add_points(self, frame_index, object_key, points, labels) -> None:
        img = self._frames[frame_index]
        pos = []
        neg = []
        for (x, y), label in zip(points, labels):
            r, c = int(round(y)), int(round(x))
            val = float(img[r, c])
            (pos if label == 1 else neg).append(val)
        if not pos:
            raise ValueError(f"object {object_key}: no positive point")
        self._refs[object_key] = (pos[0], neg)

    def propagate(self, frame_order):
        for frame_index in frame_order:
            img = self._frames[frame_index]
            for object_key in sorted(self._refs):
                ref, negs = self._refs[object_key]
                mask = np.abs(img - ref) <= self.tolerance
                for nv in negs:
                    mask &= ~(np.abs(img - nv) <= self.tolerance)
                yield frame_index, object_key, mask


# ---------------------------------------------------------------------------
# Real model wrappers. Imports are deferred so the stub path needs no torch.


class Sam1ImagePredictor(ImagePredictor):
    def __init__(self, config: AdapterConfig):
        from segment_anything import SamPredictor, sam_model_registry

        registry_key = {"base": "vit_b", "large": "vit_l",
                        "huge": "vit_h"}[config.size]
        model = sam_model_registry[registry_key](checkpoint=config.checkpoint)
        model.to(config.device)
        self._predictor = SamPredictor(model)

    def set_image(self, rgb: np.ndarray) -> None:
        self._predictor.set_image(rgb)

    def predict(self, points, labels, box):
        masks, scores, _ = self._predictor.predict(
            point_coords=points, point_labels=labels, box=box,
            multimask_output=True)
        return masks[int(np.argmax(scores))].astype(bool)


class Sam2ImagePredictor(ImagePredictor):
    def __init__(self, config: AdapterConfig):
        from sam2.build_sam import build_sam2
        from sam2.sam2_image_predictor import SAM2ImagePredictor

        cfg_name = f"sam2_{MODEL_NAMES[(config.family, config.size)]}.yaml"
        model = build_sam2(cfg_name, config.checkpoint, device=config.device)
        self._predictor = SAM2ImagePredictor(model)

    def set_image(self, rgb: np.ndarray) -> None:
        self._predictor.set_image(rgb)

    def predict(self, points, labels, box):
        masks, scores, _ = self._predictor.predict(
            point_coords=points, point_labels=labels, box=box,
            multimask_output=True)
        return masks[int(np.argmax(scores))].astype(bool)


class Sam2VideoPredictor(VideoPredictor):
    def __init__(self, config: AdapterConfig):
        from sam2.build_sam import build_sam2_video_predictor

        cfg_name = f"sam2_{MODEL_NAMES[(config.family, config.size)]}.yaml"
        self._predictor = build_sam2_video_predictor(
            cfg_name, config.checkpoint, device=config.device)
        self._state = None

    def init_state(self, frames) -> None:
        import tempfile

        from PIL import Image

        # The video predictor consumes a directory of frame images.
        self._tmp = tempfile.TemporaryDirectory()
        for i, frame in enumerate(frames):
            Image.fromarray(frame).save(f"{self._tmp.name}/{i:05d}.jpg")
        self._state = self._predictor.init_state(video_path=self._tmp.name)

    def add_points(self, frame_index, object_key, points, labels) -> None:
        self._predictor.add_new_points_or_box(
            inference_state=self._state, frame_idx=frame_index,
            obj_id=object_key, points=points, labels=labels)

    def propagate(self, frame_order):
        reverse = len(frame_order) > 1 and frame_order[1] < frame_order[0]
        for frame_index, obj_ids, mask_logits in \
                self._predictor.propagate_in_video(
                    self._state, start_frame_idx=frame_order[0],
                    max_frame_num_to_track=len(frame_order) - 1,
                    reverse=reverse):
            for i, object_key in enumerate(obj_ids):
                mask = (mask_logits[i] > 0.0).squeeze().cpu().numpy()
                yield frame_index, object_key, mask


def load_predictors(config: AdapterConfig):
    """Return (image predictor, video predictor or None) for the config."""
    if config.stub:
        return StubImagePredictor(), (StubVideoPredictor()
                                      if "video" in config.modes else None)
    if config.family == "sam1":
        return Sam1ImagePredictor(config), None
    return Sam2ImagePredictor(config), Sam2VideoPredictor(config)
