"""slicecast: drive promptable segmentation backends over 3D volumes
slice-by-slice and score the results."""

from .driver import PredictionSet, run_image_mode, run_video_mode
from .metrics import MetricsRecord, SummaryTable, dsc, evaluate_volume
from .prompts import (AuxPointFile, BoxPrompt, PointPrompt, PromptSet,
                      bounding_box, build_prompts, centroid, summarize)
from .volio import (Frame, LabelVolume, Volume, load_labels, load_volume,
                    save_labels, save_volume, volume_to_frames)
from .wireproto import (BackendConnection, RleMask, decode_mask_rle,
                        encode_mask_rle, open_backend)

__version__ = "0.1.0"

__all__ = [
    "AuxPointFile", "BackendConnection", "BoxPrompt", "Frame", "LabelVolume",
    "MetricsRecord", "PointPrompt", "PredictionSet", "PromptSet", "RleMask",
    "SummaryTable", "Volume", "bounding_box", "build_prompts", "centroid",
    "decode_mask_rle", "dsc", "encode_mask_rle", "evaluate_volume",
    "load_labels", "load_volume", "open_backend", "run_image_mode",
    "run_video_mode", "save_labels", "save_volume", "summarize",
    "volume_to_frames",
]
