"""Adapter configuration: model family, size, checkpoint, device."""

from __future__ import annotations

from dataclasses import dataclass

SIZES = {
    "sam1": ("base", "large", "huge"),
    "sam2": ("tiny", "small", "base_plus", "large"),
}

# Published model identifiers per family and size.
MODEL_NAMES = {
    ("sam1", "base"): "vit_base",
    ("sam1", "large"): "vit_large",
    ("sam1", "huge"): "vit_huge",
    ("sam2", "tiny"): "hiera_tiny",
    ("sam2", "small"): "hiera_small",
    ("sam2", "base_plus"): "hiera_base_plus",
    ("sam2", "large"): "hiera_large",
}


@dataclass(frozen=True)
class AdapterConfig:
    family: str
    size: str
    checkpoint: str | None = None
    device: str = "cpu"
    stub: bool = False

    def __post_init__(self):
        if self.family not in SIZES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.size not in SIZES[self.family]:
            raise ValueError(
                f"size {self.size!r} invalid for {self.family}; "
                f"choose from {SIZES[self.family]}")
        if not self.stub and not self.checkpoint:
            raise ValueError("checkpoint path required unless --stub is set")

    @property
    def backend_id(self) -> str:
        return f"{self.family}-{MODEL_NAMES[(self.family, self.size)]}"

    @property
    def modes(self) -> tuple[str, ...]:
        # SAM1 has no video predictor; SAM2 serves both.
        return ("image",) if self.family == "sam1" else ("image", "video")
