"""Metrics, synthetic data and file codecs."""

from .codecs import FormatError, read_masks, read_seed, read_tensor, write_masks, write_seed, write_tensor
from .metrics import IoUReport, miou
from .synth import SyntheticScene, default_registry, make_scenes, synth_scene

__all__ = [
    "FormatError", "IoUReport", "SyntheticScene", "default_registry", "make_scenes", "miou",
    "read_masks", "read_seed", "read_tensor", "synth_scene", "write_masks", "write_seed", "write_tensor",
]
