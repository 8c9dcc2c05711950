"""Adaptive level-crossing spike compression and meta-calibrated spike sorting."""

from .sampler import BACKEND, CompressedSpike, SamplerConfig, compress, reconstruct
from .spikegen import GenConfig, LabelledDataset, generate_dataset, make_templates

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CompressedSpike",
    "GenConfig",
    "LabelledDataset",
    "SamplerConfig",
    "compress",
    "generate_dataset",
    "make_templates",
    "reconstruct",
]
