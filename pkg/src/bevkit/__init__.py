"""bevkit: deterministic bird's-eye-view mapping toolkit.

Subpackages cover pinhole/IPM camera geometry, loss-weight maps, BEV
ground-truth label generation from LiDAR, panoptic fusion, evaluation
metrics, and seeded synthetic scenes with reference oracles.
"""

from . import camera, config, formats, fusion, labelgen, metrics, synth, weighting
from .errors import BevkitError

__all__ = [
    "BevkitError",
    "camera",
    "config",
    "formats",
    "fusion",
    "labelgen",
    "metrics",
    "synth",
    "weighting",
]

__version__ = "0.1.0"
