"""Binaural multi-source sound localization with a gated coarse-to-fine network."""
from .geometry import Doa, SectorGrid, TargetGrid, decode_predictions, encode_targets, sector_of
from .model import AuralNet, AuralNetConfig

__version__ = "0.1.0"
