"""Spectral band-diversion adapters for cross-domain few-shot classification."""

from .adapter import FadConfig, Variant
from .spectral import BandThresholds

__all__ = ["BandThresholds", "FadConfig", "Variant"]
__version__ = "0.1.0"
