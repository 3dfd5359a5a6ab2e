"""Soft anisotropic diagrams: a compact, differentiable image representation."""

from .core import (CandidateField, EmptyModelError, FramingError, ImageBuffer,
                   InvalidInputError, SadError, Site, SiteStore, TrainConfig)

__all__ = ["CandidateField", "EmptyModelError", "FramingError", "ImageBuffer",
           "InvalidInputError", "SadError", "Site", "SiteStore", "TrainConfig"]
__version__ = "0.1.0"
