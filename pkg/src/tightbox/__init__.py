"""Bounding-box refinement toolkit: tighten rough boxes with a small CNN.

The pieces, roughly in pipeline order: synthetic data and label IO
(:mod:`tightbox.synth`, :mod:`tightbox.dataset`), box and patch geometry
(:mod:`tightbox.geometry`), the refinement network (:mod:`tightbox.model`),
training loops (:mod:`tightbox.training`), edge-precision metrics
(:mod:`tightbox.evaluation`), tracker pre-labels (:mod:`tightbox.interp`),
and the annotation HTTP service (:mod:`tightbox.service`).
"""

from .geometry import BBox, EdgeErrorModel, PatchTransform, DEFAULT_ERROR_MODEL

__all__ = ["BBox", "EdgeErrorModel", "PatchTransform", "DEFAULT_ERROR_MODEL"]

__version__ = "0.1.0"
