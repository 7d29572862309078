"""Prototype-calibrated, OT-aligned, Shapley-modulated multimodal training on dense features."""

__version__ = "0.1.0"
