"""Herbage biomass estimation toolkit.

Transfers biomass knowledge from labeled ground-level imagery to unlabeled
drone imagery: altitude-aware cropping and upscaling, unpaired contrastive
image translation, semi-supervised regression, and evaluation metrics.
"""

__version__ = "0.1.0"
