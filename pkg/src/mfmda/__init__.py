"""Two-stage few-shot domain adaptation for segmentation foundation models."""

__version__ = "0.1.0"
