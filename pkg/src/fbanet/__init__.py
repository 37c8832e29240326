"""Foreground/background aware contrastive learning for semi-supervised segmentation."""

__version__ = "0.1.0"
