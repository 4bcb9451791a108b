"""Saliency-zoom augmentation + decoupled supervised contrastive learning, desk scale."""

__version__ = "0.1.0"
