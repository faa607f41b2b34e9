"""Contrastive alignment of pooled screening profiles with perturbation text."""

__version__ = "0.1.0"
