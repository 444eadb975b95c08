"""Contrastive continual learning with task masks over a frozen adapter transformer."""

__version__ = "0.1.0"
