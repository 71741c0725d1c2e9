"""Continuous latent reasoning on a small from-scratch transformer."""
from __future__ import annotations

__version__ = "0.1.0"
