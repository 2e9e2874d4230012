"""HTTP service wrapping the attack/defense pipeline."""

from .app import app

__all__ = ["app"]
