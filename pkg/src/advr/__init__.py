"""Targeted adversarial attacks and defenses for audio anti-spoofing classifiers."""

__version__ = "0.1.0"
