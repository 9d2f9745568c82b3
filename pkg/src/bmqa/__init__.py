"""Blind multimodal quality assessment for low-light images."""

__version__ = "0.1.0"
