"""Deterministic engine for agricultural field-boundary mapping and evaluation."""

from ._version import __version__

__all__ = ["__version__"]
