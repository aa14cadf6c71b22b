"""Multi-year change masks from per-year semantic logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .geo import INTERIOR, GeoTransform, LogitMap, ProbMap


def _values(y, name):
    if isinstance(y, (LogitMap, ProbMap)):
        return y.values, y.transform
    a = np.asarray(y, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"{name} must be C x H x W")
    return a, None


def change_magnitude(y1, y2, cls: int = INTERIOR) -> np.ndarray:
    """Min-max normalized ``|y1[cls] - y2[cls]|``; all zeros when the map is flat."""
    a, ta = _values(y1, "y1")
    b, tb = _values(y2, "y2")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if ta is not None and tb is not None and ta != tb:
        raise ValueError("geotransforms differ between years")
    if not 0 <= cls < a.shape[0]:
        raise ValueError(f"class {cls} out of range for {a.shape[0]} channels")
    d = np.abs(a[cls] - b[cls])
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


@dataclass
class ChangeMask:
    mask: np.ndarray
    years: tuple = ()
    threshold: float = 0.5
    transform: GeoTransform | None = None


def change_mask(magnitude, thresh: float = 0.5, years=(), transform=None) -> ChangeMask:
    """Changed where ``magnitude >= thresh`` (inclusive)."""
    m = np.asarray(magnitude, dtype=np.float64)
    if m.size and (m.min() < 0 or m.max() > 1):
        raise ValueError("magnitude must lie in [0, 1]")
    return ChangeMask(m >= thresh, tuple(years), float(thresh), transform)


class ChangeDetector(BaseEstimator, TransformerMixin):
    """``transform((y1, y2))`` returns the thresholded change mask."""

    def __init__(self, cls=INTERIOR, threshold=0.5):
        self.cls = cls
        self.threshold = threshold

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> ChangeMask:
        y1, y2 = X
        t = y1.transform if isinstance(y1, (LogitMap, ProbMap)) else None
        self.magnitude_ = change_magnitude(y1, y2, self.cls)
        return change_mask(self.magnitude_, self.threshold, transform=t)
