"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import numpy as np

UNKNOWN = 255
VALID_LABELS = (0, 1, 2, UNKNOWN)


def check_finite(a, name="array"):
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_logits(a, name="logits"):
    """Return a float64 (C, H, W) array with C >= 2 and finite values."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"{name} must have shape (C, H, W), got {a.shape}")
    if a.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 classes, got {a.shape[0]}")
    return check_finite(a, name)


def check_labels(a, name="labels"):
    """Return a uint8 (H, W) array whose values are in {0, 1, 2, 255}."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.dtype.kind == "f":
        if not np.all(np.isfinite(a)) or np.any(a != np.round(a)):
            raise ValueError(f"{name} must hold integer class indices")
    bad = ~np.isin(a, VALID_LABELS)
    if bad.any():
        raise ValueError(f"{name} has values outside {{0,1,2,255}}: {np.unique(a[bad])[:5]}")
    return a.astype(np.uint8)


def check_same_shape(a, b, what="inputs"):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    return value
