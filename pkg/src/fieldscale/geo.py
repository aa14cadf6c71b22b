"""Core raster data model: geotransforms, windows, per-pixel class maps and
band stacks, plus the softmax/argmax link and radiometric normalization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_finite, check_labels, check_logits

BACKGROUND, INTERIOR, BOUNDARY = 0, 1, 2
UNKNOWN = 255
CLASS_NAMES = ("background", "interior", "boundary")


def _frozen(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine grid: map = origin + (col, row) * pixel size."""

    origin_x: float = 0.0
    origin_y: float = 0.0
    pixel_size_x: float = 10.0
    pixel_size_y: float = -10.0
    crs_id: str = "local"

    def __post_init__(self):
        if not self.pixel_size_x > 0:
            raise ValueError("pixel_size_x must be > 0")
        if self.pixel_size_y == 0:
            raise ValueError("pixel_size_y must be non-zero")

    @property
    def pixel_area(self) -> float:
        return abs(self.pixel_size_x * self.pixel_size_y)

    def to_map(self, col, row):
        """Map coordinates of pixel-grid points (corners at integer col/row)."""
        x = self.origin_x + np.asarray(col, dtype=np.float64) * self.pixel_size_x
        y = self.origin_y + np.asarray(row, dtype=np.float64) * self.pixel_size_y
        return x, y

    def to_pixel(self, x, y):
        col = (np.asarray(x, dtype=np.float64) - self.origin_x) / self.pixel_size_x
        row = (np.asarray(y, dtype=np.float64) - self.origin_y) / self.pixel_size_y
        return col, row

    def shifted(self, window: "Window") -> "GeoTransform":
        x, y = self.to_map(window.col_off, window.row_off)
        return GeoTransform(float(x), float(y), self.pixel_size_x, self.pixel_size_y, self.crs_id)

    def area_km2(self, height: int, width: int) -> float:
        return self.pixel_area * height * width / 1e6

    def to_dict(self) -> dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "pixel_size_x": self.pixel_size_x,
            "pixel_size_y": self.pixel_size_y,
            "crs_id": self.crs_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeoTransform":
        return cls(
            float(d["origin_x"]),
            float(d["origin_y"]),
            float(d["pixel_size_x"]),
            float(d["pixel_size_y"]),
            str(d.get("crs_id", "local")),
        )


@dataclass(frozen=True)
class Window:
    row_off: int
    col_off: int
    height: int
    width: int

    def __post_init__(self):
        if self.row_off < 0 or self.col_off < 0:
            raise ValueError(f"window offsets must be non-negative: {self}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"window must be at least 1x1: {self}")

    @property
    def slices(self) -> tuple[slice, slice]:
        return (
            slice(self.row_off, self.row_off + self.height),
            slice(self.col_off, self.col_off + self.width),
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.row_off, self.col_off, self.height, self.width)


def window_clamp(w: Window, height: int, width: int) -> Window:
    """Intersect ``w`` with a ``height`` x ``width`` raster."""
    if height < 1 or width < 1:
        raise ValueError("raster must be at least 1x1")
    r0, c0 = max(w.row_off, 0), max(w.col_off, 0)
    r1 = min(w.row_off + w.height, height)
    c1 = min(w.col_off + w.width, width)
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"window {w.as_tuple()} does not intersect a {height}x{width} raster")
    return Window(r0, c0, r1 - r0, c1 - c0)


@dataclass(frozen=True, eq=False)
class LogitMap:
    """Unbounded per-class scores, shape (C, H, W)."""

    values: np.ndarray
    transform: GeoTransform = field(default_factory=GeoTransform)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(check_logits(self.values)))

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-pixel class probabilities, shape (C, H, W), summing to one."""

    values: np.ndarray
    transform: GeoTransform = field(default_factory=GeoTransform)

    def __post_init__(self):
        v = check_logits(self.values, "probabilities")
        if v.min() < 0 or v.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(v.sum(axis=0) - 1.0).max() > 1e-6:
            raise ValueError("probabilities must sum to 1 over classes")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Class indices in {0, 1, 2}; 255 marks unknown (ground truth only)."""

    values: np.ndarray
    transform: GeoTransform = field(default_factory=GeoTransform)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(check_labels(self.values)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class BandStack:
    """Reflectance frames, shape (T, B, H, W), with per-frame validity (T, H, W).

    Frame 0 is the planting observation and frame 1 the harvest one. Invalid
    pixels hold ``fill_value`` in every band.
    """

    values: np.ndarray
    valid: np.ndarray | None = None
    transform: GeoTransform = field(default_factory=GeoTransform)
    fill_value: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError(f"band stack must be (T, B, H, W), got {v.shape}")
        if self.valid is None:
            valid = np.ones((v.shape[0],) + v.shape[2:], dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != (v.shape[0],) + v.shape[2:]:
                raise ValueError(f"validity mask shape {valid.shape} does not match {v.shape}")
            if (~valid).any():
                v = v.copy()
                v[np.broadcast_to(~valid[:, None], v.shape)] = self.fill_value
        check_finite(v[np.broadcast_to(valid[:, None], v.shape)], "band values")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[2:]

    def channels(self) -> np.ndarray:
        """Model input layout: (T*B, H, W) with planting bands first."""
        t, b, h, w = self.values.shape
        return self.values.reshape(t * b, h, w)

    def reorder(self, order) -> "BandStack":
        order = list(order)
        return BandStack(self.values[order], self.valid[order], self.transform, self.fill_value)

    def crop(self, window: Window) -> "BandStack":
        rs, cs = window.slices
        return BandStack(
            self.values[:, :, rs, cs],
            self.valid[:, rs, cs],
            self.transform.shifted(window),
            self.fill_value,
        )

    def replace(self, values) -> "BandStack":
        return BandStack(values, self.valid, self.transform, self.fill_value)


# -- radiometric normalization ------------------------------------------------


@dataclass(frozen=True)
class ScaleOffset:
    """``(v + offset) / scale``, e.g. scale=10000 for L2A digital numbers."""

    scale: float
    offset: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be > 0")

    def to_dict(self) -> dict:
        return {"variant": "scale_offset", "scale": self.scale, "offset": self.offset}


@dataclass(frozen=True)
class PercentileMinMax:
    """Per-band linear map of the [p_low, p_high] percentiles onto [0, 1], clamped."""

    p_low: float = 1.0
    p_high: float = 99.0

    def __post_init__(self):
        if not 0 <= self.p_low < self.p_high <= 100:
            raise ValueError("need 0 <= p_low < p_high <= 100")

    def to_dict(self) -> dict:
        return {"variant": "percentile_min_max", "p_low": self.p_low, "p_high": self.p_high}


NormalizationSpec = ScaleOffset | PercentileMinMax

# Reference normalization assumed by the stub models and robustness metrics.
DEFAULT_REFERENCE = ScaleOffset(3000.0, 0.0)


def normalization_from_dict(d: dict) -> NormalizationSpec:
    variant = d.get("variant")
    if variant == "scale_offset":
        return ScaleOffset(float(d["scale"]), float(d.get("offset", 0.0)))
    if variant == "percentile_min_max":
        return PercentileMinMax(float(d["p_low"]), float(d["p_high"]))
    raise ValueError(f"unknown normalization variant {variant!r}")


def _band_percentiles(x: BandStack, p_low: float, p_high: float):
    lows, highs = [], []
    for b in range(x.n_bands):
        vals = x.values[:, b][x.valid]
        if vals.size == 0:
            lows.append(0.0)
            highs.append(0.0)
            continue
        lo, hi = np.percentile(vals, [p_low, p_high])
        lows.append(float(lo))
        highs.append(float(hi))
    return np.array(lows), np.array(highs)


def _apply_minmax(x: BandStack, lows, highs) -> BandStack:
    out = np.empty_like(x.values)
    for b in range(x.n_bands):
        span = highs[b] - lows[b]
        if span == 0:
            warnings.warn(f"band {b}: degenerate percentile span, band set to 0", RuntimeWarning)
            out[:, b] = 0.0
        else:
            out[:, b] = np.clip((x.values[:, b] - lows[b]) / span, 0.0, 1.0)
    return BandStack(out, x.valid, x.transform, x.fill_value)


def apply_normalization(x: BandStack, g: NormalizationSpec) -> BandStack:
    """Apply a normalization; invalid pixels keep the fill value.

    Percentiles for :class:`PercentileMinMax` are taken per band over the valid
    pixels of all frames, so both frames share one mapping.
    """
    if isinstance(g, ScaleOffset):
        return x.replace((x.values + g.offset) / g.scale)
    if isinstance(g, PercentileMinMax):
        lows, highs = _band_percentiles(x, g.p_low, g.p_high)
        return _apply_minmax(x, lows, highs)
    raise TypeError(f"not a normalization spec: {g!r}")


class Normalizer(BaseEstimator, TransformerMixin):
    """Estimator wrapper around a normalization spec.

    For ``PercentileMinMax`` the band percentiles are learned in ``fit`` and
    reused by ``transform``; ``fit_transform`` on one stack is equivalent to
    :func:`apply_normalization`.
    """

    def __init__(self, spec: NormalizationSpec = DEFAULT_REFERENCE):
        self.spec = spec

    def fit(self, X: BandStack, y=None):
        if isinstance(self.spec, PercentileMinMax):
            self.low_, self.high_ = _band_percentiles(X, self.spec.p_low, self.spec.p_high)
        elif isinstance(self.spec, ScaleOffset):
            self.low_ = self.high_ = None
        else:
            raise TypeError(f"not a normalization spec: {self.spec!r}")
        return self

    def transform(self, X: BandStack) -> BandStack:
        check_is_fitted(self, "low_")
        if isinstance(self.spec, ScaleOffset):
            return apply_normalization(X, self.spec)
        return _apply_minmax(X, self.low_, self.high_)


# -- class link ---------------------------------------------------------------


def softmax(logits):
    """Per-pixel softmax over axis 0. Accepts a LogitMap or a (C, H, W) array."""
    if isinstance(logits, LogitMap):
        return ProbMap(softmax(logits.values), logits.transform)
    z = check_logits(logits)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def argmax_labels(p) -> LabelMask:
    """Per-pixel argmax; ties go to the lowest class index."""
    if isinstance(p, (LogitMap, ProbMap)):
        values, transform = p.values, p.transform
    else:
        values, transform = check_logits(p, "scores"), GeoTransform()
    if values.shape[0] != 3:
        raise ValueError(f"argmax_labels expects 3 classes, got {values.shape[0]}")
    return LabelMask(np.argmax(values, axis=0).astype(np.uint8), transform)
