"""Season windows, scene prefiltering, greedy scene selection and median compositing."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .geo import GeoTransform

DEFAULT_MAX_CLOUD = 75.0
# SCL codes: 0 nodata, 1 saturated, 3 cloud shadow, 7 unclassified, 8/9 cloud, 10 cirrus
EXCLUDED_SCL = frozenset({0, 1, 3, 7, 8, 9, 10})


@dataclass(frozen=True)
class SeasonWindow:
    """Day-of-year interval; ``start_doy > end_doy`` wraps through the year end."""

    start_doy: int
    end_doy: int

    def __post_init__(self):
        for v in (self.start_doy, self.end_doy):
            if not 1 <= v <= 365:
                raise ValueError(f"day of year must be in 1..365, got {v}")

    @property
    def wraps(self) -> bool:
        return self.start_doy > self.end_doy

    def contains(self, doy: int) -> bool:
        if self.wraps:
            return doy >= self.start_doy or doy <= self.end_doy
        return self.start_doy <= doy <= self.end_doy

    def as_tuple(self) -> tuple[int, int]:
        return (self.start_doy, self.end_doy)


def _check_lat(latitude: float) -> float:
    lat = float(latitude)
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude must be in [-90, 90], got {latitude}")
    return lat


def _season(latitude, table):
    lat = _check_lat(latitude)
    a = abs(lat)
    if a > 45:
        north, south = table[0]
    elif a > 20:
        north, south = table[1]
    elif a > 5:
        north, south = table[2]
    else:
        return SeasonWindow(*table[3])
    return SeasonWindow(*(north if lat > 0 else south))


_PLANTING = (
    ((91, 151), (274, 334)),
    ((60, 120), (244, 334)),
    ((121, 212), (305, 365)),
    (60, 121),
)
_HARVEST = (
    ((244, 304), (60, 151)),
    ((213, 304), (32, 120)),
    ((274, 365), (91, 181)),
    (182, 243),
)


def planting_doy(latitude: float) -> SeasonWindow:
    """Planting-season window from latitude bands >45, (20, 45], (5, 20] and equatorial."""
    return _season(latitude, _PLANTING)


def harvest_doy(latitude: float) -> SeasonWindow:
    return _season(latitude, _HARVEST)


# -- scenes -------------------------------------------------------------------------


@dataclass
class Scene:
    timestamp: str
    cloud_cover_pct: float
    bands: np.ndarray  # B x H x W
    scl: np.ndarray  # H x W, codes 0..11
    valid: np.ndarray | None = None
    transform: GeoTransform | None = None

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float64)
        self.scl = np.asarray(self.scl)
        if self.bands.ndim != 3 or self.scl.shape != self.bands.shape[1:]:
            raise ValueError("bands must be BxHxW and scl HxW with matching H, W")
        if self.valid is None:
            self.valid = np.ones(self.scl.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)


@dataclass
class SceneStack:
    scenes: list = field(default_factory=list)

    def __post_init__(self):
        shapes = {s.scl.shape for s in self.scenes}
        if len(shapes) > 1:
            raise ValueError(f"scenes differ in shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.scenes)

    @property
    def timestamps(self) -> list[str]:
        return [s.timestamp for s in self.scenes]

    @property
    def valid(self) -> np.ndarray:
        return np.stack([s.valid for s in self.scenes])


def prefilter_scenes(stack: SceneStack, max_cloud: float = DEFAULT_MAX_CLOUD,
                     excluded_scl=EXCLUDED_SCL) -> SceneStack:
    """Drop scenes with cloud cover >= ``max_cloud``; mark excluded SCL pixels invalid."""
    excluded = np.array(sorted(excluded_scl))
    kept = []
    for s in stack.scenes:
        if s.cloud_cover_pct >= max_cloud:
            continue
        if s.scl.size and (s.scl.min() < 0 or s.scl.max() > 11):
            raise ValueError(f"scene {s.timestamp}: SCL codes outside 0..11")
        valid = s.valid & ~np.isin(s.scl, excluded)
        kept.append(replace(s, valid=valid))
    return SceneStack(kept)


@dataclass
class Selection:
    indices: list
    gains: list
    coverage_depth: np.ndarray


def select_scenes_greedy(valid, target_coverage: int = 5, max_scenes: int = 10,
                         return_details: bool = False):
    """Greedy coverage-maximizing selection over T x H x W validity masks.

    Each step picks the remaining scene adding the most valid pixels where the
    coverage depth is still below target; ties go to the lowest index. Stops
    when the best gain is zero, ``max_scenes`` is reached or no scene remains.
    """
    valid = np.asarray(valid, dtype=bool)
    if valid.ndim != 3 or valid.shape[0] < 1:
        raise ValueError("valid must be T x H x W with T >= 1")
    depth = np.zeros(valid.shape[1:], dtype=np.int64)
    remaining = list(range(valid.shape[0]))
    selected, gains = [], []
    while remaining and len(selected) < max_scenes:
        needy = depth < target_coverage
        best, best_gain = None, -1
        for i in remaining:
            gain = int(np.count_nonzero(valid[i] & needy))
            if gain > best_gain:
                best, best_gain = i, gain
        if best_gain == 0:
            break
        selected.append(best)
        gains.append(best_gain)
        depth += valid[best]
        remaining.remove(best)
    if return_details:
        return Selection(selected, gains, depth)
    return selected


@dataclass
class CompositeResult:
    median: np.ndarray  # B x H x W
    observation_count: np.ndarray  # H x W
    selected_timestamps: list
    nodata: float = 0.0


def median_composite(stack: SceneStack, selected, nodata: float = 0.0) -> CompositeResult:
    """Per-pixel, per-band median over the selected scenes valid at that pixel.

    ``selected`` holds scene indices or timestamps. Even counts average the two
    central values; pixels with no valid observation get ``nodata``.
    """
    index = {s.timestamp: i for i, s in enumerate(stack.scenes)}
    idx = []
    for s in selected:
        if isinstance(s, str):
            if s not in index:
                raise ValueError(f"timestamp {s!r} not in stack")
            idx.append(index[s])
        else:
            if not 0 <= int(s) < len(stack):
                raise ValueError(f"scene index {s} out of range")
            idx.append(int(s))
    if not idx:
        if not len(stack):
            raise ValueError("empty scene stack")
        b, h, w = stack.scenes[0].bands.shape
        return CompositeResult(np.full((b, h, w), float(nodata)), np.zeros((h, w), np.int32), [], nodata)
    bands = np.stack([stack.scenes[i].bands for i in idx])
    valid = np.stack([stack.scenes[i].valid for i in idx])
    count = valid.sum(axis=0).astype(np.int32)
    masked = np.where(valid[:, None], bands, np.nan)
    with warnings.catch_warnings():
        # all-nan pixels are expected; they become nodata below
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(masked, axis=0)
    med = np.where(count[None] > 0, med, nodata)
    return CompositeResult(med, count, [stack.scenes[i].timestamp for i in idx], nodata)


class SceneSelector(BaseEstimator, TransformerMixin):
    """Prefilter + greedy selection on ``fit``; median composite on ``transform``."""

    def __init__(self, target_coverage=5, max_scenes=10, max_cloud=DEFAULT_MAX_CLOUD,
                 excluded_scl=tuple(sorted(EXCLUDED_SCL)), nodata=0.0):
        self.target_coverage = target_coverage
        self.max_scenes = max_scenes
        self.max_cloud = max_cloud
        self.excluded_scl = excluded_scl
        self.nodata = nodata

    def fit(self, X: SceneStack, y=None):
        filtered = prefilter_scenes(X, self.max_cloud, set(self.excluded_scl))
        if len(filtered) == 0:
            self.selected_timestamps_, self.gains_ = [], []
            return self
        sel = select_scenes_greedy(filtered.valid, self.target_coverage, self.max_scenes,
                                   return_details=True)
        self.selected_timestamps_ = [filtered.scenes[i].timestamp for i in sel.indices]
        self.gains_ = sel.gains
        return self

    def transform(self, X: SceneStack) -> CompositeResult:
        if not hasattr(self, "selected_timestamps_"):
            raise RuntimeError("SceneSelector is not fitted")
        filtered = prefilter_scenes(X, self.max_cloud, set(self.excluded_scl))
        return median_composite(filtered, self.selected_timestamps_, self.nodata)
