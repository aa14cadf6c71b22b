"""Overlapping patch inference with Gaussian-apodized, seam-free stitching."""

from __future__ import annotations

import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .geo import (
    DEFAULT_REFERENCE,
    BandStack,
    GeoTransform,
    LogitMap,
    Window,
    apply_normalization,
    argmax_labels,
    softmax,
)
from .report import measure_throughput


class ModelBackend(ABC):
    """A patch model: ``predict`` maps (channels_in, h, w) to (n_classes, h, w) logits.

    Backends must accept any spatial size. Set ``thread_safe = False`` if
    ``predict`` cannot be called concurrently; the tiler then serializes calls.
    """

    channels_in: int = 8
    n_classes: int = 3
    deterministic: bool = True
    thread_safe: bool = True

    @abstractmethod
    def predict(self, patch: np.ndarray) -> np.ndarray:
        ...

    def __call__(self, patch):
        return self.predict(patch)


def check_prediction(model: ModelBackend, patch: np.ndarray, out) -> np.ndarray:
    out = np.asarray(out, dtype=np.float64)
    expected = (model.n_classes,) + patch.shape[1:]
    if out.shape != expected:
        raise ValueError(f"model returned shape {out.shape}, expected {expected}")
    return out


@dataclass(frozen=True)
class TilingSpec:
    patch_size: int = 256
    overlap_fraction: float = 0.25

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 0 <= self.overlap_fraction < 0.5:
            raise ValueError("overlap_fraction must be in [0, 0.5)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def stride(self) -> int:
        return int(round(self.patch_size * (1 - self.overlap_fraction)))


def _offsets(n: int, size: int, stride: int) -> list[int]:
    if n <= size:
        return [0]
    offs = list(range(0, n - size + 1, stride))
    if offs[-1] != n - size:
        offs.append(n - size)  # last patch flush with the edge
    return offs


def enumerate_patches(height: int, width: int, spec: TilingSpec = TilingSpec()) -> list[Window]:
    """Row-major patch windows at multiples of the stride, last row/column flush."""
    if height < 1 or width < 1:
        raise ValueError("raster must be at least 1x1")
    s = spec.patch_size
    rows = _offsets(height, s, spec.stride)
    cols = _offsets(width, s, spec.stride)
    return [Window(r, c, min(s, height), min(s, width)) for r in rows for c in cols]


def gaussian_kernel(size: int, sigma: float | None = None, width: int | None = None) -> np.ndarray:
    """Unnormalized apodization weights ``exp(-d^2 / (2 sigma^2))`` from the patch center.

    ``size`` is the height; ``width`` defaults to ``size``. ``sigma`` defaults
    to ``size / 4``.
    """
    width = size if width is None else width
    if sigma is None:
        sigma = max(size, width) / 4.0
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    i = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    j = np.arange(width, dtype=np.float64) - (width - 1) / 2.0
    d2 = i[:, None] ** 2 + j[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma**2))


class _Accumulator:
    def __init__(self, n_classes: int, height: int, width: int, kernel: np.ndarray, sigma):
        self.num = np.zeros((n_classes, height, width), dtype=np.float64)
        self.den = np.zeros((height, width), dtype=np.float64)
        self.kernel = kernel
        self.sigma = sigma
        self.n_classes = n_classes

    def weights_for(self, window: Window) -> np.ndarray:
        if self.kernel.shape == (window.height, window.width):
            return self.kernel
        return gaussian_kernel(window.height, self.sigma, window.width)

    def add(self, window: Window, logits: np.ndarray) -> None:
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape[0] != self.n_classes:
            raise ValueError(f"patch has {logits.shape[0]} classes, expected {self.n_classes}")
        if logits.shape[1:] != (window.height, window.width):
            raise ValueError(f"patch shape {logits.shape[1:]} does not match window {window.as_tuple()}")
        w = self.weights_for(window)
        rs, cs = window.slices
        self.num[:, rs, cs] += w * logits
        self.den[rs, cs] += w

    def result(self) -> np.ndarray:
        if (self.den <= 0).any():
            r, c = np.argwhere(self.den <= 0)[0]
            raise ValueError(f"coverage gap: pixel ({r}, {c}) is not covered by any patch")
        return self.num / self.den


def stitch(patch_logits, kernel: np.ndarray, height: int, width: int,
           transform: GeoTransform | None = None, sigma: float | None = None) -> LogitMap:
    """Weighted average of overlapping patch logits.

    ``patch_logits`` is a sequence of ``(Window, (C, h, w) array)``. Patches
    smaller than the kernel (rasters narrower than the patch size) get a
    Gaussian of their own shape with the same ``sigma``.
    """
    accum = None
    for window, logits in patch_logits:
        if (window.row_off + window.height > height) or (window.col_off + window.width > width):
            raise ValueError(f"window {window.as_tuple()} exceeds a {height}x{width} raster")
        if accum is None:
            if sigma is None:
                sigma = max(kernel.shape) / 4.0
            accum = _Accumulator(np.shape(logits)[0], height, width, kernel, sigma)
        accum.add(window, logits)
    if accum is None:
        raise ValueError("no patches to stitch")
    return LogitMap(accum.result(), transform or GeoTransform())


@dataclass
class RunStats:
    n_patches: int
    wall_seconds: float
    area_km2: float

    @property
    def throughput_km2_s(self) -> float | None:
        if self.wall_seconds <= 0:
            return None
        return measure_throughput(self.area_km2, self.wall_seconds)


def run_tiled(model: ModelBackend, x: BandStack, spec: TilingSpec = TilingSpec(),
              kernel: np.ndarray | None = None, sigma: float | None = None,
              workers: int = 1, clock=time.perf_counter, return_stats: bool = False):
    """Enumerate patches, predict each one, stitch.

    Patch predictions may run on ``workers`` threads; accumulation always
    happens in patch-enumeration order, so the output is bit-identical for any
    worker count.
    """
    channels = x.channels()
    if model.channels_in != channels.shape[0]:
        raise ValueError(f"model expects {model.channels_in} channels, input has {channels.shape[0]}")
    h, w = x.shape
    if sigma is None:
        sigma = spec.patch_size / 4.0
    if kernel is None:
        kernel = gaussian_kernel(spec.patch_size, sigma)
    windows = enumerate_patches(h, w, spec)

    lock = None if model.thread_safe else threading.Lock()

    def predict(window: Window) -> np.ndarray:
        rs, cs = window.slices
        patch = np.ascontiguousarray(channels[:, rs, cs])
        if lock is None:
            out = model.predict(patch)
        else:
            with lock:
                out = model.predict(patch)
        return check_prediction(model, patch, out)

    t0 = clock()
    accum = _Accumulator(model.n_classes, h, w, kernel, sigma)
    if workers <= 1:
        for window in windows:
            accum.add(window, predict(window))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map yields in submission order regardless of completion order
            for window, logits in zip(windows, pool.map(predict, windows)):
                accum.add(window, logits)
    result = LogitMap(accum.result(), x.transform)
    t1 = clock()
    if not return_stats:
        return result
    return result, RunStats(len(windows), t1 - t0, x.transform.area_km2(h, w))


class TiledSegmenter(BaseEstimator):
    """Scene-scale segmentation with a pretrained patch model.

    ``fit`` is a no-op kept for pipeline compatibility; the backend is assumed
    trained. ``predict`` returns a :class:`LabelMask`; ``decision_function``
    the stitched :class:`LogitMap`.
    """

    def __init__(self, model=None, patch_size=256, overlap=0.25, sigma=None,
                 normalization=DEFAULT_REFERENCE, workers=1):
        self.model = model
        self.patch_size = patch_size
        self.overlap = overlap
        self.sigma = sigma
        self.normalization = normalization
        self.workers = workers

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("TiledSegmenter needs a model backend")
        self.spec_ = TilingSpec(self.patch_size, self.overlap)
        return self

    def decision_function(self, X: BandStack) -> LogitMap:
        if not hasattr(self, "spec_"):
            self.fit()
        xn = X if self.normalization is None else apply_normalization(X, self.normalization)
        logits, stats = run_tiled(self.model, xn, self.spec_, sigma=self.sigma,
                                  workers=self.workers, return_stats=True)
        self.stats_ = stats
        return logits

    def predict_proba(self, X: BandStack):
        return softmax(self.decision_function(X))

    def predict(self, X: BandStack):
        return argmax_labels(self.decision_function(X))
