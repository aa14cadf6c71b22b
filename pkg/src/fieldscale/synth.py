"""Synthetic field worlds and stub model backends used as test oracles.

A world is a region tessellation grown from random seeds (multi-source BFS
in lock-step layers; contested pixels go to the lowest region index). Pixels
8-adjacent to another region or to background become boundary class. The
imagery gives each class a distinct two-frame spectral signature, so the
stub models can recover the ground truth from pixel content alone.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geo import (
    BACKGROUND,
    BOUNDARY,
    DEFAULT_REFERENCE,
    INTERIOR,
    BandStack,
    GeoTransform,
    LabelMask,
    NormalizationSpec,
    ScaleOffset,
)
from .instances import FieldInstance, InstanceIdMap, connected_components, polygonize
from .rng import SplitMix64, normal_at
from .tiler import ModelBackend

# Digital numbers (reflectance x 10000) per class for R, G, B, NIR.
PLANTING_SIGNATURE = np.array([
    [1200, 1300, 1400, 2000],  # background
    [400, 700, 500, 3600],     # interior: green-up
    [2300, 2200, 2100, 2700],  # boundary
], dtype=np.float64)
HARVEST_SIGNATURE = np.array([
    [1900, 1800, 1700, 1400],
    [1500, 1300, 1100, 2200],
    [2900, 2800, 2700, 1900],
], dtype=np.float64)

BRIGHTNESS_JITTER = 0.05
PIXEL_NOISE_DN = 20.0
# swaps background and interior, keeps boundary
INVERTED = np.array([INTERIOR, BACKGROUND, BOUNDARY])


@dataclass(frozen=True, eq=False)
class SynthWorld:
    seed: int
    height: int
    width: int
    n_fields: int
    background_fraction: float
    regions: np.ndarray
    gt_mask: LabelMask
    image: BandStack
    transform: GeoTransform = field(default_factory=GeoTransform)

    @cached_property
    def gt_ids(self) -> InstanceIdMap:
        return connected_components(self.gt_mask, INTERIOR)

    @cached_property
    def gt_instances(self) -> list[FieldInstance]:
        return polygonize(self.gt_ids, transform=self.transform)

    @property
    def n_interior_components(self) -> int:
        return self.gt_ids.n


def _grow_regions(seeds_rc: np.ndarray, height: int, width: int) -> np.ndarray:
    big = np.iinfo(np.int32).max
    regions = np.zeros((height, width), dtype=np.int32)
    regions[seeds_rc[:, 0], seeds_rc[:, 1]] = np.arange(1, len(seeds_rc) + 1, dtype=np.int32)
    while (regions == 0).any():
        cand = np.where(regions > 0, regions, big)
        pad = np.pad(cand, 1, constant_values=big)
        best = np.minimum.reduce([pad[:-2, 1:-1], pad[2:, 1:-1], pad[1:-1, :-2], pad[1:-1, 2:]])
        grow = (regions == 0) & (best < big)
        regions[grow] = best[grow]
    return regions


def _background_blob(rng: SplitMix64, height: int, width: int, n_pixels: int) -> np.ndarray:
    """First ``n_pixels`` of a BFS from a random raster-edge pixel."""
    out = np.zeros((height, width), dtype=bool)
    if n_pixels <= 0:
        return out
    perimeter = 2 * (height + width) - 4
    k = int(rng.integers(0, perimeter, 1)[0])
    if k < width:
        start = (0, k)
    elif k < width + height - 1:
        start = (k - width + 1, width - 1)
    elif k < 2 * width + height - 2:
        start = (height - 1, width - 1 - (k - width - height + 2))
    else:
        start = (height - 1 - (k - 2 * width - height + 3), 0)
    queue = deque([start])
    out[start] = True
    taken = 1
    while queue and taken < n_pixels:
        r, c = queue.popleft()
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < height and 0 <= cc < width and not out[rr, cc]:
                out[rr, cc] = True
                taken += 1
                queue.append((rr, cc))
                if taken >= n_pixels:
                    break
    return out


def classify_regions(regions: np.ndarray) -> np.ndarray:
    """Boundary where any 8-neighbour carries a different region (0 = background)."""
    pad = np.pad(regions, 1, mode="edge")
    h, w = regions.shape
    differs = np.zeros((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr or dc:
                differs |= pad[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] != regions
    mask = np.full((h, w), INTERIOR, dtype=np.uint8)
    mask[differs] = BOUNDARY
    mask[regions == 0] = BACKGROUND
    return mask


def render_image(rng: SplitMix64, regions: np.ndarray, mask: np.ndarray,
                 transform: GeoTransform) -> BandStack:
    h, w = mask.shape
    n_regions = int(regions.max())
    gain = 1.0 + BRIGHTNESS_JITTER * (2.0 * rng.uniform(n_regions + 1) - 1.0)
    gain[0] = 1.0
    frames = []
    for signature in (PLANTING_SIGNATURE, HARVEST_SIGNATURE):
        base = signature[mask].transpose(2, 0, 1) * gain[regions][None]
        noise = PIXEL_NOISE_DN * rng.normal(base.size).reshape(base.shape)
        frames.append(np.maximum(base + noise, 1.0))
    return BandStack(np.round(np.stack(frames)), None, transform, 0.0)


def generate_world(seed: int, height: int = 64, width: int = 64, n_fields: int = 8,
                   background_fraction: float = 0.0,
                   transform: GeoTransform | None = None) -> SynthWorld:
    """Deterministic field world; identical arguments give bit-identical output."""
    if n_fields < 1:
        raise ValueError("n_fields must be >= 1")
    if height < 32 or width < 32:
        raise ValueError("worlds must be at least 32x32")
    if n_fields > height * width / 16:
        raise ValueError(f"n_fields={n_fields} exceeds H*W/16")
    if not 0 <= background_fraction < 1:
        raise ValueError("background_fraction must be in [0, 1)")
    transform = transform or GeoTransform()
    rng = SplitMix64(seed)
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < n_fields:
        for v in rng.integers(0, height * width, n_fields).tolist():
            if v not in seen and len(chosen) < n_fields:
                seen.add(v)
                chosen.append(v)
    seeds_rc = np.array([divmod(v, width) for v in chosen], dtype=np.int64)
    regions = _grow_regions(seeds_rc, height, width)
    bg = _background_blob(rng, height, width, int(round(background_fraction * height * width)))
    regions[bg] = 0
    mask = classify_regions(regions)
    image = render_image(rng, regions, mask, transform)
    return SynthWorld(seed, height, width, n_fields, background_fraction, regions,
                      LabelMask(mask, transform), image, transform)


# -- stub backends ----------------------------------------------------------------


def _centroids(reference: NormalizationSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per (class, frame order) 8-channel signature after the reference normalization."""
    if not isinstance(reference, ScaleOffset):
        raise ValueError("stub decoders need a ScaleOffset reference normalization")
    canon = np.concatenate([PLANTING_SIGNATURE, HARVEST_SIGNATURE], axis=1)
    swapped = np.concatenate([HARVEST_SIGNATURE, PLANTING_SIGNATURE], axis=1)
    cents = (np.concatenate([canon, swapped]) + reference.offset) / reference.scale
    classes = np.array([0, 1, 2, 0, 1, 2])
    canonical = np.array([True] * 3 + [False] * 3)
    return cents, classes, canonical


def decode_content(patch: np.ndarray, reference: NormalizationSpec = DEFAULT_REFERENCE):
    """Nearest-signature decode of (8, h, w) normalized input -> (class, canonical order)."""
    cents, classes, canonical = _centroids(reference)
    x = np.asarray(patch, dtype=np.float64)
    d = ((x[None] - cents[:, :, None, None]) ** 2).sum(axis=1)
    k = np.argmin(d, axis=0)
    return classes[k], canonical[k]


def _one_hot(labels: np.ndarray, n_classes: int, gain: float) -> np.ndarray:
    out = np.zeros((n_classes,) + labels.shape, dtype=np.float64)
    np.put_along_axis(out, labels[None].astype(np.int64), gain, axis=0)
    return out


class OracleBackend(ModelBackend):
    """``gain * one_hot(class)`` with the class decoded from each pixel's own values."""

    def __init__(self, logit_gain: float = 10.0, reference: NormalizationSpec = DEFAULT_REFERENCE):
        self.logit_gain = logit_gain
        self.reference = reference

    def predict(self, patch):
        labels, _ = decode_content(patch, self.reference)
        return _one_hot(labels, self.n_classes, self.logit_gain)


class Frame0OnlyBackend(OracleBackend):
    """Oracle when frame 0 is the planting frame; background/interior swapped otherwise."""

    def predict(self, patch):
        labels, canonical = decode_content(patch, self.reference)
        labels = np.where(canonical, labels, INVERTED[labels])
        return _one_hot(labels, self.n_classes, self.logit_gain)


class NoisyBackend(OracleBackend):
    """Oracle logits plus seeded Gaussian noise indexed by (class, local row, local col)."""

    def __init__(self, sigma: float, seed: int = 0, logit_gain: float = 10.0,
                 reference: NormalizationSpec = DEFAULT_REFERENCE):
        super().__init__(logit_gain, reference)
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.sigma = sigma
        self.seed = seed

    def predict(self, patch):
        logits = super().predict(patch)
        if self.sigma == 0:
            return logits
        c, h, w = logits.shape
        cc, rr, ww = np.meshgrid(np.arange(c), np.arange(h), np.arange(w), indexing="ij")
        counters = (cc.astype(np.uint64) << np.uint64(40)) | (rr.astype(np.uint64) << np.uint64(20)) | ww.astype(np.uint64)
        return logits + self.sigma * normal_at(self.seed, counters)


class PositionModKBackend(ModelBackend):
    """Ignores content: class = (local row mod k) mod n_classes."""

    def __init__(self, k: int = 3, logit_gain: float = 10.0):
        if k < 2:
            raise ValueError("k must be >= 2")
        self.k = k
        self.logit_gain = logit_gain

    def predict(self, patch):
        h, w = patch.shape[1:]
        rows = (np.arange(h) % self.k) % self.n_classes
        labels = np.broadcast_to(rows[:, None], (h, w))
        return _one_hot(labels, self.n_classes, self.logit_gain)


class ConstantBackend(ModelBackend):
    """Emits the same logit vector at every pixel."""

    def __init__(self, logits=(0.0, 1.0, 0.0), channels_in: int = 8):
        self.logits = np.asarray(logits, dtype=np.float64)
        self.n_classes = len(self.logits)
        self.channels_in = channels_in

    def predict(self, patch):
        h, w = patch.shape[1:]
        return np.broadcast_to(self.logits[:, None, None], (self.n_classes, h, w)).copy()


class LinearBackend(ModelBackend):
    """Per-pixel linear functional ``weights @ x + bias``."""

    def __init__(self, weights, bias=None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.n_classes, self.channels_in = self.weights.shape
        self.bias = np.zeros(self.n_classes) if bias is None else np.asarray(bias, dtype=np.float64)

    def predict(self, patch):
        out = np.tensordot(self.weights, np.asarray(patch, dtype=np.float64), axes=(1, 0))
        return out + self.bias[:, None, None]


class FrameMeanBackend(ModelBackend):
    """Replaces every frame by the per-pixel mean over frames before calling ``inner``.

    Invariant to any frame permutation by construction.
    """

    def __init__(self, inner: ModelBackend, n_frames: int = 2):
        self.inner = inner
        self.n_frames = n_frames
        self.channels_in = inner.channels_in
        self.n_classes = inner.n_classes
        self.thread_safe = inner.thread_safe

    def predict(self, patch):
        t = self.n_frames
        x = np.asarray(patch, dtype=np.float64)
        frames = x.reshape((t, -1) + x.shape[1:])
        mean = frames.sum(axis=0) / t
        return self.inner.predict(np.concatenate([mean] * t))


@dataclass(frozen=True)
class StubModelSpec:
    mode: str = "oracle"
    k: int = 3
    sigma: float = 0.0
    seed: int = 0
    logit_gain: float = 10.0

    def __post_init__(self):
        if self.mode not in ("oracle", "position_mod_k", "frame0_only", "noisy"):
            raise ValueError(f"unknown stub mode {self.mode!r}")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not self.logit_gain > 0:
            raise ValueError("logit_gain must be > 0")


def make_stub_model(world: SynthWorld | None, spec: StubModelSpec,
                    reference: NormalizationSpec = DEFAULT_REFERENCE) -> ModelBackend:
    """Build a stub backend. ``world`` only fixes the input channel count."""
    channels = 8 if world is None else world.image.n_frames * world.image.n_bands
    if spec.mode == "oracle":
        model = OracleBackend(spec.logit_gain, reference)
    elif spec.mode == "frame0_only":
        model = Frame0OnlyBackend(spec.logit_gain, reference)
    elif spec.mode == "noisy":
        model = NoisyBackend(spec.sigma, spec.seed, spec.logit_gain, reference)
    else:
        model = PositionModKBackend(spec.k, spec.logit_gain)
    model.channels_in = channels
    return model
