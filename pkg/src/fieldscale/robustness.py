"""Deployment robustness metrics: four-crop translation consistency and the
input-order, preprocessing, scale and brightness sensitivities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geo import (
    DEFAULT_REFERENCE,
    BandStack,
    LabelMask,
    NormalizationSpec,
    PercentileMinMax,
    ScaleOffset,
    apply_normalization,
)
from .instances import connected_components, instance_confidences
from .metrics import InstanceSet, object_prf, pixel_metrics
from .tiler import ModelBackend, check_prediction

DEFAULT_PREP_VARIANTS = (
    ScaleOffset(10000.0, -1000.0),
    ScaleOffset(10000.0, 0.0),
    ScaleOffset(3000.0, 0.0),
    PercentileMinMax(1.0, 99.0),
)
DEFAULT_SCALE_FACTORS = (0.5, 2.0)
MIN_RESIZED_SIDE = 8


@dataclass(frozen=True)
class ConsistencySpec:
    """Patch side ``patch_size`` and corner-crop side ``crop_size``, S/2 < p < S."""

    patch_size: int = 256
    crop_size: int = 192

    def __post_init__(self):
        s, p = self.patch_size, self.crop_size
        if not (s / 2 < p < s):
            raise ValueError(f"crop size must satisfy S/2 < p < S (S={s}, p={p})")

    @property
    def overlap(self) -> int:
        return 2 * self.crop_size - self.patch_size

    @classmethod
    def from_overlap(cls, patch_size: int, overlap: int) -> "ConsistencySpec":
        if (patch_size + overlap) % 2:
            raise ValueError(f"overlap {overlap} and patch size {patch_size} must have equal parity")
        return cls(patch_size, (patch_size + overlap) // 2)


# -- helpers -----------------------------------------------------------------------


def _predict(model: ModelBackend, channels: np.ndarray) -> np.ndarray:
    return check_prediction(model, channels, model.predict(np.ascontiguousarray(channels)))


def _normalize(x: BandStack, g: NormalizationSpec | None) -> BandStack:
    return x if g is None else apply_normalization(x, g)


def resize_bilinear(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes, half-pixel centres, edge clamped.

    Equal in and out sizes return the input values unchanged.
    """
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[-2:]

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    rows = a[..., r0, :] * (1 - fr)[:, None] + a[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


def pixel_iou_metric(logits: np.ndarray, gt: LabelMask) -> float | None:
    pred = np.argmax(logits, axis=0).astype(np.uint8)
    return pixel_metrics(pred, gt).iou


def object_f1_metric(logits: np.ndarray, gt: LabelMask) -> float | None:
    z = logits - logits.max(axis=0, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=0, keepdims=True)
    pred_ids = connected_components(np.argmax(logits, axis=0))
    preds = InstanceSet(pred_ids, instance_confidences(prob, pred_ids))
    gts = InstanceSet(connected_components(gt))
    if gts.n == 0 and preds.n == 0:
        return None
    return object_prf(preds, gts).f1


METRICS = {"iou": pixel_iou_metric, "f1": object_f1_metric}


def _metric(m):
    if callable(m):
        return m
    try:
        return METRICS[m]
    except KeyError:
        raise ValueError(f"unknown metric {m!r}; choose from {sorted(METRICS)}") from None


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _samples(dataset):
    for item in dataset:
        if hasattr(item, "image") and hasattr(item, "gt_mask"):
            yield item.image, item.gt_mask
        else:
            yield item


# -- translation consistency --------------------------------------------------------


def consistency(model: ModelBackend, x: BandStack, spec: ConsistencySpec,
                reference: NormalizationSpec | None = DEFAULT_REFERENCE) -> float:
    """Fraction of the shared centre where the labels of the four corner crops all agree."""
    s, p = spec.patch_size, spec.crop_size
    if x.shape != (s, s):
        raise ValueError(f"input must be {s}x{s}, got {x.shape}")
    ch = _normalize(x, reference).channels()
    off = s - p
    labels = []
    for r0 in (0, off):
        for c0 in (0, off):
            logits = _predict(model, ch[:, r0:r0 + p, c0:c0 + p])
            pred = np.argmax(logits, axis=0)
            # centre region [off, p) in patch coordinates
            labels.append(pred[off - r0:p - r0, off - c0:p - c0])
    first = labels[0]
    agree = np.ones_like(first, dtype=bool)
    for other in labels[1:]:
        agree &= other == first
    return float(agree.mean())


def consistency_sweep(model: ModelBackend, dataset, overlaps, patch_size: int | None = None,
                      reference: NormalizationSpec | None = DEFAULT_REFERENCE) -> dict[int, float]:
    """Mean consistency per overlap side ``2p - S``."""
    samples = [x for x, _ in _samples(dataset)]
    if patch_size is None:
        patch_size = samples[0].shape[0]
    out = {}
    for overlap in overlaps:
        spec = ConsistencySpec.from_overlap(patch_size, overlap)
        out[int(overlap)] = float(np.mean([consistency(model, x, spec, reference) for x in samples]))
    return out


# -- sensitivities ----------------------------------------------------------------------


@dataclass
class SensitivityReport:
    """``delta`` is the mean over samples of the per-sample absolute drop."""

    metric: str
    m_ref: float | None
    m_perturbed: float | None
    delta: float | None
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "m_ref": self.m_ref,
            "m_perturbed": self.m_perturbed,
            "delta": self.delta,
            "per_sample": self.per_sample,
        }


def _report(name, rows) -> SensitivityReport:
    return SensitivityReport(
        metric=name,
        m_ref=_mean(r["m_ref"] for r in rows),
        m_perturbed=_mean(r["m_perturbed"] for r in rows),
        delta=_mean(r["delta"] for r in rows),
        per_sample=rows,
    )


def _metric_name(metric):
    return metric if isinstance(metric, str) else getattr(metric, "__name__", "custom")


def input_order_sensitivity(model: ModelBackend, dataset, metric="iou", permutations=((1, 0),),
                            reference: NormalizationSpec | None = DEFAULT_REFERENCE) -> SensitivityReport:
    """|m(canonical order) - mean over permutations of m(permuted order)| per sample."""
    m = _metric(metric)
    rows = []
    for x, y in _samples(dataset):
        ref = m(_predict(model, _normalize(x, reference).channels()), y)
        perm = [m(_predict(model, _normalize(x.reorder(pi), reference).channels()), y)
                for pi in permutations]
        m_perm = _mean(perm)
        delta = None if ref is None or m_perm is None else abs(ref - m_perm)
        rows.append({"m_ref": ref, "m_perturbed": m_perm, "delta": delta})
    return _report(_metric_name(metric), rows)


def preprocessing_sensitivity(model: ModelBackend, dataset, g_ref: NormalizationSpec = DEFAULT_REFERENCE,
                              variants=DEFAULT_PREP_VARIANTS, metric="iou") -> SensitivityReport:
    """Per sample ``mean_j |m(g_ref) - m(g_j)|``, averaged over samples."""
    if not variants:
        raise ValueError("need at least one preprocessing variant")
    m = _metric(metric)
    rows = []
    for x, y in _samples(dataset):
        ref = m(_predict(model, apply_normalization(x, g_ref).channels()), y)
        alts = [m(_predict(model, apply_normalization(x, g).channels()), y) for g in variants]
        diffs = [abs(ref - a) for a in alts if a is not None and ref is not None]
        rows.append({"m_ref": ref, "m_perturbed": _mean(alts), "delta": _mean(diffs)})
    return _report(_metric_name(metric), rows)


def scale_sensitivity(model: ModelBackend, dataset, factors=DEFAULT_SCALE_FACTORS, metric="iou",
                      reference: NormalizationSpec | None = DEFAULT_REFERENCE) -> SensitivityReport:
    """Resize inputs by each factor (bilinear), predict, resize logits back (bilinear), score."""
    if any(not f > 0 for f in factors):
        raise ValueError("scale factors must be > 0")
    m = _metric(metric)
    rows = []
    for x, y in _samples(dataset):
        ch = _normalize(x, reference).channels()
        h, w = ch.shape[1:]
        ref = m(_predict(model, ch), y)
        scaled = []
        for f in factors:
            sh, sw = int(round(h * f)), int(round(w * f))
            if min(sh, sw) < MIN_RESIZED_SIDE:
                raise ValueError(f"factor {f} resizes {h}x{w} below {MIN_RESIZED_SIDE} px")
            logits = _predict(model, resize_bilinear(ch, sh, sw))
            scaled.append(m(resize_bilinear(logits, h, w), y))
        diffs = [abs(ref - s) for s in scaled if s is not None and ref is not None]
        rows.append({"m_ref": ref, "m_perturbed": _mean(scaled), "delta": _mean(diffs)})
    return _report(_metric_name(metric), rows)


def brightness_sensitivity(model: ModelBackend, dataset, factors=(0.8, 1.2), metric="iou",
                           reference: NormalizationSpec | None = DEFAULT_REFERENCE) -> SensitivityReport:
    """Multiply raw reflectances by each factor before normalizing; same aggregation as above."""
    m = _metric(metric)
    rows = []
    for x, y in _samples(dataset):
        ref = m(_predict(model, _normalize(x, reference).channels()), y)
        alts = [m(_predict(model, _normalize(x.replace(x.values * f), reference).channels()), y)
                for f in factors]
        diffs = [abs(ref - a) for a in alts if a is not None and ref is not None]
        rows.append({"m_ref": ref, "m_perturbed": _mean(alts), "delta": _mean(diffs)})
    return _report(_metric_name(metric), rows)
