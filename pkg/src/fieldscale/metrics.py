"""Pixel and object evaluation: masked IoU/precision/recall, greedy instance
matching, object P/R/F1, COCO-style AP and per-region macro averages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._validation import check_labels, check_same_shape
from .geo import CLASS_NAMES, INTERIOR, UNKNOWN, GeoTransform, LabelMask
from .instances import InstanceIdMap, connected_components, instance_confidences, rasterize

AP_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


def _div(num, den):
    return None if den == 0 else float(num) / float(den)


# -- pixel level -----------------------------------------------------------------


@dataclass
class ClassScores:
    iou: float | None
    precision: float | None
    recall: float | None
    f1: float | None


@dataclass
class PixelMetrics:
    """Pixel scores over pixels whose ground truth is not 255.

    ``iou``/``precision``/``recall``/``f1`` refer to the positive class
    (interior by default) or to 3-class means when ``mean_iou`` was requested.
    Everything is ``None`` when no pixel could be evaluated.
    """

    iou: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    per_class: dict = field(default_factory=dict)
    evaluated_pixel_count: int = 0

    def to_dict(self) -> dict:
        return {
            "iou": self.iou,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "evaluated_pixel_count": self.evaluated_pixel_count,
            "per_class": {k: vars(v) for k, v in self.per_class.items()},
        }


def _values(m):
    return m.values if isinstance(m, LabelMask) else check_labels(m)


def pixel_metrics(pred, gt, positive: int = INTERIOR, mean_iou: bool = False,
                  n_classes: int = 3) -> PixelMetrics:
    p, g = _values(pred), _values(gt)
    check_same_shape(p, g, "prediction and ground truth")
    keep = g != UNKNOWN
    n_eval = int(keep.sum())
    if n_eval == 0:
        return PixelMetrics(None, None, None, None, {}, 0)
    pk, gk = p[keep].astype(np.int64), g[keep].astype(np.int64)
    size = max(n_classes, int(pk.max()) + 1, int(gk.max()) + 1)
    conf = np.bincount(gk * size + pk, minlength=size * size).reshape(size, size)
    per_class = {}
    for c in range(n_classes):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        prec, rec = _div(tp, tp + fp), _div(tp, tp + fn)
        f1 = _div(2 * tp, 2 * tp + fp + fn)
        per_class[CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)] = ClassScores(
            _div(tp, tp + fp + fn), prec, rec, f1)
    if mean_iou:
        def mean_of(attr):
            vals = [getattr(s, attr) for s in per_class.values() if getattr(s, attr) is not None]
            return float(np.mean(vals)) if vals else None
        return PixelMetrics(mean_of("iou"), mean_of("precision"), mean_of("recall"),
                            mean_of("f1"), per_class, n_eval)
    s = per_class[CLASS_NAMES[positive]]
    return PixelMetrics(s.iou, s.precision, s.recall, s.f1, per_class, n_eval)


# -- instance sets -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InstanceSet:
    """Non-overlapping instances as an id map with per-id confidence (index 0 unused)."""

    ids: InstanceIdMap
    confidences: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.ids.n

    @property
    def areas(self) -> np.ndarray:
        return self.ids.pixel_counts()

    def confidence(self, k: int) -> float:
        return 1.0 if self.confidences is None else float(self.confidences[k])

    @classmethod
    def from_masks(cls, masks, confidences=None, shape=None) -> "InstanceSet":
        """Build from boolean masks; later masks win on overlap, empty leftovers are dropped."""
        masks = [np.asarray(m, dtype=bool) for m in masks]
        shape = shape or masks[0].shape
        ids = np.zeros(shape, dtype=np.int32)
        for k, m in enumerate(masks, start=1):
            ids[m] = k
        present = [k for k in range(1, len(masks) + 1) if (ids == k).any()]
        remap = np.zeros(len(masks) + 1, dtype=np.int32)
        remap[present] = np.arange(1, len(present) + 1)
        conf = None
        if confidences is not None:
            conf = np.concatenate([[np.nan], np.asarray(confidences, dtype=np.float64)[np.array(present, dtype=int) - 1]])
        return cls(InstanceIdMap(remap[ids], len(present)), conf)

    @classmethod
    def from_instances(cls, instances, shape, transform: GeoTransform | None = None) -> "InstanceSet":
        """Rasterize polygons onto a grid; ids are renumbered 1..n in list order."""
        renumbered = []
        for k, inst in enumerate(instances, start=1):
            renumbered.append(_Renumbered(k, inst))
        raw = rasterize(renumbered, shape, transform)
        conf = np.full(len(instances) + 1, np.nan)
        for k, inst in enumerate(instances, start=1):
            conf[k] = 1.0 if inst.confidence is None else inst.confidence
        present = np.unique(raw)
        present = present[present > 0]
        remap = np.zeros(len(instances) + 1, dtype=np.int32)
        remap[present] = np.arange(1, len(present) + 1)
        return cls(InstanceIdMap(remap[raw], len(present), transform or GeoTransform()),
                   np.concatenate([[np.nan], conf[present]]))


class _Renumbered:
    def __init__(self, k, inst):
        self.id = k
        self._inst = inst

    def rings(self):
        return self._inst.rings()


def instance_iou(a, b) -> float:
    """IoU of two pixel supports given as boolean masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ValueError("both instances are empty")
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(preds: InstanceSet, gts: InstanceSet) -> np.ndarray:
    """(n_pred, n_gt) pairwise IoU from the joint histogram of the two id maps."""
    check_same_shape(preds.ids.values, gts.ids.values, "prediction and ground-truth id maps")
    np_, ng = preds.n, gts.n
    joint = np.bincount(
        preds.ids.values.ravel().astype(np.int64) * (ng + 1) + gts.ids.values.ravel(),
        minlength=(np_ + 1) * (ng + 1),
    ).reshape(np_ + 1, ng + 1)
    inter = joint[1:, 1:].astype(np.float64)
    ap = preds.areas[1:].astype(np.float64)
    ag = gts.areas[1:].astype(np.float64)
    union = ap[:, None] + ag[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


@dataclass
class MatchResult:
    pairs: list
    unmatched_preds: list
    unmatched_gts: list
    iou_threshold: float

    @property
    def n_matches(self) -> int:
        return len(self.pairs)


def confidence_order(preds: InstanceSet, keep=None) -> list[int]:
    """Pred ids by descending confidence, then larger area, then lower id."""
    areas = preds.areas
    ids = range(1, preds.n + 1) if keep is None else keep
    return sorted(ids, key=lambda k: (-preds.confidence(k), -int(areas[k]), k))


def _greedy(iou: np.ndarray, order, thresh: float):
    matched_gt: set[int] = set()
    pairs = []
    for k in order:
        row = iou[k - 1]
        best, best_iou = None, -1.0
        for g in range(row.shape[0]):
            if g + 1 in matched_gt:
                continue
            v = row[g]
            if v >= thresh and v > best_iou:
                best, best_iou = g + 1, float(v)
        if best is not None:
            matched_gt.add(best)
            pairs.append((k, best, best_iou))
    return pairs


def _optimal(iou: np.ndarray, order, thresh: float):
    """Maximum-cardinality, then maximum-total-IoU one-to-one matching."""
    rows = np.array(order, dtype=int) - 1
    if rows.size == 0 or iou.shape[1] == 0:
        return []
    sub = iou[rows]
    ok = sub >= thresh
    # one unit per matched pair dominates any IoU total (< n_pairs <= 1 per pair)
    bonus = min(sub.shape) + 1.0
    score = np.where(ok, bonus + sub, 0.0)
    r, c = linear_sum_assignment(score, maximize=True)
    return [(int(rows[i] + 1), int(j + 1), float(sub[i, j])) for i, j in zip(r, c) if ok[i, j]]


def match_instances(preds: InstanceSet, gts: InstanceSet, iou_thresh: float = 0.5,
                    method: str = "greedy", keep=None, iou: np.ndarray | None = None) -> MatchResult:
    """One-to-one matching of predictions to ground truth.

    ``greedy`` (default) walks predictions in confidence order and takes the
    unmatched ground truth with the highest IoU >= ``iou_thresh``. ``optimal``
    maximizes the number of matches, then the total IoU.
    """
    if not 0 < iou_thresh <= 1:
        raise ValueError("iou_thresh must be in (0, 1]")
    iou = iou_matrix(preds, gts) if iou is None else iou
    order = confidence_order(preds, keep)
    if method == "greedy":
        pairs = _greedy(iou, order, iou_thresh)
    elif method == "optimal":
        pairs = _optimal(iou, order, iou_thresh)
    else:
        raise ValueError(f"unknown matching method {method!r}")
    used_p = {p for p, _, _ in pairs}
    used_g = {g for _, g, _ in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_preds=[k for k in order if k not in used_p],
        unmatched_gts=[g for g in range(1, gts.n + 1) if g not in used_g],
        iou_threshold=iou_thresh,
    )


@dataclass
class ObjectScores:
    precision: float
    recall: float
    f1: float
    n_matches: int
    n_preds: int
    n_gts: int

    def to_dict(self) -> dict:
        return dict(vars(self))


def _prf(n_match, n_pred, n_gt):
    p = n_match / n_pred if n_pred else 0.0
    r = n_match / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def object_prf(preds: InstanceSet, gts: InstanceSet, conf_thresh: float = 0.5,
               iou_thresh: float = 0.5, method: str = "greedy") -> ObjectScores:
    """Object precision/recall/F1; predictions with confidence < ``conf_thresh`` are dropped first."""
    keep = [k for k in range(1, preds.n + 1) if preds.confidence(k) >= conf_thresh]
    m = match_instances(preds, gts, iou_thresh, method, keep=keep)
    p, r, f = _prf(m.n_matches, len(keep), gts.n)
    return ObjectScores(p, r, f, m.n_matches, len(keep), gts.n)


def object_prf_from_match(match: MatchResult, n_gts: int | None = None) -> ObjectScores:
    n_pred = match.n_matches + len(match.unmatched_preds)
    n_gt = match.n_matches + len(match.unmatched_gts) if n_gts is None else n_gts
    p, r, f = _prf(match.n_matches, n_pred, n_gt)
    return ObjectScores(p, r, f, match.n_matches, n_pred, n_gt)


# -- average precision -----------------------------------------------------------


@dataclass
class APResult:
    ap50: float | None
    ap50_95: float | None
    per_threshold: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ap50": self.ap50, "ap50_95": self.ap50_95,
                "per_threshold": {f"{k:.2f}": v for k, v in self.per_threshold.items()}}


def interpolated_ap(tp_flags, n_gt: int) -> float:
    """101-point interpolated AP of a ranked TP/FP sequence."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall tp/n_gt reaches point i/100 iff 100*tp >= i*n_gt; integer test avoids
    # float misses such as 7/10 < linspace(0, 1, 101)[70]
    idx = np.searchsorted(100 * tp, np.arange(101) * n_gt, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(preds: InstanceSet, gts: InstanceSet,
                      thresholds=AP_IOU_THRESHOLDS) -> APResult:
    """COCO-style AP at each IoU threshold; ``ap50_95`` is their mean."""
    if gts.n == 0:
        return APResult(None, None, {t: None for t in thresholds})
    iou = iou_matrix(preds, gts)
    order = confidence_order(preds)
    per = {}
    for t in thresholds:
        matched = {p for p, _, _ in _greedy(iou, order, t)}
        per[t] = interpolated_ap([k in matched for k in order], gts.n)
    ap50 = per.get(0.5)
    return APResult(ap50, float(np.mean(list(per.values()))), per)


# -- aggregation --------------------------------------------------------------------


def _flatten(obj, prefix=""):
    if obj is None:
        return {}
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif v is None or isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool):
            out[key] = v
    return out


def macro_average(per_region: dict) -> dict:
    """Unweighted mean and population std per metric across regions.

    Regions are visited in sorted key order. ``None`` values (e.g. fully
    masked regions) are left out of that metric's mean; ``n`` counts the
    regions that contributed.
    """
    if not per_region:
        raise ValueError("need at least one region")
    columns: dict[str, list] = {}
    for region in sorted(per_region):
        for k, v in _flatten(per_region[region]).items():
            columns.setdefault(k, [])
            if v is not None:
                columns[k].append(float(v))
    out = {}
    for k, vals in columns.items():
        if vals:
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        else:
            out[k] = {"mean": None, "std": None, "n": 0}
    return out


def instances_from_labels(mask, confidences_from=None) -> InstanceSet:
    """Interior connected components of a label mask as an :class:`InstanceSet`."""
    ids = connected_components(mask, INTERIOR)
    conf = None if confidences_from is None else instance_confidences(confidences_from, ids)
    return InstanceSet(ids, conf)

