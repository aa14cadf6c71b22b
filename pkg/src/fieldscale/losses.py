"""Segmentation losses with analytic gradients w.r.t. logits.

All losses take logits (C, H, W) and a target mask whose 255 pixels are left
out of every sum. With p = softmax(logits), t = one-hot(target) and per-class
sums I = sum(p*t), P = sum(p), T = sum(t) over evaluated pixels:

    ce            -sum_i w[t_i] log p_i[t_i] / N
    focal         -sum_i w[t_i] (1 - p_i[t_i])^gamma log p_i[t_i] / N
    dice          1 - (2I + eps) / (P + T + eps)                        per class
    logcosh_dice  log(cosh(dice))
    jaccard       1 - (I + eps) / (P + T - I + eps)                     per class
    tversky       1 - (I + eps/2) / (I + a(P - I) + b(T - I) + eps/2)   per class
    ftnmt         1 - (FT(p, t) + FT(1 - p, 1 - t)) / 2                 per class

where FT(a, b) = mean_{i<d} (A + eps) / (2^i (Q + R) - (2^(i+1) - 1) A + eps)
with A = sum(a*b), Q = sum(a^2), R = sum(b^2) (fractal Tanimoto of depth d).
Per-class losses are combined by a class-weighted mean (plain mean without
weights). Tversky uses eps/2 so that alpha = beta = 0.5 is exactly Dice.

Gradients are formed as dL/dp and pushed through the softmax Jacobian, except
CE and focal which use their closed forms in logit space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from ._validation import check_logits
from .geo import UNKNOWN, LabelMask
from .rng import SplitMix64

KINDS = ("ce", "dice", "logcosh_dice", "jaccard", "focal", "tversky", "ftnmt")


def class_weights(omega: float) -> np.ndarray:
    """Background/interior/boundary weights ``[0.05, 0.95 - omega, omega]``.

    The subtraction is done in decimal on the shortest repr of ``omega`` so
    that e.g. omega = 0.75 gives exactly 0.2 rather than 0.19999999999999996.
    """
    if not 0 <= omega <= 0.95:
        raise ValueError(f"omega must be in [0, 0.95], got {omega}")
    interior = float(Decimal("0.95") - Decimal(repr(float(omega))))
    return np.array([0.05, interior, float(omega)])


@dataclass(frozen=True)
class LossSpec:
    kind: str
    class_weights: tuple | None = None
    eps: float = 1e-6
    gamma: float = 2.0
    alpha: float = 0.5
    beta: float = 0.5
    depth: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; choose from {KINDS}")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.depth < 0 or int(self.depth) != self.depth:
            raise ValueError("depth must be a non-negative integer")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if (w < 0).any() or w.sum() <= 0:
                raise ValueError("class weights must be >= 0 with a positive sum")
            object.__setattr__(self, "class_weights", tuple(float(v) for v in w))


@dataclass(frozen=True)
class CompositeLoss:
    """Weighted sum of losses, e.g. CE + Dice with unit weights."""

    terms: tuple = field(default_factory=tuple)

    @classmethod
    def of(cls, *specs, weights=None) -> "CompositeLoss":
        weights = [1.0] * len(specs) if weights is None else list(weights)
        return cls(tuple(zip(specs, weights)))


def _prepare(logits, target):
    z = check_logits(logits)
    tgt = target.values if isinstance(target, LabelMask) else np.asarray(target)
    if tgt.shape != z.shape[1:]:
        raise ValueError(f"target shape {tgt.shape} does not match logits {z.shape}")
    mask = tgt != UNKNOWN
    n = int(mask.sum())
    if n == 0:
        raise ValueError("every pixel is masked (255); loss undefined")
    c = z.shape[0]
    if tgt[mask].max() >= c:
        raise ValueError(f"target has class indices >= {c}")
    zmax = z.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(z - zmax).sum(axis=0, keepdims=True)) + zmax
    logp = z - logsum
    p = np.exp(logp)
    t = np.zeros_like(z)
    idx = np.where(mask, tgt, 0).astype(np.int64)
    np.put_along_axis(t, idx[None], 1.0, axis=0)
    t *= mask
    return z, p, logp, t, mask, n, idx


def _weights(spec: LossSpec, c: int) -> np.ndarray:
    if spec.class_weights is None:
        return np.ones(c)
    w = np.asarray(spec.class_weights, dtype=np.float64)
    if w.shape != (c,):
        raise ValueError(f"{len(w)} class weights for {c} classes")
    return w


def _softmax_backward(p, grad_p, mask):
    g = p * (grad_p - (p * grad_p).sum(axis=0, keepdims=True))
    return g * mask


def _sums(p, t, mask):
    pm = p * mask
    return (pm * t).sum(axis=(1, 2)), pm.sum(axis=(1, 2)), t.sum(axis=(1, 2))


def _class_mean(per_class, grad_per_class, w):
    wn = w / w.sum()
    return float((wn * per_class).sum()), grad_per_class * wn[:, None, None]


def _ce_focal(spec, z, p, logp, t, mask, n, idx, gamma):
    w = _weights(spec, z.shape[0])
    wt = w[idx] * mask
    pt = np.take_along_axis(p, idx[None], axis=0)[0]
    logpt = np.take_along_axis(logp, idx[None], axis=0)[0]
    one_minus = 1.0 - pt
    mod = one_minus**gamma if gamma else np.ones_like(pt)
    value = float(-(wt * mod * logpt).sum() / n)
    # dL/dz_c = w_t * [gamma (1-p_t)^(gamma-1) p_t log p_t - (1-p_t)^gamma] * (delta_ct - p_c) / N
    if gamma:
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = gamma * one_minus ** (gamma - 1.0) * pt * logpt
        extra = np.where(one_minus > 0, extra, 0.0)
    else:
        extra = 0.0
    coef = wt * (extra - mod) / n
    grad = coef[None] * (t - p * mask)
    return value, grad


def _dice_parts(spec, p, t, mask):
    inter, psum, tsum = _sums(p, t, mask)
    eps = spec.eps
    den = psum + tsum + eps
    per_class = 1.0 - (2 * inter + eps) / den
    dp = -(2 * t * den[:, None, None] - (2 * inter + eps)[:, None, None]) / (den**2)[:, None, None]
    return per_class, dp * mask


def _jaccard_parts(spec, p, t, mask):
    inter, psum, tsum = _sums(p, t, mask)
    eps = spec.eps
    num = inter + eps
    den = psum + tsum - inter + eps
    per_class = 1.0 - num / den
    dden = 1.0 - t
    dp = -(t * den[:, None, None] - num[:, None, None] * dden) / (den**2)[:, None, None]
    return per_class, dp * mask


def _tversky_parts(spec, p, t, mask):
    inter, psum, tsum = _sums(p, t, mask)
    a, b, e = spec.alpha, spec.beta, spec.eps / 2.0
    num = inter + e
    den = (1 - a - b) * inter + a * psum + b * tsum + e
    per_class = 1.0 - num / den
    dden = (1 - a - b) * t + a
    dp = -(t * den[:, None, None] - num[:, None, None] * dden) / (den**2)[:, None, None]
    return per_class, dp * mask


def _fractal_tanimoto(a, b, mask, depth, eps):
    """Depth-averaged Tanimoto per class and its gradient w.r.t. ``a``."""
    am, bm = a * mask, b * mask
    A = (am * bm).sum(axis=(1, 2))
    Q = (am * am).sum(axis=(1, 2))
    R = (bm * bm).sum(axis=(1, 2))
    d = max(int(depth), 1)
    value = np.zeros_like(A)
    grad = np.zeros_like(a)
    for i in range(d):
        scale = 2.0**i
        den = scale * (Q + R) - (2 * scale - 1) * A + eps
        num = A + eps
        value += num / den
        dden = scale * 2 * am - (2 * scale - 1) * bm
        grad += (bm * den[:, None, None] - num[:, None, None] * dden) / (den**2)[:, None, None]
    return value / d, grad * mask / d


def _ftnmt_parts(spec, p, t, mask):
    v1, g1 = _fractal_tanimoto(p, t, mask, spec.depth, spec.eps)
    v2, g2 = _fractal_tanimoto(1 - p, 1 - t, mask, spec.depth, spec.eps)
    per_class = 1.0 - 0.5 * (v1 + v2)
    dp = -0.5 * (g1 - g2)
    return per_class, dp


_OVERLAP = {
    "dice": _dice_parts,
    "logcosh_dice": _dice_parts,
    "jaccard": _jaccard_parts,
    "tversky": _tversky_parts,
    "ftnmt": _ftnmt_parts,
}


def _value_and_grad(spec: LossSpec, logits, target):
    z, p, logp, t, mask, n, idx = _prepare(logits, target)
    if spec.kind == "ce":
        return _ce_focal(spec, z, p, logp, t, mask, n, idx, 0.0)
    if spec.kind == "focal":
        return _ce_focal(spec, z, p, logp, t, mask, n, idx, spec.gamma)
    per_class, dp = _OVERLAP[spec.kind](spec, p, t, mask)
    value, dp = _class_mean(per_class, dp, _weights(spec, z.shape[0]))
    if spec.kind == "logcosh_dice":
        dp = np.tanh(value) * dp
        value = float(np.log(np.cosh(value)))
    return value, _softmax_backward(p, dp, mask)


def tanimoto_complement_loss(logits, target, eps: float = 1e-6, class_weights=None) -> float:
    """Plain Tanimoto-with-complement loss, written out without the depth machinery.

    Per class: ``T(a, b) = (sum ab + eps) / (sum a^2 + sum b^2 - sum ab + eps)``
    and ``loss = 1 - (T(p, t) + T(1 - p, 1 - t)) / 2``.
    """
    z, p, _, t, mask, _, _ = _prepare(logits, target)
    losses = []
    for c in range(z.shape[0]):
        pc, tc = p[c][mask], t[c][mask]

        def tan(a, b):
            ab = float(np.dot(a, b))
            return (ab + eps) / (float(np.dot(a, a)) + float(np.dot(b, b)) - ab + eps)

        losses.append(1.0 - 0.5 * (tan(pc, tc) + tan(1 - pc, 1 - tc)))
    w = np.ones(len(losses)) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    return float(np.dot(w / w.sum(), losses))


def loss_value_and_grad(spec, logits, target):
    if isinstance(spec, CompositeLoss):
        total, grad = 0.0, None
        for term, weight in spec.terms:
            v, g = _value_and_grad(term, logits, target)
            total += weight * v
            grad = weight * g if grad is None else grad + weight * g
        return total, grad
    return _value_and_grad(spec, logits, target)


def loss_forward(spec, logits, target) -> float:
    return loss_value_and_grad(spec, logits, target)[0]


def loss_grad(spec, logits, target) -> np.ndarray:
    """dLoss/dlogits, shape (C, H, W); masked pixels get exactly zero."""
    return loss_value_and_grad(spec, logits, target)[1]


def finite_diff_check(spec, logits, target, h: float = 1e-3, n_samples: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between central differences and :func:`loss_grad`.

    The relative error uses ``max(|g|, 1e-8)`` as denominator. ``n_samples``
    coordinates are drawn with the given seed; ``None`` checks every one.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    z = np.array(check_logits(logits), dtype=np.float64)
    g = loss_grad(spec, z, target)
    size = z.size
    if n_samples is None or n_samples >= size:
        coords = np.arange(size)
    else:
        rng = SplitMix64(seed)
        coords = np.unique(rng.integers(0, size, n_samples))
    flat = z.reshape(-1)
    worst = 0.0
    for k in coords.tolist():
        orig = flat[k]
        flat[k] = orig + h
        fp = loss_forward(spec, z, target)
        flat[k] = orig - h
        fm = loss_forward(spec, z, target)
        flat[k] = orig
        fd = (fp - fm) / (2 * h)
        an = g.reshape(-1)[k]
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-8))
    return worst
