"""Field instances: connected components, blockwise polygonization, confidence
and field statistics.

Polygons follow pixel edges exactly, so rasterizing them back reproduces the
instance map. Each block emits the directed boundary edges of every id inside
it; edges that two neighbouring blocks emit in opposite directions for the
same id are interior to the field and cancel, which merges instances split
across block borders before any ring is traced.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .geo import INTERIOR, GeoTransform, LabelMask, LogitMap, ProbMap, argmax_labels, softmax

_STRUCTURE = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]),
    8: np.ones((3, 3), dtype=int),
}


@dataclass(frozen=True, eq=False)
class InstanceIdMap:
    """Dense instance ids 1..n on an (H, W) grid; 0 means no instance."""

    values: np.ndarray
    n: int
    transform: GeoTransform = field(default_factory=GeoTransform)

    @property
    def shape(self):
        return self.values.shape

    def pixel_counts(self) -> np.ndarray:
        """Pixel count per id, index 0 unused."""
        return np.bincount(self.values.ravel(), minlength=self.n + 1)


def connected_components(mask, target_class: int = INTERIOR, connectivity: int = 4) -> InstanceIdMap:
    """Label target-class pixels; ids follow first encounter in a row-major scan."""
    if isinstance(mask, LabelMask):
        values, transform = mask.values, mask.transform
    else:
        values, transform = np.asarray(mask), GeoTransform()
    if connectivity not in _STRUCTURE:
        raise ValueError("connectivity must be 4 or 8")
    labels, n = ndimage.label(values == target_class, structure=_STRUCTURE[connectivity])
    if n:
        flat = labels.ravel()
        present, first = np.unique(flat, return_index=True)
        keep = present > 0
        order = present[keep][np.argsort(first[keep], kind="stable")]
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[order] = np.arange(1, n + 1, dtype=np.int32)
        labels = remap[labels]
    return InstanceIdMap(labels.astype(np.int32), int(n), transform)


def relabel_sequential(ids: np.ndarray) -> InstanceIdMap:
    """Compact arbitrary non-negative ids into 1..n in first-encounter order."""
    ids = np.asarray(ids)
    flat = ids.ravel()
    present, first = np.unique(flat, return_index=True)
    keep = present > 0
    present, first = present[keep], first[keep]
    order = present[np.argsort(first, kind="stable")]
    lut = {int(v): i + 1 for i, v in enumerate(order)}
    out = np.zeros_like(ids, dtype=np.int32)
    for v, i in lut.items():
        out[ids == v] = i
    return InstanceIdMap(out, len(lut))


@dataclass(eq=False)
class FieldInstance:
    """One field polygon.

    Rings are closed (first vertex repeated). ``exterior``/``holes`` are in map
    coordinates with the exterior counter-clockwise and holes clockwise;
    ``exterior_px``/``holes_px`` hold the same rings on the pixel grid.
    """

    id: int
    exterior: np.ndarray
    holes: list = field(default_factory=list)
    confidence: float | None = None
    area_ha: float = 0.0
    n_pixels: int = 0
    exterior_px: np.ndarray | None = None
    holes_px: list = field(default_factory=list)

    def rings(self):
        return [self.exterior, *self.holes]


# -- edge extraction -----------------------------------------------------------

# Directed unit edges per pixel side, region kept on the left when walking with
# x = column to the right and y = row downwards.
_SIDES = {
    "top": ((1, 0), (0, 0)),
    "bottom": ((0, 1), (1, 1)),
    "left": ((0, 0), (0, 1)),
    "right": ((1, 1), (1, 0)),
}


def _block_edges(ids: np.ndarray, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    """Boundary edges of every id inside one block, as rows (id, x0, y0, x1, y1).

    Pixels outside the block count as "different", so instances cut by the
    block border get a closing edge there; the opposite block emits its twin.
    """
    sub = ids[r0:r1, c0:c1]
    pad = np.pad(sub, 1, constant_values=0)
    centre = pad[1:-1, 1:-1]
    neighbours = {
        "top": pad[:-2, 1:-1],
        "bottom": pad[2:, 1:-1],
        "left": pad[1:-1, :-2],
        "right": pad[1:-1, 2:],
    }
    out = []
    for side, nb in neighbours.items():
        rr, cc = np.nonzero((centre > 0) & (centre != nb))
        if rr.size == 0:
            continue
        (ax, ay), (bx, by) = _SIDES[side]
        x, y = cc + c0, rr + r0
        out.append(np.stack([centre[rr, cc], x + ax, y + ay, x + bx, y + by], axis=1))
    if not out:
        return np.zeros((0, 5), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def _cancel_twins(edges: np.ndarray) -> np.ndarray:
    """Drop edge pairs (id, a->b) and (id, b->a); both are interior to the field."""
    if len(edges) == 0:
        return edges
    fwd = {tuple(e) for e in edges.tolist()}
    keep = [e for e in edges.tolist() if (e[0], e[3], e[4], e[1], e[2]) not in fwd]
    return np.array(keep, dtype=np.int64).reshape(-1, 5)


def _right_turn(d):
    return (-d[1], d[0])


def _trace_rings(edges: np.ndarray) -> list[list[tuple[int, int]]]:
    """Chain directed edges of one id into closed rings of grid vertices.

    Where two diagonal pixels of the field meet at a vertex, the walk turns
    right, keeping the field connected through the vertex; holes touching the
    exterior there become separate rings touching at a point.
    """
    out_edges: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for _, x0, y0, x1, y1 in edges.tolist():
        out_edges.setdefault((x0, y0), []).append((x1, y1))
    rings = []
    while out_edges:
        start = min(out_edges)
        first = min(out_edges[start])
        _take(out_edges, start, first)
        ring = [start]
        prev, cur = start, first
        while True:
            choices = list(out_edges.get(cur, ()))
            if cur == start:
                choices.append(first)
            if len(choices) == 1:
                step = choices[0]
            else:
                dx, dy = _right_turn((cur[0] - prev[0], cur[1] - prev[1]))
                step = (cur[0] + dx, cur[1] + dy)
                if step not in choices:
                    raise RuntimeError(f"ambiguous boundary walk at vertex {cur}")
            if cur == start and step == first:
                break
            _take(out_edges, cur, step)
            ring.append(cur)
            prev, cur = cur, step
        rings.append(_drop_collinear(ring))
    return rings


def _take(out_edges, vertex, step):
    nexts = out_edges[vertex]
    nexts.remove(step)
    if not nexts:
        del out_edges[vertex]


def _drop_collinear(ring):
    n = len(ring)
    keep = []
    for i in range(n):
        a, b, c = ring[i - 1], ring[i], ring[(i + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
            keep.append(b)
    i0 = min(range(len(keep)), key=lambda i: (keep[i][1], keep[i][0]))
    return keep[i0:] + keep[:i0]


def signed_area(ring: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise in a y-up frame. Ring may be closed."""
    r = np.asarray(ring, dtype=np.float64)
    if len(r) and np.array_equal(r[0], r[-1]):
        r = r[:-1]
    x, y = r[:, 0], r[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _close(ring: np.ndarray) -> np.ndarray:
    return np.vstack([ring, ring[:1]])


def simplify_ring(ring: np.ndarray, tol: float) -> np.ndarray:
    """Douglas-Peucker on an open ring (no repeated last vertex); tol <= 0 is a no-op."""
    if tol <= 0 or len(ring) <= 4:
        return ring
    pts = np.asarray(ring, dtype=np.float64)
    far = int(np.argmax(np.hypot(*(pts - pts[0]).T)))

    def dp(seg):
        if len(seg) <= 2:
            return seg
        a, b = seg[0], seg[-1]
        ab = b - a
        norm = np.hypot(*ab)
        d = np.abs(ab[0] * (seg[:, 1] - a[1]) - ab[1] * (seg[:, 0] - a[0]))
        d = d / norm if norm > 0 else np.hypot(*(seg - a).T)
        i = int(np.argmax(d))
        if d[i] <= tol:
            return np.vstack([a, b])
        return np.vstack([dp(seg[: i + 1])[:-1], dp(seg[i:])])

    first = dp(pts[: far + 1])
    second = dp(np.vstack([pts[far:], pts[:1]]))
    out = np.vstack([first[:-1], second[:-1]])
    return out if len(out) >= 3 else ring


def _make_instance(inst_id, rings_px, transform: GeoTransform, simplify_tol: float) -> FieldInstance:
    rings_px = [np.asarray(r, dtype=np.int64) for r in rings_px]
    areas_px = [signed_area(r) for r in rings_px]
    ext_i = int(np.argmax(np.abs(areas_px)))
    n_pixels = int(round(abs(areas_px[ext_i]) - sum(abs(a) for i, a in enumerate(areas_px) if i != ext_i)))
    map_rings = []
    for k, r in enumerate(rings_px):
        r = simplify_ring(r, simplify_tol)
        x, y = transform.to_map(r[:, 0], r[:, 1])
        m = np.stack([x, y], axis=1)
        a = signed_area(m)
        want_ccw = k == ext_i
        if (a > 0) != want_ccw:
            m = m[::-1]
            rings_px[k] = rings_px[k][::-1]
        map_rings.append(_close(m))
    exterior = map_rings[ext_i]
    holes = [m for k, m in enumerate(map_rings) if k != ext_i]
    area_m2 = abs(signed_area(exterior)) - sum(abs(signed_area(h)) for h in holes)
    return FieldInstance(
        id=int(inst_id),
        exterior=exterior,
        holes=holes,
        area_ha=area_m2 / 10_000.0,
        n_pixels=n_pixels,
        exterior_px=_close(rings_px[ext_i]),
        holes_px=[_close(r) for k, r in enumerate(rings_px) if k != ext_i],
    )


def polygonize(ids: InstanceIdMap, block: int = 4096, transform: GeoTransform | None = None,
               simplify_tol: float = 0.0, min_area_px: int = 0, workers: int = 1) -> list[FieldInstance]:
    """Trace pixel-edge polygons for every id, block by block, merged by id."""
    values = np.asarray(ids.values)
    transform = transform or ids.transform
    h, w = values.shape
    if block < 1:
        raise ValueError("block must be >= 1")
    blocks = [(r, min(r + block, h), c, min(c + block, w))
              for r in range(0, h, block) for c in range(0, w, block)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _block_edges(values, *b), blocks))
    else:
        parts = [_block_edges(values, *b) for b in blocks]
    edges = np.concatenate(parts) if parts else np.zeros((0, 5), dtype=np.int64)
    if len(blocks) > 1:
        edges = _cancel_twins(edges)
    if len(edges) == 0:
        return []
    edges = edges[np.argsort(edges[:, 0], kind="stable")]
    split = np.flatnonzero(np.diff(edges[:, 0])) + 1
    out = []
    for group in np.split(edges, split):
        inst = _make_instance(group[0, 0], _trace_rings(group), transform, simplify_tol)
        if inst.n_pixels >= min_area_px:
            out.append(inst)
    return out


def rasterize(instances, shape, transform: GeoTransform | None = None) -> np.ndarray:
    """Burn polygons onto a grid by even-odd tests at pixel centres.

    Rings are taken in map coordinates and converted with ``transform``. Later
    instances overwrite earlier ones where they overlap.
    """
    transform = transform or GeoTransform()
    h, w = shape
    out = np.zeros((h, w), dtype=np.int32)
    for inst in instances:
        rings = []
        for ring in inst.rings():
            col, row = transform.to_pixel(ring[:, 0], ring[:, 1])
            rings.append(np.stack([col, row], axis=1))
        allpts = np.concatenate(rings)
        r0 = max(int(np.floor(allpts[:, 1].min())), 0)
        r1 = min(int(np.ceil(allpts[:, 1].max())), h)
        c0 = max(int(np.floor(allpts[:, 0].min())), 0)
        c1 = min(int(np.ceil(allpts[:, 0].max())), w)
        if r1 <= r0 or c1 <= c0:
            continue
        py = np.arange(r0, r1, dtype=np.float64)[:, None] + 0.5
        px = np.arange(c0, c1, dtype=np.float64)[None, :] + 0.5
        inside = np.zeros((r1 - r0, c1 - c0), dtype=bool)
        for ring in rings:
            a, b = ring[:-1], ring[1:]
            for (x0, y0), (x1, y1) in zip(a, b):
                if y0 == y1:
                    continue
                spans = (y0 > py) != (y1 > py)
                xc = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
                inside ^= spans & (px < xc)
        out[r0:r1, c0:c1][inside] = inst.id
    return out


# -- confidence and statistics ----------------------------------------------------


def instance_confidence(p, pixels) -> float:
    """Mean interior-class probability over an instance's pixels (boolean mask)."""
    probs = p.values if isinstance(p, ProbMap) else np.asarray(p)
    pixels = np.asarray(pixels, dtype=bool)
    if not pixels.any():
        raise ValueError("instance has no pixels")
    return float(probs[INTERIOR][pixels].mean())


def instance_confidences(p, ids: InstanceIdMap) -> np.ndarray:
    """Vectorized :func:`instance_confidence` for ids 1..n; index 0 unused (nan)."""
    probs = p.values if isinstance(p, ProbMap) else np.asarray(p)
    flat = ids.values.ravel()
    sums = np.bincount(flat, weights=probs[INTERIOR].ravel(), minlength=ids.n + 1)
    counts = np.bincount(flat, minlength=ids.n + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = sums / counts
    conf[0] = np.nan
    return conf


@dataclass(frozen=True)
class FieldStats:
    field_count: int
    median_area_ha: float | None
    total_area_ha: float

    def to_dict(self) -> dict:
        return {
            "field_count": self.field_count,
            "median_area_ha": self.median_area_ha,
            "total_area_ha": self.total_area_ha,
        }


def field_stats(instances, transform: GeoTransform | None = None) -> FieldStats:
    """Count, lower median area and total area in hectares.

    With a ``transform`` the areas are recomputed from the pixel rings on that
    grid; otherwise the stored ``area_ha`` is used.
    """
    areas = []
    for inst in instances:
        if transform is not None and inst.exterior_px is not None:
            areas.append(inst.n_pixels * transform.pixel_area / 10_000.0)
        else:
            areas.append(inst.area_ha)
    if not areas:
        return FieldStats(0, None, 0.0)
    srt = sorted(areas)
    median = srt[(len(srt) - 1) // 2]
    return FieldStats(len(areas), float(median), float(sum(areas)))


class FieldExtractor(BaseEstimator, TransformerMixin):
    """Class map -> field polygons with confidences.

    ``transform`` accepts a :class:`LabelMask`, :class:`LogitMap` or
    :class:`ProbMap`. Confidences are only filled in when probabilities are
    available (logits are passed through softmax first).
    """

    def __init__(self, target_class=INTERIOR, block_size=4096, min_area_px=0,
                 simplify_tol=0.0, connectivity=4, workers=1):
        self.target_class = target_class
        self.block_size = block_size
        self.min_area_px = min_area_px
        self.simplify_tol = simplify_tol
        self.connectivity = connectivity
        self.workers = workers

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        prob = None
        if isinstance(X, LogitMap):
            prob = softmax(X)
        elif isinstance(X, ProbMap):
            prob = X
        mask = argmax_labels(prob) if prob is not None else X
        ids = connected_components(mask, self.target_class, self.connectivity)
        self.ids_ = ids
        instances = polygonize(ids, self.block_size, simplify_tol=self.simplify_tol,
                               min_area_px=self.min_area_px, workers=self.workers)
        if prob is not None:
            conf = instance_confidences(prob, ids)
            for inst in instances:
                inst.confidence = float(conf[inst.id])
        return instances
