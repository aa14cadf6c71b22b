"""GeoJSON FeatureCollection I/O for field polygons.

Feature properties follow the fiboa field attribute names: ``id``,
``confidence``, ``area_ha`` and ``determination_method``. The collection also
carries ``crs_id`` and ``geotransform`` members so a reader can rasterize the
polygons back onto the source grid.
"""

from __future__ import annotations

import json

import numpy as np

from .fsr import atomic_write_text
from .geo import GeoTransform
from .instances import FieldInstance

DETERMINATION_METHOD = "auto-imagery"


def _ring_coords(ring) -> list:
    return [[float(x), float(y)] for x, y in np.asarray(ring)]


def to_feature(inst: FieldInstance, method: str = DETERMINATION_METHOD) -> dict:
    conf = inst.confidence
    return {
        "type": "Feature",
        "id": int(inst.id),
        "geometry": {
            "type": "Polygon",
            "coordinates": [_ring_coords(r) for r in inst.rings()],
        },
        "properties": {
            "id": int(inst.id),
            "confidence": None if conf is None or np.isnan(conf) else float(conf),
            "area_ha": float(inst.area_ha),
            "determination_method": method,
        },
    }


def to_feature_collection(instances, transform: GeoTransform | None = None,
                          method: str = DETERMINATION_METHOD) -> dict:
    transform = transform or GeoTransform()
    return {
        "type": "FeatureCollection",
        "crs_id": transform.crs_id,
        "geotransform": transform.to_dict(),
        "features": [to_feature(i, method) for i in instances],
    }


def write_geojson(path, instances, transform: GeoTransform | None = None,
                  method: str = DETERMINATION_METHOD) -> None:
    fc = to_feature_collection(instances, transform, method)
    atomic_write_text(path, json.dumps(fc, indent=1))


def from_feature_collection(fc: dict) -> tuple[list[FieldInstance], GeoTransform]:
    if fc.get("type") != "FeatureCollection":
        raise ValueError("not a GeoJSON FeatureCollection")
    gt = fc.get("geotransform")
    transform = GeoTransform.from_dict(gt) if gt else GeoTransform(crs_id=fc.get("crs_id", "local"))
    out = []
    for k, feat in enumerate(fc.get("features", []), start=1):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ValueError(f"feature {k}: only Polygon geometries are supported")
        rings = [np.asarray(r, dtype=np.float64) for r in geom["coordinates"]]
        if not rings or any(r.ndim != 2 or r.shape[1] != 2 or len(r) < 4 for r in rings):
            raise ValueError(f"feature {k}: malformed polygon rings")
        props = feat.get("properties") or {}
        conf = props.get("confidence")
        out.append(FieldInstance(
            id=int(props.get("id", feat.get("id", k))),
            exterior=rings[0],
            holes=rings[1:],
            confidence=None if conf is None else float(conf),
            area_ha=float(props.get("area_ha", 0.0)),
        ))
    return out, transform


def read_geojson(path) -> tuple[list[FieldInstance], GeoTransform]:
    with open(path, encoding="utf-8") as fh:
        return from_feature_collection(json.load(fh))
