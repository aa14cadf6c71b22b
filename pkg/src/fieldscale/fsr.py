"""The ``.fsr`` raster container: ``<name>.bin`` + ``<name>.json``.

The binary file is the raw little-endian array in C (row-major) order. The JSON
sidecar carries::

    {"format": "fsr", "version": 1, "dtype": "float32", "shape": [2, 4, 64, 64],
     "axes": "TBHW", "geotransform": {...}, "nodata": null, "meta": {...}}

Axes are one of ``TBHW`` (band stacks), ``THW`` (validity), ``CHW`` (logits,
probabilities), ``BHW`` (scenes, composites) and ``HW`` (masks).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geo import BandStack, GeoTransform, LabelMask, LogitMap, ProbMap

FORMAT_VERSION = 1
_DTYPES = {"uint8", "uint16", "int32", "int64", "float32", "float64", "bool"}


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the destination directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".bin", ".json", ".fsr"):
        return path.with_suffix("")
    return path


@dataclass
class FsrRaster:
    data: np.ndarray
    axes: str
    transform: GeoTransform = field(default_factory=GeoTransform)
    nodata: float | None = None
    meta: dict = field(default_factory=dict)


def write_fsr(path, data, axes: str, transform: GeoTransform | None = None,
              nodata=None, meta: dict | None = None) -> Path:
    data = np.asarray(data)
    if len(axes) != data.ndim:
        raise ValueError(f"axes {axes!r} do not match array of ndim {data.ndim}")
    dtype = data.dtype.name
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype}")
    stem = _stem(path)
    header = {
        "format": "fsr",
        "version": FORMAT_VERSION,
        "dtype": dtype,
        "shape": list(data.shape),
        "axes": axes,
        "geotransform": (transform or GeoTransform()).to_dict(),
        "nodata": nodata,
        "meta": meta or {},
    }
    payload = np.ascontiguousarray(data.astype(data.dtype.newbyteorder("<"), copy=False))
    atomic_write_bytes(stem.with_suffix(".bin"), payload.tobytes())
    # the sidecar goes last so a readable header implies a complete payload
    atomic_write_text(stem.with_suffix(".json"), json.dumps(header, indent=2, sort_keys=True))
    return stem


def read_fsr(path) -> FsrRaster:
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    if header.get("format") != "fsr":
        raise ValueError(f"{stem}.json is not an fsr header")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported fsr version {header.get('version')}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    shape = tuple(header["shape"])
    raw = stem.with_suffix(".bin").read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{stem}.bin has {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return FsrRaster(
        data=data,
        axes=header["axes"],
        transform=GeoTransform.from_dict(header["geotransform"]),
        nodata=header.get("nodata"),
        meta=header.get("meta", {}),
    )


# -- typed helpers ---------------------------------------------------------------


def write_band_stack(path, x: BandStack, meta: dict | None = None) -> Path:
    stem = write_fsr(path, x.values.astype(np.float32), "TBHW", x.transform,
                     nodata=x.fill_value, meta=meta)
    if not x.valid.all():
        write_fsr(stem.with_name(stem.name + "_valid"), x.valid.astype(np.uint8), "THW", x.transform)
    return stem


def read_band_stack(path) -> BandStack:
    r = read_fsr(path)
    if r.axes != "TBHW":
        raise ValueError(f"expected TBHW raster, got {r.axes}")
    stem = _stem(path)
    valid_stem = stem.with_name(stem.name + "_valid")
    valid = None
    if valid_stem.with_suffix(".json").exists():
        valid = read_fsr(valid_stem).data.astype(bool)
    fill = 0.0 if r.nodata is None else float(r.nodata)
    return BandStack(r.data.astype(np.float64), valid, r.transform, fill)


def write_logits(path, y: LogitMap | ProbMap, meta: dict | None = None) -> Path:
    kind = "prob" if isinstance(y, ProbMap) else "logit"
    m = {"kind": kind}
    m.update(meta or {})
    return write_fsr(path, y.values.astype(np.float32), "CHW", y.transform, meta=m)


def read_logits(path) -> LogitMap | ProbMap:
    r = read_fsr(path)
    if r.axes != "CHW":
        raise ValueError(f"expected CHW raster, got {r.axes}")
    if r.meta.get("kind") == "prob":
        v = r.data.astype(np.float64)
        return ProbMap(v / v.sum(axis=0, keepdims=True), r.transform)
    return LogitMap(r.data.astype(np.float64), r.transform)


def write_mask(path, mask: LabelMask | np.ndarray, transform: GeoTransform | None = None,
               meta: dict | None = None) -> Path:
    if isinstance(mask, LabelMask):
        values, transform = mask.values, mask.transform
    else:
        values = np.asarray(mask).astype(np.uint8)
    return write_fsr(path, values, "HW", transform, nodata=255, meta=meta)


def read_mask(path) -> LabelMask:
    r = read_fsr(path)
    if r.axes != "HW":
        raise ValueError(f"expected HW raster, got {r.axes}")
    return LabelMask(r.data, r.transform)
