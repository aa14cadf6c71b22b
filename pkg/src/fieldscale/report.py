"""Run configuration, JSON metric reports, CSV rows and throughput accounting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from ._version import __version__
from .geo import GeoTransform

SCHEMA_VERSION = 1

ACCURACY_COLUMNS = (
    "iou", "precision", "recall", "obj_precision", "obj_recall", "obj_f1",
    "ap50_95", "ap50", "throughput_km2_s",
)
ROBUSTNESS_COLUMNS = (
    "object_f1", "pixel_iou", "input_order_delta", "preprocessing_delta",
    "brightness_delta", "scale_delta", "agreement_avg",
)


def area_km2(n_pixels: int, transform: GeoTransform | None = None) -> float:
    """Ground area of ``n_pixels`` pixels; 10 m pixels give 1e-4 km2 each."""
    return (transform or GeoTransform()).pixel_area * n_pixels / 1e6


def measure_throughput(area_km2: float, wall_seconds: float) -> float:
    """km2 processed per second of wall-clock time."""
    if not wall_seconds > 0:
        raise ValueError(f"wall time must be > 0, got {wall_seconds}")
    if area_km2 < 0:
        raise ValueError("area must be >= 0")
    return float(area_km2) / float(wall_seconds)


@dataclass
class RunConfig:
    subcommand: str
    params: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    workers: int = 1
    seed: int | None = None

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "params": dict(self.params),
            "inputs": {k: str(v) for k, v in self.inputs.items()},
            "outputs": {k: str(v) for k, v in self.outputs.items()},
            "workers": self.workers,
            "seed": self.seed,
        }


@dataclass
class MetricReport:
    config: RunConfig
    results: dict = field(default_factory=dict)
    wall_seconds: float | None = None
    throughput_km2_s: float | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "engine_version": __version__,
            "config": self.config.to_dict(),
            "results": self.results,
            "wall_seconds": self.wall_seconds,
            "throughput_km2_s": self.throughput_km2_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def csv_rows(rows, columns, label_column: str | None = None) -> str:
    """CSV text with a header; missing values are blank."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ([label_column] if label_column else []) + list(columns)
    writer.writerow(header)
    for row in rows:
        lead = [row.get(label_column, "")] if label_column else []
        writer.writerow(lead + [_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def accuracy_csv(rows, label_column: str | None = "name") -> str:
    return csv_rows(rows, ACCURACY_COLUMNS, label_column)


def robustness_csv(rows, label_column: str | None = "name") -> str:
    return csv_rows(rows, ROBUSTNESS_COLUMNS, label_column)
