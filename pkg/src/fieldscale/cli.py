"""``fieldscale`` command line.

Exit codes: 0 success, 2 invalid arguments or inputs, 1 runtime failure.
Every subcommand accepts ``--json`` (machine-readable report on stdout),
``--report PATH`` (same report written to a file) and ``--config FILE``
(TOML; keys are flag names, either top-level or under a ``[<subcommand>]``
table). Flags given on the command line override the config file.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .adapter import ExecBackend, load_model
from .change import change_magnitude, change_mask
from .fsr import (
    atomic_write_text,
    read_band_stack,
    read_fsr,
    read_logits,
    read_mask,
    write_band_stack,
    write_fsr,
    write_logits,
    write_mask,
)
from .geo import (
    DEFAULT_REFERENCE,
    INTERIOR,
    GeoTransform,
    LabelMask,
    ProbMap,
    apply_normalization,
    argmax_labels,
    normalization_from_dict,
    softmax,
)
from .instances import FieldExtractor, connected_components, field_stats, polygonize, rasterize
from .losses import (
    KINDS,
    LossSpec,
    class_weights,
    finite_diff_check,
    loss_forward,
    tanimoto_complement_loss,
)
from .metrics import (
    InstanceSet,
    average_precision,
    instances_from_labels,
    macro_average,
    match_instances,
    object_prf_from_match,
    pixel_metrics,
)
from .mosaic import (
    EXCLUDED_SCL,
    Scene,
    SceneStack,
    SeasonWindow,
    harvest_doy,
    median_composite,
    planting_doy,
    prefilter_scenes,
    select_scenes_greedy,
)
from .report import MetricReport, RunConfig, accuracy_csv, robustness_csv
from .rng import SplitMix64
from .robustness import (
    ConsistencySpec,
    brightness_sensitivity,
    consistency,
    consistency_sweep,
    input_order_sensitivity,
    object_f1_metric,
    pixel_iou_metric,
    preprocessing_sensitivity,
    scale_sensitivity,
)
from .synth import generate_world
from .tiler import TilingSpec, run_tiled
from .vector import read_geojson, write_geojson

WORKERS_ENV = "FIELDSCALE_WORKERS"
_COMMON = {"json", "report", "config", "command", "func", "workers_resolved"}


class UsageError(ValueError):
    """Invalid arguments or inputs; mapped to exit code 2."""


# -- small helpers -------------------------------------------------------------------


def _workers(value) -> int:
    if value is None:
        value = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"worker count must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"worker count must be >= 1, got {n}")
    return n


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _normalization(text):
    """Inline JSON or a path to a JSON file holding a normalization spec."""
    if text is None:
        return DEFAULT_REFERENCE
    raw = text
    if not text.lstrip().startswith("{"):
        raw = Path(text).read_text(encoding="utf-8")
    return normalization_from_dict(json.loads(raw))


def _params(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in _COMMON:
            continue
        out[k] = v if v is None or isinstance(v, (bool, int, float, str, list)) else str(v)
    return out


def _finish(args, results: dict, text: str, wall=None, throughput=None, outputs=None) -> int:
    config = RunConfig(args.command, _params(args), outputs=outputs or {},
                       workers=getattr(args, "workers_resolved", 1), seed=getattr(args, "seed", None))
    report = MetricReport(config, results, wall, throughput)
    payload = report.to_json()
    if args.report:
        atomic_write_text(args.report, payload + "\n")
    if args.json:
        print(payload)
    elif text:
        print(text)
    return 0


def _fmt(v, nd=4):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{nd}f}"
    return str(v)


# -- subcommands ------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.pixel_size <= 0:
        raise UsageError("pixel size must be > 0")
    transform = GeoTransform(0.0, args.height * args.pixel_size, args.pixel_size, -args.pixel_size)
    world = generate_world(args.seed, args.height, args.width, args.n_fields,
                           args.background_fraction, transform)
    out = Path(args.out)
    image = write_band_stack(out / "image", world.image, meta={"seed": args.seed})
    gt = write_mask(out / "gt_mask", world.gt_mask, meta={"seed": args.seed})
    write_geojson(out / "gt.geojson", world.gt_instances, transform)
    results = {
        "n_fields": args.n_fields,
        "n_interior_components": world.n_interior_components,
        "class_fractions": {
            name: float((world.gt_mask.values == k).mean())
            for k, name in enumerate(("background", "interior", "boundary"))
        },
    }
    outputs = {"image": image, "gt_mask": gt, "gt_geojson": out / "gt.geojson"}
    text = (f"world seed={args.seed} {args.height}x{args.width}: "
            f"{world.n_interior_components} fields -> {out}")
    return _finish(args, results, text, outputs=outputs)


def cmd_stitch(args) -> int:
    x = read_band_stack(args.input)
    workers = args.workers_resolved
    spec = TilingSpec(args.patch_size, args.overlap)
    model = load_model(args.model, x.n_frames * x.n_bands)
    xn = apply_normalization(x, _normalization(args.normalization))
    try:
        logits, stats = run_tiled(model, xn, spec, sigma=args.sigma, workers=workers, return_stats=True)
    finally:
        if isinstance(model, ExecBackend):
            model.close()
    stem = write_logits(args.out, logits, meta={"model": args.model})
    thr = stats.throughput_km2_s
    results = {"n_patches": stats.n_patches, "area_km2": stats.area_km2}
    text = (f"{stats.n_patches} patches, {stats.area_km2:.4f} km2 in {stats.wall_seconds:.3f} s "
            f"({_fmt(thr, 2)} km2/s) -> {stem}")
    return _finish(args, results, text, stats.wall_seconds, thr, {"logits": stem})


def _read_class_map(path):
    r = read_fsr(path)
    if r.axes == "CHW":
        return read_logits(path)
    if r.axes == "HW":
        return read_mask(path)
    raise UsageError(f"{path}: expected a CHW logit/probability or HW mask raster, got {r.axes}")


def cmd_extract(args) -> int:
    src = _read_class_map(args.input)
    if args.block_size < 1:
        raise UsageError("block size must be >= 1")
    ext = FieldExtractor(block_size=args.block_size, min_area_px=args.min_area_px,
                         simplify_tol=args.simplify_tol, connectivity=args.connectivity,
                         workers=args.workers_resolved)
    instances = ext.transform(src)
    write_geojson(args.out, instances, src.transform)
    stats = field_stats(instances)
    results = {"field_stats": stats.to_dict()}
    text = f"{stats.field_count} fields, median {_fmt(stats.median_area_ha, 3)} ha -> {args.out}"
    return _finish(args, results, text, outputs={"geojson": args.out})


def _prediction(path, shape, transform):
    """Label map plus instance set from a GeoJSON or a CHW raster."""
    if str(path).endswith((".geojson", ".json")) and not Path(str(path)).with_suffix(".bin").exists():
        instances, t = read_geojson(path)
        ids = rasterize(instances, shape, t)
        label = np.where(ids > 0, INTERIOR, 0).astype(np.uint8)
        return label, InstanceSet.from_instances(instances, shape, t)
    src = _read_class_map(path)
    if src.shape != shape:
        raise UsageError(f"prediction {src.shape} and ground truth {shape} differ in shape")
    if isinstance(src, LabelMask):
        return src.values, instances_from_labels(src)
    prob = src if isinstance(src, ProbMap) else softmax(src)
    label = argmax_labels(prob)
    return label.values, instances_from_labels(label, prob.values)


def _evaluate_one(pred_path, gt_path, args) -> dict:
    gt = read_mask(gt_path)
    label, preds = _prediction(pred_path, gt.shape, gt.transform)
    pix = pixel_metrics(label, gt, mean_iou=args.mean_iou)
    gts = instances_from_labels(gt)
    keep = [k for k in range(1, preds.n + 1) if preds.confidence(k) >= args.conf_thresh]
    m = match_instances(preds, gts, args.iou_thresh, args.matching, keep=keep)
    obj = object_prf_from_match(m, gts.n)
    ap = average_precision(preds, gts)
    return {"pixel": pix.to_dict(), "object": obj.to_dict(), "ap": ap.to_dict()}


def _accuracy_row(res: dict, throughput) -> dict:
    return {
        "iou": res["pixel"]["iou"], "precision": res["pixel"]["precision"],
        "recall": res["pixel"]["recall"], "obj_precision": res["object"]["precision"],
        "obj_recall": res["object"]["recall"], "obj_f1": res["object"]["f1"],
        "ap50_95": res["ap"]["ap50_95"], "ap50": res["ap"]["ap50"],
        "throughput_km2_s": throughput,
    }


def cmd_evaluate(args) -> int:
    preds, gts = args.pred, args.gt
    if len(preds) != len(gts):
        raise UsageError("give one --pred per --gt")
    names = args.region or [f"region{i}" for i in range(len(gts))]
    if len(names) != len(gts):
        raise UsageError("give one --region name per --gt")
    throughput = None
    if args.throughput_from:
        throughput = json.loads(Path(args.throughput_from).read_text()).get("throughput_km2_s")
    per_region = {n: _evaluate_one(p, g, args) for n, p, g in zip(names, preds, gts)}
    results = {"regions": per_region}
    if len(per_region) == 1:
        row = _accuracy_row(next(iter(per_region.values())), throughput)
    else:
        macro = macro_average(per_region)
        results["macro"] = macro
        flat = {k: v["mean"] for k, v in macro.items()}
        row = _accuracy_row({
            "pixel": {k: flat.get(f"pixel.{k}") for k in ("iou", "precision", "recall")},
            "object": {k: flat.get(f"object.{k}") for k in ("precision", "recall", "f1")},
            "ap": {k: flat.get(f"ap.{k}") for k in ("ap50_95", "ap50")},
        }, throughput)
    results["accuracy"] = row
    if args.csv:
        atomic_write_text(args.csv, accuracy_csv([dict(row, name="fieldscale")]))
    text = (f"pixel IoU {_fmt(row['iou'])}  P {_fmt(row['precision'])}  R {_fmt(row['recall'])}  "
            f"obj P {_fmt(row['obj_precision'])}  obj R {_fmt(row['obj_recall'])}  "
            f"F1 {_fmt(row['obj_f1'])}  AP50:95 {_fmt(row['ap50_95'])}  AP50 {_fmt(row['ap50'])}")
    return _finish(args, results, text, throughput=throughput)


def _robustness_dataset(args):
    if args.input:
        if len(args.input) != len(args.gt or []):
            raise UsageError("give one --gt per --input")
        return [(read_band_stack(i), read_mask(g)) for i, g in zip(args.input, args.gt)]
    size = args.patch_size
    return [generate_world(s, size, size, args.n_fields) for s in range(args.seed, args.seed + args.n_worlds)]


def cmd_robustness(args) -> int:
    data = _robustness_dataset(args)
    samples = [(w.image, w.gt_mask) if hasattr(w, "image") else w for w in data]
    model = load_model(args.model, samples[0][0].n_frames * samples[0][0].n_bands)
    try:
        ref = _normalization(args.normalization)
        cspec = ConsistencySpec(args.patch_size, args.crop_size)
        agree = [consistency(model, x, cspec, ref) for x, _ in samples]
        sweep = {}
        if args.overlaps:
            sweep = consistency_sweep(model, samples, _ints(args.overlaps), args.patch_size, ref)
        order = input_order_sensitivity(model, samples, args.metric, reference=ref)
        prep = preprocessing_sensitivity(model, samples, ref, metric=args.metric)
        bright = brightness_sensitivity(model, samples, _floats(args.brightness), args.metric, ref)
        scale = scale_sensitivity(model, samples, _floats(args.scale_factors), args.metric, ref)
        f1s, ious = [], []
        for x, y in samples:
            logits = model.predict(apply_normalization(x, ref).channels())
            f1s.append(object_f1_metric(logits, y))
            ious.append(pixel_iou_metric(logits, y))
    finally:
        if isinstance(model, ExecBackend):
            model.close()

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    row = {
        "object_f1": mean(f1s), "pixel_iou": mean(ious),
        "input_order_delta": order.delta, "preprocessing_delta": prep.delta,
        "brightness_delta": bright.delta, "scale_delta": scale.delta,
        "agreement_avg": mean(agree),
    }
    results = {
        "summary": row,
        "consistency": {"patch_size": args.patch_size, "crop_size": args.crop_size,
                        "per_sample": agree, "sweep": {str(k): v for k, v in sweep.items()},
                        "sweep_mean": mean(sweep.values()) if sweep else None},
        "input_order": order.to_dict(), "preprocessing": prep.to_dict(),
        "brightness": bright.to_dict(), "scale": scale.to_dict(),
    }
    if args.csv:
        atomic_write_text(args.csv, robustness_csv([dict(row, name=args.model)]))
    text = "  ".join(f"{k} {_fmt(v)}" for k, v in row.items())
    return _finish(args, results, text)


def cmd_seasons(args) -> int:
    p, h = planting_doy(args.lat), harvest_doy(args.lat)
    results = {"latitude": args.lat, "planting": list(p.as_tuple()), "harvest": list(h.as_tuple())}
    text = f"planting {p.as_tuple()}\nharvest {h.as_tuple()}"
    return _finish(args, results, text)


def _doy(timestamp: str) -> int:
    try:
        return dt.date.fromisoformat(timestamp[:10]).timetuple().tm_yday
    except ValueError:
        raise UsageError(f"scene timestamp {timestamp!r} is not an ISO date") from None


def load_scene_dir(path) -> SceneStack:
    """Scenes are BHW rasters with ``timestamp``/``cloud_cover_pct`` meta and a ``<stem>_scl`` HW raster."""
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    scenes = []
    for header in sorted(root.glob("*.json")):
        stem = header.with_suffix("")
        if stem.name.endswith("_scl"):
            continue
        r = read_fsr(stem)
        if r.axes != "BHW":
            continue
        scl_stem = stem.with_name(stem.name + "_scl")
        if not scl_stem.with_suffix(".json").exists():
            raise UsageError(f"scene {stem.name} has no {scl_stem.name} raster")
        scl = read_fsr(scl_stem)
        valid = None
        if r.nodata is not None:
            valid = ~(r.data == r.nodata).all(axis=0)
        meta = r.meta
        if "timestamp" not in meta or "cloud_cover_pct" not in meta:
            raise UsageError(f"scene {stem.name} lacks timestamp/cloud_cover_pct meta")
        scenes.append(Scene(str(meta["timestamp"]), float(meta["cloud_cover_pct"]), r.data,
                            scl.data.astype(np.int64), valid, r.transform))
    if not scenes:
        raise UsageError(f"no scene rasters in {root}")
    scenes.sort(key=lambda s: s.timestamp)
    return SceneStack(scenes)


def cmd_select_scenes(args) -> int:
    stack = load_scene_dir(args.scenes)
    window = None
    if args.season:
        if args.lat is None:
            raise UsageError("--season needs --lat")
        window = (planting_doy if args.season == "planting" else harvest_doy)(args.lat)
    elif args.window:
        a, b = _ints(args.window)
        window = SeasonWindow(a, b)
    if window is not None:
        stack = SceneStack([s for s in stack.scenes if window.contains(_doy(s.timestamp))])
    excluded = set(_ints(args.excluded_scl)) if args.excluded_scl else EXCLUDED_SCL
    filtered = prefilter_scenes(stack, args.max_cloud, excluded)
    results = {"window": None if window is None else list(window.as_tuple()),
               "n_scenes": len(stack), "n_after_prefilter": len(filtered)}
    if len(filtered) == 0:
        raise UsageError("no scene survives prefiltering")
    sel = select_scenes_greedy(filtered.valid, args.target_coverage, args.max_scenes,
                               return_details=True)
    comp = median_composite(filtered, sel.indices, args.nodata)
    timestamps = comp.selected_timestamps
    results.update({"selected": timestamps, "gains": sel.gains,
                    "min_coverage": int(comp.observation_count.min())})
    outputs = {}
    if args.out:
        transform = filtered.scenes[0].transform
        stem = write_fsr(args.out, comp.median.astype(np.float32), "BHW", transform,
                         nodata=args.nodata, meta={"selected_timestamps": timestamps})
        cstem = write_fsr(Path(str(stem) + "_count"), comp.observation_count, "HW", transform)
        outputs = {"composite": stem, "count": cstem}
    text = "selected " + (", ".join(timestamps) if timestamps else "(none)")
    return _finish(args, results, text, outputs=outputs)


def cmd_change(args) -> int:
    y1, y2 = read_logits(args.y1), read_logits(args.y2)
    if y1.transform != y2.transform:
        raise UsageError("the two years have different geotransforms")
    mag = change_magnitude(y1, y2, args.cls)
    cm = change_mask(mag, args.thresh, transform=y1.transform)
    outputs = {}
    n_poly = None
    if args.out:
        outputs["mask"] = write_mask(args.out, cm.mask.astype(np.uint8), y1.transform,
                                     meta={"threshold": args.thresh})
    if args.geojson:
        ids = connected_components(cm.mask.astype(np.uint8), target_class=1)
        polys = polygonize(ids, transform=y1.transform)
        write_geojson(args.geojson, polys, y1.transform, method="auto-change")
        outputs["geojson"] = args.geojson
        n_poly = len(polys)
    results = {"threshold": args.thresh, "changed_pixels": int(cm.mask.sum()),
               "changed_fraction": float(cm.mask.mean()), "n_polygons": n_poly}
    text = f"{results['changed_pixels']} changed pixels ({results['changed_fraction']:.4f})"
    return _finish(args, results, text, outputs=outputs)


def loss_check_suite(seeds=10, h=1e-3, tol=1e-4, shape=(3, 8, 8)) -> list[dict]:
    """Finite-difference and identity checks for every loss."""
    rows = []
    c, hh, ww = shape
    inputs = []
    for seed in range(seeds):
        rng = SplitMix64(seed)
        z = rng.normal(c * hh * ww).reshape(shape)
        t = rng.integers(0, c, hh * ww).reshape(hh, ww).astype(np.uint8)
        inputs.append((z, t))
    for kind in KINDS:
        worst = max(finite_diff_check(LossSpec(kind), z, t, h) for z, t in inputs)
        rows.append({"check": f"grad:{kind}", "value": worst, "tol": tol, "pass": bool(worst <= tol)})

    def ident(name, a, b):
        d = max(abs(loss_forward(a, z, t) - loss_forward(b, z, t)) for z, t in inputs)
        rows.append({"check": name, "value": d, "tol": 1e-9, "pass": bool(d <= 1e-9)})

    ident("focal(0)=ce", LossSpec("focal", gamma=0.0), LossSpec("ce"))
    ident("tversky(.5,.5)=dice", LossSpec("tversky", alpha=0.5, beta=0.5), LossSpec("dice"))
    d = max(abs(loss_forward(LossSpec("ftnmt", depth=1), z, t) - tanimoto_complement_loss(z, t))
            for z, t in inputs)
    rows.append({"check": "ftnmt(1)=tanimoto", "value": d, "tol": 1e-9, "pass": bool(d <= 1e-9)})
    w = class_weights(0.75).tolist()
    rows.append({"check": "class_weights(0.75)", "value": w, "tol": 0.0,
                 "pass": w == [0.05, 0.20, 0.75]})
    return rows


def cmd_loss_check(args) -> int:
    rows = loss_check_suite(args.seeds, args.h, args.tol)
    ok = all(r["pass"] for r in rows)
    lines = [f"{'check':<24}{'value':>14}  result"]
    for r in rows:
        v = r["value"]
        vs = f"{v:.3e}" if isinstance(v, float) else str(v)
        lines.append(f"{r['check']:<24}{vs:>14}  {'PASS' if r['pass'] else 'FAIL'}")
    _finish(args, {"checks": rows, "all_pass": ok}, "\n".join(lines))
    return 0 if ok else 1


def cmd_stats(args) -> int:
    instances, _ = read_geojson(args.input)
    st = field_stats(instances)
    results = st.to_dict()
    text = (f"fields {st.field_count}  median {_fmt(st.median_area_ha, 3)} ha  "
            f"total {st.total_area_ha:.3f} ha")
    return _finish(args, results, text)


# -- parser ------------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    ap = argparse.ArgumentParser(prog="fieldscale", description="Field-boundary mapping engine.")
    ap.add_argument("--version", action="version", version=f"fieldscale {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--json", action="store_true", help="print the JSON report on stdout")
        p.add_argument("--report", help="also write the JSON report to this path")
        p.add_argument("--config", help="TOML file with defaults for this command")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    def workers(p):
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker threads (default ${WORKERS_ENV} or 1)")

    p = add("synth", cmd_synth, "generate a synthetic field world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--n-fields", type=int, default=8)
    p.add_argument("--background-fraction", type=float, default=0.0)
    p.add_argument("--pixel-size", type=float, default=10.0)
    p.add_argument("--out", required=True, help="output directory")

    p = add("stitch", cmd_stitch, "tiled inference with Gaussian-weighted stitching")
    p.add_argument("--input", required=True, help="TBHW band stack (.fsr)")
    p.add_argument("--out", required=True, help="output CHW logit raster (.fsr)")
    p.add_argument("--model", default="oracle", help="oracle | stub:<mode>[:k=..] | constant:a,b,c | exec:<cmd>")
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--overlap", type=float, default=0.25)
    p.add_argument("--sigma", type=float, default=None, help="kernel sigma (default patch/4)")
    p.add_argument("--normalization", default=None, help="normalization JSON (inline or file)")
    workers(p)

    p = add("extract", cmd_extract, "field polygons from a logit, probability or label raster")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output GeoJSON")
    p.add_argument("--block-size", type=int, default=4096)
    p.add_argument("--min-area-px", type=int, default=0)
    p.add_argument("--simplify-tol", type=float, default=0.0)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=4)
    workers(p)

    p = add("evaluate", cmd_evaluate, "pixel, object and AP metrics against ground truth")
    p.add_argument("--pred", action="append", required=True, help="GeoJSON or CHW/HW raster; repeatable")
    p.add_argument("--gt", action="append", required=True, help="HW ground-truth mask; repeatable")
    p.add_argument("--region", action="append", help="region name per --gt (macro-averaged)")
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--conf-thresh", type=float, default=0.5)
    p.add_argument("--matching", choices=("greedy", "optimal"), default="greedy")
    p.add_argument("--mean-iou", action="store_true", help="3-class mean instead of interior IoU")
    p.add_argument("--throughput-from", help="stitch report JSON to take throughput from")
    p.add_argument("--csv", help="write the accuracy summary as a CSV row here")

    p = add("robustness", cmd_robustness, "consistency and sensitivity metrics")
    p.add_argument("--model", default="oracle")
    p.add_argument("--input", action="append", help="TBHW band stack of side --patch-size; repeatable")
    p.add_argument("--gt", action="append", help="HW mask per --input")
    p.add_argument("--seed", type=int, default=0, help="first synthetic world seed")
    p.add_argument("--n-worlds", type=int, default=4)
    p.add_argument("--n-fields", type=int, default=8)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--crop-size", type=int, default=192)
    p.add_argument("--overlaps", default=None, help="comma-separated overlap sides for a sweep")
    p.add_argument("--metric", choices=("iou", "f1"), default="iou")
    p.add_argument("--brightness", default="0.8,1.2")
    p.add_argument("--scale-factors", default="0.5,2.0")
    p.add_argument("--normalization", default=None)
    p.add_argument("--csv", help="write the robustness summary as a CSV row here")

    p = add("seasons", cmd_seasons, "planting and harvest day-of-year windows for a latitude")
    p.add_argument("--lat", type=float, required=True)

    p = add("select-scenes", cmd_select_scenes, "greedy scene selection and median composite")
    p.add_argument("--scenes", required=True, help="directory of BHW scene rasters")
    p.add_argument("--target-coverage", type=int, default=5)
    p.add_argument("--max-scenes", type=int, default=10)
    p.add_argument("--max-cloud", type=float, default=75.0)
    p.add_argument("--excluded-scl", default=None, help="comma-separated SCL codes")
    p.add_argument("--lat", type=float, default=None)
    p.add_argument("--season", choices=("planting", "harvest"), default=None)
    p.add_argument("--window", default=None, help="start,end day of year")
    p.add_argument("--nodata", type=float, default=0.0)
    p.add_argument("--out", default=None, help="composite raster (.fsr); count goes to <out>_count")

    p = add("change", cmd_change, "change mask between two years of logits")
    p.add_argument("--y1", required=True)
    p.add_argument("--y2", required=True)
    p.add_argument("--thresh", type=float, default=0.5)
    p.add_argument("--cls", type=int, default=INTERIOR)
    p.add_argument("--out", default=None, help="mask raster (.fsr)")
    p.add_argument("--geojson", default=None, help="change polygons")

    p = add("loss-check", cmd_loss_check, "finite-difference check of every loss")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)

    p = add("stats", cmd_stats, "field count and area statistics of a GeoJSON")
    p.add_argument("--input", required=True)
    return ap, subs


def _apply_config(parser, subs, argv):
    # find --config before the full parse so required flags may come from it
    command = argv[0] if argv and argv[0] in subs else None
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv[1:] if command else [])
    if not known.config:
        return parser.parse_args(argv)
    with open(known.config, "rb") as fh:
        cfg = tomli.load(fh)
    section = dict(cfg.get(command, {}))
    section.update({k: v for k, v in cfg.items() if not isinstance(v, dict)})
    sp = subs[command]
    dests = {a.dest for a in sp._actions} - _COMMON - {"help"}
    values = {}
    for key, value in section.items():
        dest = key.replace("-", "_")
        if dest not in dests:
            raise UsageError(f"unknown config key {key!r} for {command}")
        values[dest] = value
    sp.set_defaults(**values)
    # required flags may now come from the config file
    for action in sp._actions:
        if action.dest in values:
            action.required = False
    return parser.parse_args(argv)


def run(argv=None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        try:
            args = _apply_config(parser, subs, argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        if hasattr(args, "workers"):
            args.workers_resolved = _workers(args.workers)
        else:
            args.workers_resolved = 1
        return args.func(args)
    except (UsageError, ValueError, TypeError, KeyError, FileNotFoundError, tomli.TOMLDecodeError) as exc:
        print(f"fieldscale: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure
        print(f"fieldscale: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
