"""``weakgeo`` command line: synth -> fit -> eval pipelines and label tools.

Exit codes: 0 success, 1 I/O error (missing/unreadable/malformed input
file), 2 configuration error, 3 numerical failure.

Option precedence: command-line flags, then the ``--config`` JSON file,
then built-in defaults. ``WEAKGEO_SEED`` replaces the built-in default seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import kitti_io
from .errors import (
    AllStartsDiverged,
    DegenerateHeading,
    MalformedCalib,
    MalformedLabel,
    NoLabels,
    NonPositiveDepth,
    UnprojectableTarget,
    WeakGeoError,
)
from .fitter import FitConfig, depth_sweep, fit
from .geometry import Box2D, Box3D, RigidTransform, project_box_to_aabb, transform_box
from .labels import TargetLabel, frame_from_json, recover_direction, validate_direction_label
from .losses import LossWeights
from .metrics import summarize
from .scene_synth import SceneBundle, SceneSpec, direction_label_for, dumps_scene, generate, loads_scene

RESULTS_SCHEMA = 1
EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# Small helpers


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror or exc}") from None


def _read_json(path):
    text = _read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _load_config(path, allowed: set) -> dict:
    if path is None:
        return {}
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return doc


def _merge(config: dict, flags: dict) -> dict:
    out = dict(config)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _default_seed() -> int:
    raw = os.environ.get("WEAKGEO_SEED")
    if raw is None or raw == "":
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"WEAKGEO_SEED must be an integer, got {raw!r}") from None
    if seed < 0:
        raise ConfigError("WEAKGEO_SEED must be non-negative")
    return seed


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1) + "\n"


def _load_scene(path) -> SceneBundle:
    text = _read_text(path)
    try:
        return loads_scene(text)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: not a scene document ({exc})") from None


def _box_to_dict(b: Box3D) -> dict:
    return {"center": [float(v) for v in b.center], "dims": [float(v) for v in b.dims], "yaw": float(b.yaw)}


def _box_from_dict(d) -> Box3D:
    return Box3D(tuple(d["center"]), tuple(d["dims"]), d["yaw"])


# ---------------------------------------------------------------------------
# Config parsing shared by fit / sweep

_SCENE_KEYS = {f.name for f in fields(SceneSpec)} - {"intrinsics"}
_FIT_KEYS = {f.name for f in fields(FitConfig)}


def _weights_and_fit(args) -> tuple[LossWeights, FitConfig]:
    cfg = _load_config(args.config, {"weights", "fit"})
    wdoc = cfg.get("weights", {})
    fdoc = cfg.get("fit", {})
    if not isinstance(wdoc, dict) or not isinstance(fdoc, dict):
        raise ConfigError("'weights' and 'fit' config sections must be objects")
    unknown = set(fdoc) - _FIT_KEYS
    if unknown:
        raise ConfigError(f"unknown fit config keys: {', '.join(sorted(unknown))}")
    wflags = {"lambda_l1": args.lambda_l1, "gamma_px": args.gamma, "w_proj": args.w_proj,
              "w_con": args.w_con, "w_rot": args.w_rot}
    fflags = {"max_iters": args.max_iters, "n_starts": args.n_starts,
              "fix_dims": True if args.fix_dims else None}
    try:
        weights = LossWeights.from_dict(_merge(wdoc, wflags))
        fdict = _merge(fdoc, fflags)
        for key in ("depth_range", "dims_prior"):
            if key in fdict:
                fdict[key] = tuple(fdict[key])
        fitcfg = FitConfig(**fdict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return weights, fitcfg


def _add_weight_flags(p):
    g = p.add_argument_group("loss weights (defaults: lambda_l1 0.05, gamma 8 px, all weights 1)")
    g.add_argument("--lambda-l1", type=float, help="SmoothL1 balance against GIoU")
    g.add_argument("--gamma", type=float, help="SmoothL1 soft margin in pixels")
    g.add_argument("--w-proj", type=float, help="projection loss weight")
    g.add_argument("--w-con", type=float, help="multi-view loss weight")
    g.add_argument("--w-rot", type=float, help="direction loss weight")
    g = p.add_argument_group("optimizer (defaults: 2000 iterations, 8 starts)")
    g.add_argument("--max-iters", type=int, help="iteration budget per target")
    g.add_argument("--n-starts", type=int, help="multi-start count")
    g.add_argument("--fix-dims", action="store_true", help="hold dims at the configured size prior")
    p.add_argument("--config", help='JSON file with "weights" and/or "fit" sections')


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = _load_config(args.config, _SCENE_KEYS)
    flags = {
        "seed": args.seed,
        "n_targets": args.targets,
        "baseline": args.baseline,
        "view2_yaw": args.view2_yaw,
        "pixel_noise_sigma": args.pixel_noise,
        "direction_noise_sigma": args.direction_noise,
        "moving_fraction": args.moving_fraction,
    }
    merged = _merge(cfg, flags)
    merged.setdefault("seed", _default_seed())
    if args.depth_min is not None or args.depth_max is not None:
        lo, hi = merged.get("depth_range", SceneSpec.depth_range)
        merged["depth_range"] = (args.depth_min if args.depth_min is not None else lo,
                                 args.depth_max if args.depth_max is not None else hi)
    for key in ("depth_range", "lateral_range"):
        if key in merged:
            merged[key] = tuple(merged[key])
    if "dims_ranges" in merged:
        merged["dims_ranges"] = tuple(tuple(r) for r in merged["dims_ranges"])
    try:
        spec = SceneSpec(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    scene = generate(spec)
    _write_text(args.out, dumps_scene(scene))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _fit_one(job):
    obs, weights, cfg = job
    return fit(obs, weights, cfg)


def _observations(scene: SceneBundle, single_view: bool):
    obs = scene.observations()
    return [o.single_view() for o in obs] if single_view else obs


def _map_jobs(fn, jobs, n_workers):
    if n_workers is None or n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, jobs))  # map keeps input order


def _trace_path(base: str, track_id, n_targets: int) -> Path:
    path = Path(base)
    if n_targets == 1:
        return path
    return path.with_name(f"{path.stem}.{track_id}{path.suffix or '.csv'}")


def cmd_fit(args) -> int:
    weights, cfg = _weights_and_fit(args)
    scene = _load_scene(args.scene)
    obs = _observations(scene, args.single_view)
    results = _map_jobs(_fit_one, [(o, weights, cfg) for o in obs], args.jobs)
    doc = {
        "schema": RESULTS_SCHEMA,
        "single_view": bool(args.single_view),
        "weights": weights.to_dict(),
        "fit_config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "results": [
            {
                "track_id": o.track_id,
                "box": _box_to_dict(r.box),
                "loss": asdict(r.final),
                "iters": r.iters,
                "converged": r.converged,
                "start_index": r.start_index,
            }
            for o, r in zip(obs, results)
        ],
    }
    _write_text(args.out, _dumps(doc))
    if args.trace:
        for o, r in zip(obs, results):
            try:
                r.write_trace(_trace_path(args.trace, o.track_id, len(obs)))
            except OSError as exc:
                raise InputError(f"cannot write trace: {exc}") from None
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _parse_floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated list of numbers") from None


def _sweep_one(job):
    obs, weights, depths, cfg, two_view = job
    return depth_sweep(obs, weights, depths, cfg, two_view=two_view)


def cmd_sweep(args) -> int:
    weights, cfg = _weights_and_fit(args)
    if (args.depths is None) == (args.relative is None):
        raise ConfigError("give exactly one of --depths or --relative")
    scene = _load_scene(args.scene)
    obs = scene.observations()
    jobs = []
    for o, gt in zip(obs, scene.gt_boxes):
        if args.depths is not None:
            depths = _parse_floats(args.depths, "--depths")
        else:
            depths = [f * gt.center[2] for f in _parse_floats(args.relative, "--relative")]
        if any(not d > 0 for d in depths):
            raise ConfigError("depths must be positive")
        jobs.append((o, weights, depths, cfg, args.two_view))
    rows = _map_jobs(_sweep_one, jobs, args.jobs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["track_id", "depth", "loss"])
    for o, sweep in zip(obs, rows):
        for depth, loss in sweep:
            writer.writerow([o.track_id, repr(float(depth)), repr(float(loss))])
    _write_text(args.out, buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    scene = _load_scene(args.scene)
    doc = _read_json(args.results)
    try:
        fitted = [_box_from_dict(r["box"]) for r in doc["results"]]
        fitted_ids = [r["track_id"] for r in doc["results"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.results}: not a results document ({exc})") from None
    report = summarize(scene.gt_boxes, fitted, gt_ids=scene.track_ids, fitted_ids=fitted_ids,
                       orientation_aware=args.orientation_aware)
    _write_text(args.out_csv, report.to_csv())
    if args.out_json:
        _write_text(args.out_json, report.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# recover-direction


def cmd_recover_direction(args) -> int:
    calib = _parse_calib_file(args.calib)
    K = kitti_io.intrinsics_of(calib.P3 if args.camera == 3 else calib.P2)
    text = _read_text(args.labels)
    try:
        frame_id, camera_id, targets = frame_from_json(text)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.labels}: not a label frame ({exc})") from None
    out = []
    for t in targets:
        entry = {"track_id": t.track_id, "heading": None, "yaw": None, "report": []}
        if t.direction is None:
            entry["report"] = ["NoDirectionLabel"]
        else:
            entry["report"] = validate_direction_label(K, t.direction)
            if not entry["report"]:
                n = recover_direction(K, t.direction)
                entry["heading"] = [float(n[0]), float(n[1])]
                entry["yaw"] = math.atan2(n[1], n[0])
        out.append(entry)
    _write_text(args.out, _dumps({"frame_id": frame_id, "camera_id": camera_id, "directions": out}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# KITTI


def _parse_calib_file(path):
    try:
        return kitti_io.parse_calib(_read_text(path))
    except MalformedCalib as exc:
        raise InputError(f"{path}: {exc}") from None


def _image_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError("--image-size must look like 1242x375") from None
    if w < 0 or h < 0:
        raise ConfigError("--image-size must be non-negative")
    return w, h


def cmd_kitti_import(args) -> int:
    """KITTI calib + label_2 -> scene JSON (view 1 = camera 2, view 2 = camera 3).

    View-1 box labels are the stored 2D boxes. KITTI has no right-image or
    direction labels, so those are rendered from the 3D boxes.
    """
    calib = _parse_calib_file(args.calib)
    try:
        labels = kitti_io.parse_labels(_read_text(args.label))
    except MalformedLabel as exc:
        raise InputError(f"{args.label}: {exc}") from None
    width, height = _image_size(args.image_size)
    K2 = kitti_io.intrinsics_of(calib.P2, width, height)
    K3 = kitti_io.intrinsics_of(calib.P3, width, height)
    T = kitti_io.stereo_baseline(calib.P2, calib.P3)
    off2 = kitti_io.camera_offset(calib.P2)
    types = None if args.types is None else set(args.types.split(","))
    gt1, gt2, lab1, lab2 = [], [], [], []
    for i, lab in enumerate(labels):
        if lab.is_dont_care or (types is not None and lab.type not in types):
            continue
        box1 = kitti_io.kitti_to_box3d(lab, off2)
        box2 = transform_box(T, box1)
        try:
            aabb2 = project_box_to_aabb(K3, box2)
        except NonPositiveDepth:
            continue
        gt1.append(box1)
        gt2.append(box2)
        lab1.append(TargetLabel(lab.box2d, _direction_or_none(K2, box1), i, True))
        lab2.append(TargetLabel(aabb2, _direction_or_none(K3, box2), i, True))
    scene = SceneBundle((K2, K3), T, gt1, gt2, (lab1, lab2))
    _write_text(args.out, dumps_scene(scene))
    return EXIT_OK


def _direction_or_none(K, box):
    try:
        return direction_label_for(K, box)
    except (ValueError, NonPositiveDepth):
        return None


def cmd_kitti_export(args) -> int:
    """Scene JSON (optionally with fitted boxes) -> KITTI label_2 text, plus calib."""
    scene = _load_scene(args.scene)
    boxes = scene.gt_boxes
    if args.results:
        doc = _read_json(args.results)
        try:
            boxes = [_box_from_dict(r["box"]) for r in doc["results"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{args.results}: not a results document ({exc})") from None
    K1, K2 = scene.intrinsics
    labels = [kitti_io.box3d_to_kitti(b, K1, type=args.type) for b in boxes]
    _write_text(args.out_label, kitti_io.write_labels(labels))
    if args.out_calib:
        _write_text(args.out_calib, kitti_io.write_calib(_calib_from_scene(K1, K2, scene.T_12)))
    return EXIT_OK


def _calib_from_scene(K1, K2, T: RigidTransform) -> kitti_io.KittiCalib:
    # View 1 becomes the reference camera; view 2 must be a pure translation.
    if not np.allclose(T.rotation, np.eye(3), atol=1e-12):
        raise ConfigError("KITTI calib needs rectified views (no rotation between them)")
    P2 = np.hstack([K1.matrix, np.zeros((3, 1))])
    P3 = np.hstack([K2.matrix, (K2.matrix @ T.translation)[:, None]])
    Tr = np.hstack([np.eye(3), np.zeros((3, 1))])
    return kitti_io.KittiCalib(P2.copy(), P3.copy(), P2, P3, np.eye(3), Tr)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakgeo", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-view scene",
                       description="Generate a synthetic two-view scene as JSON. Flags override --config "
                                   "(a JSON object of SceneSpec fields).")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="RNG seed (default: $WEAKGEO_SEED or 0)")
    p.add_argument("--targets", type=int, help="number of targets (default 1)")
    p.add_argument("--depth-min", type=float, help="minimum depth in m (default 5)")
    p.add_argument("--depth-max", type=float, help="maximum depth in m (default 40)")
    p.add_argument("--baseline", type=float, help="view-2 offset along x in m (default 0.54)")
    p.add_argument("--view2-yaw", type=float, help="view-2 rotation about y in rad (default 0)")
    p.add_argument("--pixel-noise", type=float, help="box label noise sigma in px (default 0)")
    p.add_argument("--direction-noise", type=float, help="direction label noise sigma in px (default 0)")
    p.add_argument("--moving-fraction", type=float, help="share of targets that move between views (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit 3D boxes to the labels of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="results JSON")
    p.add_argument("--single-view", action="store_true", help="use view 1 only")
    p.add_argument("--trace", help="per-iteration CSV (one file per target when several)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    _add_weight_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="minimum loss with the depth pinned (depth ambiguity probe)")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="CSV of track_id, depth, loss")
    p.add_argument("--depths", help="comma-separated absolute depths in m")
    p.add_argument("--relative", help="comma-separated multiples of each target's true depth")
    p.add_argument("--two-view", action="store_true", help="keep view 2 (default: view 1 only)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    _add_weight_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="compare fitted boxes with the scene ground truth")
    p.add_argument("--scene", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json")
    p.add_argument("--orientation-aware", action="store_true", help="yaw error modulo 2 pi instead of pi")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recover-direction", help="3D headings from 2D direction labels")
    p.add_argument("--calib", required=True, help="KITTI calib file")
    p.add_argument("--labels", required=True, help="label frame JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--camera", type=int, choices=(2, 3), default=2, help="projection matrix to use (default 2)")
    p.set_defaults(func=cmd_recover_direction)

    p = sub.add_parser("kitti-import", help="KITTI calib + label file -> scene JSON")
    p.add_argument("--calib", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--types", help="comma-separated object classes to keep (default all but DontCare)")
    p.add_argument("--image-size", default="1242x375", help="WIDTHxHEIGHT (default 1242x375)")
    p.set_defaults(func=cmd_kitti_import)

    p = sub.add_parser("kitti-export", help="scene or fit results -> KITTI label (and calib) files")
    p.add_argument("--scene", required=True)
    p.add_argument("--results", help="results JSON; default exports the ground truth")
    p.add_argument("--out-label", required=True)
    p.add_argument("--out-calib")
    p.add_argument("--type", default="Car", help="class name to write (default Car)")
    p.set_defaults(func=cmd_kitti_export)
    return parser


_NUMERIC = (AllStartsDiverged, NoLabels, NonPositiveDepth, UnprojectableTarget, DegenerateHeading)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"weakgeo {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"weakgeo {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except WeakGeoError as exc:
        print(f"weakgeo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc, _NUMERIC) else EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
