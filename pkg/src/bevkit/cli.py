"""Batch command-line front end.

Subcommands: labelgen, weights, fuse, eval, synth.  Exit codes: 0 ok,
2 input error, 3 validation error, 4 internal invariant failure.
Failures emit a machine-readable JSON report on stderr; progress goes to
stderr as well so stdout stays machine-clean.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import formats, fusion, labelgen, metrics, synth, weighting
from .camera import fov_mask, load_camera_rig
from .errors import (
    BevkitError,
    FrameMismatch,
    GridMismatch,
    InvalidGrid,
    MissingInput,
    ShapeMismatch,
    UnknownClass,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_VALIDATION = 3
EXIT_INTERNAL = 4

_INPUT_ERRORS = (
    MissingInput,
    FrameMismatch,
    FileNotFoundError,
    json.JSONDecodeError,
)
_VALIDATION_ERRORS = (
    ShapeMismatch,
    GridMismatch,
    UnknownClass,
    InvalidGrid,
    ValueError,
)


def _fail(exc: Exception) -> int:
    report = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(report), file=sys.stderr)
    if isinstance(exc, _INPUT_ERRORS):
        return EXIT_INPUT
    if isinstance(exc, _VALIDATION_ERRORS):
        return EXIT_VALIDATION
    if isinstance(exc, BevkitError):
        return EXIT_VALIDATION
    return EXIT_INTERNAL


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _build_config(args) -> config_mod.PipelineConfig:
    cfg = config_mod.preset(args.preset)
    if args.config:
        cfg = config_mod.load_config(args.config, base=cfg)
    overrides = {}
    for flag in ("lambda_s", "blend_radius", "score_threshold", "nms_threshold"):
        if getattr(args, flag, None) is not None:
            overrides[flag] = getattr(args, flag)
    if getattr(args, "grid_cells", None):
        overrides["grid_cells_z"], overrides["grid_cells_x"] = args.grid_cells
    if getattr(args, "resolution", None) is not None:
        overrides["grid_resolution"] = args.resolution
    if getattr(args, "no_occlusion", False):
        overrides["occlusion"] = False
    return cfg.with_overrides(**overrides)


def _dump_effective_config(cfg: config_mod.PipelineConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    formats.atomic_write_bytes(
        out_dir / "effective_config.yaml", cfg.effective_yaml().encode()
    )


# ---------------------------------------------------------------------------
# labelgen


def _load_scene_inputs(input_dir: Path):
    points_path = input_dir / "points.bin"
    if not points_path.exists():
        points_path = input_dir / "points.csv"
    if not points_path.exists():
        raise MissingInput(f"no frames: {input_dir} has no points.bin/points.csv")
    xyz, cls, inst, frame, dyn = formats.read_point_cloud(points_path)
    cloud = labelgen.LabeledPointCloud(xyz, cls, inst, dyn, frame)
    poses = {
        f: labelgen.EgoPose(f, m)
        for f, m in formats.read_poses(input_dir / "poses.json").items()
    }
    boxes = [
        labelgen.Box3D(
            np.array(b["center"]), np.array(b["dims"]), b["yaw"],
            b["class"], b["instance"], b["frame"],
        )
        for b in formats.read_boxes(input_dir / "boxes.json")
    ]
    scene_meta = json.loads((input_dir / "scene.json").read_text())
    categories = labelgen.CategoryTable.from_dict(scene_meta["categories"])
    return cloud, poses, boxes, categories, scene_meta


def _labelgen_frame(payload):
    (cloud, poses, boxes, categories, cfg, target, rig_path) = payload
    intr, extr = load_camera_rig(rig_path)
    grid = cfg.grid()
    kernels = cfg.kernel_table(
        {c: synth.default_class_groups().get(c, labelgen.GROUP_SHORT_STUFF)
         for c in categories.categories}
    )
    fov = fov_mask(intr, grid) if cfg.fov_crop else None
    start = time.perf_counter()
    result = labelgen.run_pipeline(
        [cloud], poses, boxes, target, extr, grid, kernels, categories,
        fov=fov, window=cfg.accumulation_window, occlusion=cfg.occlusion,
    )
    elapsed = time.perf_counter() - start
    return target, result, elapsed


def cmd_labelgen(args) -> int:
    cfg = _build_config(args)
    input_dir = Path(args.input)
    out_dir = Path(cfg.out_dir or args.out or "out")
    cloud, poses, boxes, categories, scene_meta = _load_scene_inputs(input_dir)
    if len(poses) == 0 or len(cloud) == 0:
        raise MissingInput("no frames: input directory contains no data")
    targets = args.frames if args.frames else sorted(poses)

    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_effective_config(cfg, out_dir)
    payloads = [
        (cloud, poses, boxes, categories, cfg, t, str(input_dir / "rig.json"))
        for t in targets
    ]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_labelgen_frame, payloads))
    else:
        results = [_labelgen_frame(p) for p in payloads]

    timings = {}
    for target, result, elapsed in sorted(results):
        sidecar = {
            "categories": categories.to_dict(),
            "grid": result.bev.grid.to_dict(),
            "config_hash": cfg.config_hash(),
            "frame": target,
        }
        formats.write_label_map(
            out_dir / f"labels_{target:06d}.png",
            result.bev.class_id,
            result.bev.instance_index,
            sidecar,
        )
        timings[target] = elapsed
        _log(f"frame {target}: {elapsed:.2f}s")

    import hashlib

    input_hashes = {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(input_dir.iterdir())
        if p.is_file()
    }
    manifest = {
        "config_hash": cfg.config_hash(),
        "input_hashes": input_hashes,
        "timings": {str(k): round(v, 6) for k, v in timings.items()},
        "frames": [int(t) for t in targets],
    }
    formats.atomic_write_bytes(
        out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode()
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# weights


def cmd_weights(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(cfg.out_dir or args.out or "out")
    if not args.rig:
        raise MissingInput("--rig is required for weight generation")
    intr, _extr = load_camera_rig(args.rig)
    grid = cfg.grid()
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_effective_config(cfg, out_dir)

    kinds = args.kind
    if "sensitivity" in kinds:
        smap = weighting.sensitivity_map(intr, grid, cfg.sensitivity_plane_height)
        wmap = weighting.sensitivity_weight(smap, cfg.lambda_s)
        formats.write_float_raster(
            out_dir / "sensitivity_weights.bin",
            wmap.w,
            {"kind": "sensitivity", "grid": grid.to_dict(), "lambda_s": cfg.lambda_s},
        )
        formats.write_heatmap_png(out_dir / "sensitivity_weights.png", wmap.w)
    if "class" in kinds:
        if not args.labels:
            raise MissingInput("class weighting requires --labels")
        label_dir = Path(args.labels)
        label_files = sorted(label_dir.glob("*.png"))
        if not label_files:
            raise MissingInput(f"no label maps in {label_dir}")
        rasters = [formats.read_label_map(p)[0] for p in label_files]
        table = weighting.ClassFrequencyTable.from_label_maps(rasters)
        for path, raster in zip(label_files, rasters):
            wmap = weighting.boundary_blend_weights(raster, table, cfg.blend_radius)
            formats.write_float_raster(
                out_dir / f"class_weights_{path.stem}.bin",
                wmap.w,
                {"kind": "class", "grid": grid.to_dict(), "radius": cfg.blend_radius},
            )
            formats.write_heatmap_png(out_dir / f"class_weights_{path.stem}.png", wmap.w)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse


def cmd_fuse(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(cfg.out_dir or args.out or "out")
    sem_arr, sem_header = formats.read_float_raster(args.sem)
    sem = fusion.SemanticLogits(
        sem_arr, sem_header["stuff_ids"], sem_header["thing_ids"]
    )
    inst_doc = json.loads(Path(args.instances).read_text())
    if inst_doc["instances"]:
        masks, _ = formats.read_float_raster(
            Path(args.instances).parent / inst_doc["masks"]
        )
    else:
        masks = np.zeros((0,) + sem_arr.shape[:2])
    inst = fusion.InstanceSet(
        masks,
        [e["class"] for e in inst_doc["instances"]],
        [e["score"] for e in inst_doc["instances"]],
        np.array([e["box"] for e in inst_doc["instances"]]).reshape(-1, 4),
    )
    if masks.shape[0] and masks.shape[1:] != sem_arr.shape[:2]:
        raise ShapeMismatch(f"{inst_doc['masks']}: mask shape disagrees with {args.sem}")

    inst = fusion.filter_instances(inst, cfg.score_threshold, cfg.nms_threshold)
    pl = fusion.merge_logits(sem, inst)
    categories = labelgen.CategoryTable.from_dict(sem_header["categories"])
    grid = cfg.grid()
    if tuple(grid.shape) != sem_arr.shape[:2]:
        grid = _grid_for_shape(sem_header, sem_arr.shape[:2])
    bev = fusion.resolve_panoptic(pl, categories, grid, cfg.min_segment_px)

    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_effective_config(cfg, out_dir)
    formats.write_label_map(
        out_dir / "panoptic.png",
        bev.class_id,
        bev.instance_index,
        {
            "categories": categories.to_dict(),
            "grid": grid.to_dict(),
            "config_hash": cfg.config_hash(),
        },
    )
    if args.gt:
        g_cls, g_inst, g_side = formats.read_label_map(args.gt)
        gt = labelgen.PanopticBevMap(g_cls, g_inst, categories, grid)
        loss = fusion.panoptic_cross_entropy(pl, gt)
        print(json.dumps({"panoptic_cross_entropy": loss}))
    return EXIT_OK


def _grid_for_shape(header: dict, shape):
    from .camera import BevGridSpec

    if "grid" in header:
        return BevGridSpec.from_dict(header["grid"])
    return BevGridSpec.from_size(shape[0], shape[1], 1.0)


# ---------------------------------------------------------------------------
# eval


def _read_map_dir(path: Path) -> dict[str, tuple]:
    return {p.name: formats.read_label_map(p) for p in sorted(path.glob("*.png"))}


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    out_dir = Path(args.out or "out")
    preds = _read_map_dir(pred_dir)
    gts = _read_map_dir(gt_dir)
    unpaired = sorted(set(preds) ^ set(gts))
    if not preds or not gts:
        raise MissingInput("prediction or ground-truth directory is empty")
    if unpaired:
        raise FrameMismatch(f"unpaired frames: {unpaired}")

    compare = _read_map_dir(Path(args.compare)) if args.compare else None
    if compare is not None and sorted(compare) != sorted(gts):
        raise FrameMismatch("comparison directory frames do not match")

    out_dir.mkdir(parents=True, exist_ok=True)
    total_match = None
    conf_pairs = []
    for name in sorted(gts):
        g_cls, g_inst, g_side = gts[name]
        p_cls, p_inst, _ = preds[name]
        categories = labelgen.CategoryTable.from_dict(g_side["categories"])
        from .camera import BevGridSpec

        grid = BevGridSpec.from_dict(g_side["grid"])
        gt = labelgen.PanopticBevMap(g_cls, g_inst, categories, grid)
        pred = labelgen.PanopticBevMap(p_cls, p_inst, categories, grid)
        m = metrics.match_segments(pred, gt)
        total_match = m if total_match is None else total_match.merge(m)
        conf_pairs.append((p_cls, g_cls))
        if compare is not None:
            b_cls, b_inst, _ = compare[name]
            base = labelgen.PanopticBevMap(b_cls, b_inst, categories, grid)
            states = metrics.improvement_error_map(pred, base, gt)
            rgb = metrics.improvement_map_rgb(states)
            from PIL import Image

            Image.fromarray(rgb).save(out_dir / f"improvement_{name}")

    scores = metrics.pq_sq_rq(total_match)
    per_class_iou = {}
    miou_mean = None
    pred_all = np.concatenate([p.ravel() for p, _ in conf_pairs])
    gt_all = np.concatenate([g.ravel() for _, g in conf_pairs])
    per_class_iou, miou_mean = metrics.miou(pred_all, gt_all)

    doc = scores.to_dict()
    doc["miou"] = {
        "mean": miou_mean * 100,
        "per_class": {str(c): v * 100 for c, v in per_class_iou.items()},
    }
    formats.atomic_write_bytes(
        out_dir / "scores.json", json.dumps(doc, indent=2, sort_keys=True).encode()
    )
    table = metrics.format_score_table(scores, miou_mean)
    formats.atomic_write_bytes(out_dir / "table.txt", (table + "\n").encode())
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    if args.seed is None:
        raise MissingInput("synth requires an explicit --seed")
    spec = synth.SceneSpec(
        seed=args.seed,
        noise_sigma=args.sigma,
        n_frames=args.frames_count,
        n_vehicles=args.vehicles,
        n_buildings=args.buildings,
    )
    scene = synth.gen_scene(spec)
    out_dir = Path(args.out or f"scene_{args.seed}")
    manifest = synth.export_scene(scene, out_dir)
    print(json.dumps({"out": str(out_dir), "hash": manifest["hash"]}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevkit")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", default="custom",
                   choices=["kitti360", "nuscenes", "custom"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    lg = sub.add_parser("labelgen", help="generate BEV panoptic label maps")
    lg.add_argument("input", help="scene input directory")
    lg.add_argument("--frames", type=int, nargs="*", default=None)
    lg.add_argument("--no-occlusion", action="store_true")
    lg.set_defaults(func=cmd_labelgen)

    w = sub.add_parser("weights", help="generate loss-weight rasters")
    w.add_argument("--rig", help="camera rig JSON")
    w.add_argument("--labels", help="label map directory for class weights")
    w.add_argument("--kind", nargs="+", default=["sensitivity"],
                   choices=["sensitivity", "class"])
    w.add_argument("--lambda-s", dest="lambda_s", type=float, default=None)
    w.add_argument("--blend-radius", dest="blend_radius", type=int, default=None)
    w.set_defaults(func=cmd_weights)

    f = sub.add_parser("fuse", help="fuse semantic and instance logits")
    f.add_argument("--sem", required=True, help="semantic logits raster")
    f.add_argument("--instances", required=True, help="instance set JSON")
    f.add_argument("--gt", help="ground-truth label map for the loss")
    f.add_argument("--score-threshold", dest="score_threshold", type=float,
                   default=None)
    f.add_argument("--nms-threshold", dest="nms_threshold", type=float, default=None)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("pred", help="prediction directory")
    e.add_argument("gt", help="ground-truth directory")
    e.add_argument("--compare", help="baseline prediction directory")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--sigma", type=float, default=0.0)
    s.add_argument("--frames-count", type=int, default=5)
    s.add_argument("--vehicles", type=int, default=3)
    s.add_argument("--buildings", type=int, default=3)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
