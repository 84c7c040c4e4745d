"""Deterministic synthetic scenes with analytic ground truth, plus oracles.

Scene generation uses the counter-based Philox PRNG so a seed produces
bit-identical scenes on every platform.  The oracles in this module are
reference implementations used by the test and acceptance suites; they
deliberately share no code with the production paths they check.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .camera import BevGridSpec, CameraExtrinsics, CameraIntrinsics, save_camera_rig
from .errors import GridMismatch, InfeasibleSpec
from .labelgen import (
    GROUP_PERSON,
    GROUP_SHORT_STUFF,
    GROUP_TALL_STUFF,
    GROUP_VEGETATION,
    GROUP_VEHICLE,
    Box3D,
    Category,
    CategoryTable,
    EgoPose,
    HeightMap,
    LabeledPointCloud,
    MorphKernelTable,
    PanopticBevMap,
)

# Default synthetic class layout.
CLASS_ROAD = 1
CLASS_TERRAIN = 2
CLASS_SIDEWALK = 3
CLASS_BUILDING = 4
CLASS_VEGETATION = 5
CLASS_OCCLUSION = 8
CLASS_CAR = 10
CLASS_PEDESTRIAN = 11


def default_categories() -> CategoryTable:
    return CategoryTable(
        {
            CLASS_ROAD: Category("road", False),
            CLASS_TERRAIN: Category("terrain", False),
            CLASS_SIDEWALK: Category("sidewalk", False),
            CLASS_BUILDING: Category("building", False),
            CLASS_VEGETATION: Category("vegetation", False),
            CLASS_OCCLUSION: Category("occlusion", False),
            CLASS_CAR: Category("car", True),
            CLASS_PEDESTRIAN: Category("pedestrian", True),
        },
        occlusion_id=CLASS_OCCLUSION,
    )


def default_class_groups() -> dict[int, str]:
    return {
        CLASS_ROAD: GROUP_SHORT_STUFF,
        CLASS_TERRAIN: GROUP_SHORT_STUFF,
        CLASS_SIDEWALK: GROUP_SHORT_STUFF,
        CLASS_BUILDING: GROUP_TALL_STUFF,
        CLASS_VEGETATION: GROUP_VEGETATION,
        CLASS_CAR: GROUP_VEHICLE,
        CLASS_PEDESTRIAN: GROUP_PERSON,
    }


def closing_kernel_table() -> MorphKernelTable:
    """Shape-preserving kernels (dilation = erosion) for synthetic runs."""
    sizes = {g: 3 for g in (
        GROUP_TALL_STUFF, GROUP_SHORT_STUFF, GROUP_VEGETATION,
        GROUP_VEHICLE, GROUP_PERSON)}
    return MorphKernelTable(dict(sizes), dict(sizes), default_class_groups())


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines a synthetic scene; the seed fixes it all."""

    seed: int = 0
    cells: int = 64
    resolution: float = 0.25
    camera_height: float = 1.6
    n_buildings: int = 3
    n_vehicles: int = 3
    n_pedestrians: int = 2
    n_vegetation: int = 2
    road_half_width: float = 3.0
    sidewalk_width: float = 1.5
    noise_sigma: float = 0.0
    n_frames: int = 5
    frame_step: float = 1.0
    coverage: float = 0.7
    fx: float = 300.0
    fy: float = 300.0
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    def grid(self) -> BevGridSpec:
        return BevGridSpec.from_size(self.cells, self.cells, self.resolution)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.fx, self.fy, self.image_width / 2, self.image_height / 2,
            self.image_width, self.image_height,
        )

    def extrinsics(self) -> CameraExtrinsics:
        return CameraExtrinsics.level(self.camera_height)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class _SceneObject:
    class_id: int
    instance_id: int  # 0 for stuff-like patches (vegetation)
    center: np.ndarray  # world (x, z)
    dims: tuple[float, float]  # (length along z, width along x)
    yaw: float
    height: float
    dynamic: bool


@dataclass
class AnalyticScene:
    """Exact ground truth plus the sampled sensor data that observes it."""

    spec: SceneSpec
    gt: PanopticBevMap  # pre-FoV, pre-occlusion exact rasterization
    height: HeightMap
    clouds: list[LabeledPointCloud]  # one per frame, in that frame's sensor coords
    poses: dict[int, EgoPose]
    boxes: list[Box3D]  # per frame, in that frame's sensor coords
    target_frame: int
    objects: list[_SceneObject] = field(default_factory=list)


def _inside_footprint(obj: _SceneObject, x, z) -> np.ndarray:
    dx = x - obj.center[0]
    dz = z - obj.center[1]
    c, s = np.cos(obj.yaw), np.sin(obj.yaw)
    lx = c * dx - s * dz
    lz = s * dx + c * dz
    return (np.abs(lx) <= obj.dims[1] / 2) & (np.abs(lz) <= obj.dims[0] / 2)


def gen_scene(spec: SceneSpec) -> AnalyticScene:
    """Build a reproducible scene: layout, exact rasters, clouds and boxes."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    grid = spec.grid()
    xm, zm = grid.center_mesh()

    # Base strata: road strip down the middle, sidewalks, terrain beyond.
    base = np.full(grid.shape, CLASS_TERRAIN, dtype=np.uint16)
    sidewalk = np.abs(xm) <= spec.road_half_width + spec.sidewalk_width
    base[sidewalk] = CLASS_SIDEWALK
    base[np.abs(xm) <= spec.road_half_width] = CLASS_ROAD

    objects: list[_SceneObject] = []
    occupied = np.zeros(grid.shape, dtype=bool)

    def place(class_id, instance_id, dims, height, dynamic, region_mask, yaw_range):
        for _ in range(200):
            flat = np.flatnonzero(region_mask & ~occupied)
            if len(flat) == 0:
                break
            pick = int(rng.integers(len(flat)))
            r, c = np.unravel_index(flat[pick], grid.shape)
            obj = _SceneObject(
                class_id,
                instance_id,
                np.array([xm[r, c], zm[r, c]]),
                dims,
                float(rng.uniform(*yaw_range)),
                height,
                dynamic,
            )
            mask = _inside_footprint(obj, xm, zm)
            # Keep a one-cell moat around objects so instances stay separable.
            if not mask.any() or (_grow(mask) & occupied).any():
                continue
            occupied[:] |= _grow(mask)
            objects.append(obj)
            return
        raise InfeasibleSpec(f"could not place object of class {class_id}")

    def _grow(mask):
        g = mask.copy()
        g[1:] |= mask[:-1]
        g[:-1] |= mask[1:]
        g[:, 1:] |= mask[:, :-1]
        g[:, :-1] |= mask[:, 1:]
        return g

    next_instance = 1
    terrain_region = base == CLASS_TERRAIN
    road_region = base == CLASS_ROAD
    walk_region = base == CLASS_SIDEWALK
    for _ in range(spec.n_buildings):
        dims = (float(rng.uniform(2.5, 5.0)), float(rng.uniform(2.5, 5.0)))
        place(CLASS_BUILDING, 0, dims, float(rng.uniform(3.0, 8.0)), False,
              terrain_region, (0.0, 0.0))
    for _ in range(spec.n_vegetation):
        d = float(rng.uniform(1.0, 2.5))
        place(CLASS_VEGETATION, 0, (d, d), 0.0, False, terrain_region, (0.0, 0.0))
    for _ in range(spec.n_vehicles):
        place(CLASS_CAR, next_instance, (4.0, 2.0), 1.5, True,
              road_region, (-0.3, 0.3))
        next_instance += 1
    for _ in range(spec.n_pedestrians):
        place(CLASS_PEDESTRIAN, next_instance, (0.8, 0.8), 1.8, True,
              walk_region, (0.0, 0.0))
        next_instance += 1

    # Exact rasters.
    class_map = base.copy()
    inst_map = np.zeros(grid.shape, dtype=np.uint16)
    hmap = np.zeros(grid.shape)
    for obj in objects:
        mask = _inside_footprint(obj, xm, zm)
        class_map[mask] = obj.class_id
        inst_map[mask] = obj.instance_id
        hmap[mask] = obj.height
    cats = default_categories()
    gt = PanopticBevMap(class_map, inst_map, cats, grid)

    # Ego trajectory: forward motion, camera at the world origin at the
    # target frame.  Sensor frame k sits at world (0, -camera_height, z_k).
    target = spec.n_frames // 2
    poses = {}
    for k in range(spec.n_frames):
        zk = (k - target) * spec.frame_step
        m = np.eye(4)
        m[:3, 3] = [0.0, -spec.camera_height, zk]
        poses[k] = EgoPose(k, m)

    clouds = []
    boxes: list[Box3D] = []
    n_cells = grid.cells_x * grid.cells_z
    for k in range(spec.n_frames):
        zk = (k - target) * spec.frame_step
        chosen = rng.random(n_cells) < spec.coverage
        rr, cc = np.unravel_index(np.flatnonzero(chosen), grid.shape)
        x = xm[rr, cc]
        z = zm[rr, cc]
        h = hmap[rr, cc]
        cls = class_map[rr, cc]
        inst = inst_map[rr, cc]
        dyn = np.array([cats.is_thing(int(c)) for c in cls])
        pts_world = np.column_stack([x, -h, z])
        if spec.noise_sigma > 0:
            pts_world = pts_world + rng.normal(0.0, spec.noise_sigma, pts_world.shape)
        pts_sensor = pts_world - np.array([0.0, -spec.camera_height, zk])
        clouds.append(
            LabeledPointCloud(pts_sensor, cls, inst, dyn, np.full(len(cls), k))
        )
        for obj in objects:
            if not obj.dynamic:
                continue
            boxes.append(
                Box3D(
                    center=np.array(
                        [obj.center[0],
                         spec.camera_height - obj.height / 2,
                         obj.center[1] - zk]
                    ),
                    dims=np.array([obj.dims[0], obj.dims[1], obj.height]),
                    yaw=obj.yaw,
                    class_id=obj.class_id,
                    instance_id=obj.instance_id,
                    frame=k,
                )
            )
    return AnalyticScene(
        spec, gt, HeightMap(hmap, grid), clouds, poses, boxes, target, objects
    )


def fov_mask_reference(spec: SceneSpec) -> np.ndarray:
    """Per-cell brute-force frustum test, independent of the camera module."""
    grid = spec.grid()
    out = np.zeros(grid.shape, dtype=bool)
    for r in range(grid.cells_z):
        for c in range(grid.cells_x):
            x = grid.x_min + (c + 0.5) * grid.resolution
            z = grid.z_max - (r + 0.5) * grid.resolution
            if z <= 0:
                continue
            u = spec.fx * x / z + spec.image_width / 2
            out[r, c] = 0 <= u < spec.image_width
    return out


# ---------------------------------------------------------------------------
# Occlusion oracle


def oracle_occlusion(
    hmap: HeightMap,
    grid: BevGridSpec,
    camera_cell: tuple[int, int] | None = None,
    n_rays: int = 16,
    samples_per_cell: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Dense ray-march occlusion with angular supersampling.

    Casts ``n_rays`` rays per cell toward a subgrid of endpoints inside
    the cell, marches each densely, and takes a majority vote.  Returns
    (occluded, unanimous); non-unanimous cells mark discretization ties.
    """
    h = np.where(np.isnan(hmap.h), 0.0, hmap.h)
    if camera_cell is None:
        camera_cell = grid.camera_cell()
    r0, c0 = camera_cell
    nrow, ncol = grid.shape

    side = int(round(np.sqrt(n_rays)))
    offs = (np.arange(side) + 0.5) / side - 0.5  # e.g. -.375 -.125 .125 .375
    jitters = [(a * 0.9, b * 0.9) for a in offs for b in offs]

    cell_r, cell_c = np.meshgrid(np.arange(nrow), np.arange(ncol), indexing="ij")
    cell_r = cell_r.ravel()
    cell_c = cell_c.ravel()
    n_steps = max(nrow, ncol) * samples_per_cell
    ts = np.arange(1, n_steps + 1) / n_steps

    votes = np.zeros(nrow * ncol, dtype=int)
    target_h = h[cell_r, cell_c]
    for dr_off, dc_off in jitters:
        end_r = cell_r + dr_off
        end_c = cell_c + dc_off
        rs = np.rint(r0 + np.outer(end_r - r0, ts)).astype(int)
        cs = np.rint(c0 + np.outer(end_c - c0, ts)).astype(int)
        heights = h[rs, cs]
        in_target = (rs == cell_r[:, None]) & (cs == cell_c[:, None])
        heights = np.where(in_target, -np.inf, heights)
        run_max = np.maximum(heights.max(axis=1), h[r0, c0])
        votes += (target_h < run_max).astype(int)

    occluded = votes > len(jitters) // 2
    unanimous = (votes == 0) | (votes == len(jitters))
    occluded = occluded.reshape(nrow, ncol)
    unanimous = unanimous.reshape(nrow, ncol)
    occluded[r0, c0] = False
    unanimous[r0, c0] = True
    return occluded, unanimous


# ---------------------------------------------------------------------------
# Panoptic quality oracle


def oracle_pq(pred: PanopticBevMap, gt: PanopticBevMap):
    """Direct-from-definition PQ with exhaustive pairwise IoU.

    Returns a dict with "per_class", "all", "things", "stuff" entries of
    (pq, sq, rq) tuples.  Shares no code with bevkit.metrics.
    """
    if pred.class_id.shape != gt.class_id.shape or pred.grid != gt.grid:
        raise GridMismatch("maps must share a grid")

    def collect(m):
        segs: dict[tuple[int, int], set] = {}
        for r in range(m.class_id.shape[0]):
            for c in range(m.class_id.shape[1]):
                cid = int(m.class_id[r, c])
                if cid == 0:
                    continue
                segs.setdefault((cid, int(m.instance_index[r, c])), set()).add((r, c))
        return segs

    gt_segs = collect(gt)
    pred_segs = collect(pred)
    void_px = {
        (r, c)
        for r in range(gt.class_id.shape[0])
        for c in range(gt.class_id.shape[1])
        if int(gt.class_id[r, c]) == 0
    }

    stats: dict[int, dict] = {}

    def stat(cid):
        return stats.setdefault(cid, {"tp": 0, "fp": 0, "fn": 0, "iou": 0.0})

    matched_gt, matched_pred = set(), set()
    for gkey, gpx in gt_segs.items():
        for pkey, ppx in pred_segs.items():
            if gkey[0] != pkey[0]:
                continue
            inter = len(gpx & ppx)
            if inter == 0:
                continue
            union = len(gpx) + len(ppx) - inter - len(ppx & void_px)
            iou = inter / union
            if iou > 0.5:
                s = stat(gkey[0])
                s["tp"] += 1
                s["iou"] += iou
                matched_gt.add(gkey)
                matched_pred.add(pkey)
    for gkey in gt_segs:
        if gkey not in matched_gt:
            stat(gkey[0])["fn"] += 1
    for pkey, ppx in pred_segs.items():
        if pkey in matched_pred:
            continue
        if len(ppx & void_px) / len(ppx) > 0.5:
            continue
        stat(pkey[0])["fp"] += 1

    gt_classes = {k[0] for k in gt_segs}
    per_class = {}
    for cid in sorted(gt_classes):
        s = stats.get(cid, {"tp": 0, "fp": 0, "fn": 0, "iou": 0.0})
        denom = s["tp"] + 0.5 * s["fp"] + 0.5 * s["fn"]
        pq = s["iou"] / denom if denom else 0.0
        sq = s["iou"] / s["tp"] if s["tp"] else 0.0
        rq = s["tp"] / denom if denom else 0.0
        per_class[cid] = (pq, sq, rq)

    things = set(gt.categories.thing_ids())

    def agg(ids):
        ids = list(ids)
        if not ids:
            return (0.0, 0.0, 0.0)
        return tuple(sum(per_class[c][k] for c in ids) / len(ids) for k in range(3))

    return {
        "per_class": per_class,
        "all": agg(per_class),
        "things": agg([c for c in per_class if c in things]),
        "stuff": agg([c for c in per_class if c not in things]),
    }


# ---------------------------------------------------------------------------
# Finite differences


def oracle_finite_diff(loss_fn, logits: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar loss over a logit array."""
    if h <= 0:
        raise ValueError("step must be positive")
    grad = np.zeros_like(logits, dtype=float)
    flat = logits.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn(logits)
        flat[i] = orig - h
        lo = loss_fn(logits)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


# ---------------------------------------------------------------------------
# Scene export


def export_scene(scene: AnalyticScene, out_dir) -> dict:
    """Write a scene in the pipeline input formats; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = scene.spec

    all_points = LabeledPointCloud.concatenate(scene.clouds)
    formats.write_point_cloud(
        out / "points.bin",
        all_points.xyz,
        all_points.class_id,
        all_points.instance_id,
        all_points.frame,
        all_points.dynamic,
    )
    formats.write_poses(out / "poses.json", {f: p.matrix for f, p in scene.poses.items()})
    formats.write_boxes(
        out / "boxes.json",
        [
            {
                "frame": int(b.frame),
                "center": [float(v) for v in b.center],
                "dims": [float(v) for v in b.dims],
                "yaw": float(b.yaw),
                "class": int(b.class_id),
                "instance": int(b.instance_id),
            }
            for b in scene.boxes
        ],
    )
    save_camera_rig(out / "rig.json", spec.intrinsics(), spec.extrinsics())
    meta = {
        "spec": spec.to_dict(),
        "target_frame": scene.target_frame,
        "categories": scene.gt.categories.to_dict(),
        "grid": scene.gt.grid.to_dict(),
    }
    formats.atomic_write_bytes(
        out / "scene.json", json.dumps(meta, indent=2, sort_keys=True).encode()
    )

    manifest = {"files": {}}
    for name in ("points.bin", "poses.json", "boxes.json", "rig.json", "scene.json"):
        manifest["files"][name] = hashlib.sha256((out / name).read_bytes()).hexdigest()
    manifest["hash"] = hashlib.sha256(
        json.dumps(manifest["files"], sort_keys=True).encode()
    ).hexdigest()
    formats.atomic_write_bytes(
        out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode()
    )
    return manifest
