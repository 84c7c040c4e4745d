"""Five-stage BEV ground-truth generation.

Stages: accumulate point clouds over time, project them orthographically
onto the BEV grid, densify per class with morphological closing, fuse 3D
box footprints with the dynamic points, shade cells hidden behind taller
geometry with a dedicated occlusion class, and finally mask the camera
frustum and crop.

Point clouds entering project_orthographic are expressed in the camera
frame (x right, y down, z forward); heights above ground are
camera_height - y.  The BEV raster follows the conventions in
bevkit.camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import BevGridSpec, CameraExtrinsics
from .errors import (
    CropOutOfBounds,
    MissingKernel,
    MissingPose,
    UnmappedClass,
)

VOID_ID = 0

# Class groups used by the morphology kernel table.
GROUP_TALL_STUFF = "tall_stuff"
GROUP_SHORT_STUFF = "short_stuff"
GROUP_VEGETATION = "vegetation"
GROUP_VEHICLE = "vehicle"
GROUP_PERSON = "person"
ALL_GROUPS = (
    GROUP_TALL_STUFF,
    GROUP_SHORT_STUFF,
    GROUP_VEGETATION,
    GROUP_VEHICLE,
    GROUP_PERSON,
)
THING_GROUPS = (GROUP_VEHICLE, GROUP_PERSON)


@dataclass(frozen=True)
class Category:
    name: str
    is_thing: bool


@dataclass
class CategoryTable:
    """class_id -> category, plus the reserved ids.

    Id 0 is void / outside the field of view.  ``occlusion_id`` names the
    stuff class used for cells hidden behind taller geometry.
    """

    categories: dict[int, Category]
    occlusion_id: int | None = None

    def __post_init__(self):
        if VOID_ID in self.categories:
            raise ValueError("class id 0 is reserved for void")
        if self.occlusion_id is not None and self.occlusion_id not in self.categories:
            raise ValueError("occlusion_id must appear in the category table")

    def is_thing(self, class_id: int) -> bool:
        return self.categories[class_id].is_thing

    def thing_ids(self) -> list[int]:
        return sorted(i for i, c in self.categories.items() if c.is_thing)

    def stuff_ids(self) -> list[int]:
        return sorted(i for i, c in self.categories.items() if not c.is_thing)

    def to_dict(self) -> dict:
        return {
            "occlusion_id": self.occlusion_id,
            "classes": {
                str(i): {"name": c.name, "is_thing": c.is_thing}
                for i, c in sorted(self.categories.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CategoryTable":
        cats = {
            int(i): Category(e["name"], bool(e["is_thing"]))
            for i, e in d["classes"].items()
        }
        return cls(cats, d.get("occlusion_id"))


@dataclass
class LabeledPointCloud:
    """Columnar point cloud with per-point semantics."""

    xyz: np.ndarray  # (N, 3) float
    class_id: np.ndarray  # (N,) uint16
    instance_id: np.ndarray  # (N,) uint16; 0 for stuff
    dynamic: np.ndarray  # (N,) bool
    frame: np.ndarray  # (N,) uint32

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        n = len(self.xyz)
        self.class_id = np.asarray(self.class_id, dtype=np.uint16).reshape(n)
        self.instance_id = np.asarray(self.instance_id, dtype=np.uint16).reshape(n)
        self.dynamic = np.asarray(self.dynamic, dtype=bool).reshape(n)
        self.frame = np.asarray(self.frame, dtype=np.uint32).reshape(n)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls) -> "LabeledPointCloud":
        return cls(np.zeros((0, 3)), [], [], [], [])

    @classmethod
    def concatenate(cls, clouds) -> "LabeledPointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.class_id for c in clouds]),
            np.concatenate([c.instance_id for c in clouds]),
            np.concatenate([c.dynamic for c in clouds]),
            np.concatenate([c.frame for c in clouds]),
        )

    def select(self, mask) -> "LabeledPointCloud":
        return LabeledPointCloud(
            self.xyz[mask],
            self.class_id[mask],
            self.instance_id[mask],
            self.dynamic[mask],
            self.frame[mask],
        )


@dataclass(frozen=True)
class EgoPose:
    """Rigid sensor-to-world transform for one frame."""

    frame: int
    matrix: np.ndarray  # (4, 4)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(4, 4)
        object.__setattr__(self, "matrix", m)
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValueError("bottom row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal within 1e-9")


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box; yaw rotates the footprint in the x-z plane."""

    center: np.ndarray  # (3,)
    dims: np.ndarray  # (length, width, height), length along local z
    yaw: float
    class_id: int
    instance_id: int
    frame: int

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        d = np.asarray(self.dims, dtype=float).reshape(3)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        if np.any(d <= 0):
            raise ValueError("box dimensions must be positive")
        if self.instance_id <= 0:
            raise ValueError("box instance_id must be positive")


@dataclass
class PanopticBevMap:
    """Per-cell (class_id, instance_index) raster plus its category table."""

    class_id: np.ndarray  # (H, W) uint16
    instance_index: np.ndarray  # (H, W) uint16
    categories: CategoryTable
    grid: BevGridSpec

    def __post_init__(self):
        self.class_id = np.asarray(self.class_id, dtype=np.uint16)
        self.instance_index = np.asarray(self.instance_index, dtype=np.uint16)
        if self.class_id.shape != self.grid.shape:
            raise ValueError("raster shape disagrees with grid spec")
        if self.class_id.shape != self.instance_index.shape:
            raise ValueError("class and instance rasters disagree")

    @classmethod
    def empty(cls, categories: CategoryTable, grid: BevGridSpec) -> "PanopticBevMap":
        shape = grid.shape
        return cls(
            np.zeros(shape, dtype=np.uint16),
            np.zeros(shape, dtype=np.uint16),
            categories,
            grid,
        )

    def copy(self) -> "PanopticBevMap":
        return PanopticBevMap(
            self.class_id.copy(), self.instance_index.copy(), self.categories, self.grid
        )


@dataclass
class HeightMap:
    """Per-cell maximum point height above ground; NaN where empty."""

    h: np.ndarray
    grid: BevGridSpec

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        if self.h.shape != self.grid.shape:
            raise ValueError("height raster shape disagrees with grid spec")

    def filled(self, ground: float = 0.0) -> np.ndarray:
        return np.where(np.isnan(self.h), ground, self.h)


@dataclass
class MorphKernelTable:
    """Per-group dilation/erosion kernel sides and the class-to-group map."""

    dilation: dict[str, int]
    erosion: dict[str, int]
    class_groups: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        for table in (self.dilation, self.erosion):
            for g, k in table.items():
                if k < 1 or k % 2 == 0:
                    raise ValueError(f"kernel for {g} must be odd and >= 1")

    def group_of(self, class_id: int) -> str:
        if class_id not in self.class_groups:
            raise MissingKernel(f"class {class_id} has no kernel group")
        return self.class_groups[class_id]

    def kernels_for(self, class_id: int) -> tuple[int, int]:
        g = self.group_of(class_id)
        return self.dilation[g], self.erosion[g]


# ---------------------------------------------------------------------------
# Stage 1: accumulation


def accumulate_static(
    clouds: list[LabeledPointCloud],
    poses: dict[int, EgoPose] | list[EgoPose],
    target_frame: int,
    window: int | None = None,
) -> LabeledPointCloud:
    """Motion-compensate static points into the target frame.

    Static points from every frame within ``window`` of the target are
    expressed in the target sensor frame via inv(E_target) @ E_frame;
    dynamic points pass through from the target frame only.
    """
    if not isinstance(poses, dict):
        poses = {p.frame: p for p in poses}
    if target_frame not in poses:
        raise MissingPose(f"no pose for target frame {target_frame}")
    inv_target = np.linalg.inv(poses[target_frame].matrix)

    parts = []
    for cloud in clouds:
        for f in np.unique(cloud.frame):
            f = int(f)
            if window is not None and abs(f - target_frame) > window:
                continue
            if f not in poses:
                raise MissingPose(f"no pose for frame {f}")
            sub = cloud.select(cloud.frame == f)
            keep = ~sub.dynamic if f != target_frame else np.ones(len(sub), bool)
            sub = sub.select(keep)
            if len(sub) == 0:
                continue
            t = inv_target @ poses[f].matrix
            xyz = sub.xyz @ t[:3, :3].T + t[:3, 3]
            parts.append(replace_xyz(sub, xyz))
    return LabeledPointCloud.concatenate(parts)


def replace_xyz(cloud: LabeledPointCloud, xyz: np.ndarray) -> LabeledPointCloud:
    return LabeledPointCloud(
        xyz, cloud.class_id, cloud.instance_id, cloud.dynamic, cloud.frame
    )


# ---------------------------------------------------------------------------
# Stage 2: orthographic projection


def project_orthographic(
    cloud: LabeledPointCloud,
    extr: CameraExtrinsics,
    grid: BevGridSpec,
    categories: CategoryTable,
) -> tuple[PanopticBevMap, HeightMap]:
    """Bin camera-frame points into BEV cells; the highest point labels the cell.

    Points are first aligned to the ground frame through the extrinsics,
    then binned by (x, z).  Out-of-grid points are dropped.  The height
    map records the per-cell maximum height above ground.
    """
    p_ground = (cloud.xyz - extr.translation) @ extr.rotation
    x, y, z = p_ground[:, 0], p_ground[:, 1], p_ground[:, 2]
    height = -y  # ground plane is y = 0, y points down

    col = np.floor((x - grid.x_min) / grid.resolution).astype(int)
    row = np.floor((grid.z_max - z) / grid.resolution).astype(int)
    ok = (col >= 0) & (col < grid.cells_x) & (row >= 0) & (row < grid.cells_z)

    out = PanopticBevMap.empty(categories, grid)
    hmap = np.full(grid.shape, np.nan)
    if ok.any():
        row, col, height = row[ok], col[ok], height[ok]
        cls = cloud.class_id[ok]
        inst = cloud.instance_id[ok]
        order = np.argsort(height, kind="stable")  # last write wins: highest point
        flat = row * grid.cells_x + col
        out.class_id.ravel()[flat[order]] = cls[order]
        out.instance_index.ravel()[flat[order]] = inst[order]
        hflat = np.full(grid.cells_x * grid.cells_z, -np.inf)
        np.maximum.at(hflat, flat, height)
        hmap = np.where(np.isinf(hflat), np.nan, hflat).reshape(grid.shape)
    return out, HeightMap(hmap, grid)


# ---------------------------------------------------------------------------
# Stage 3: densification


def _closing(mask: np.ndarray, dilate: int, erode: int) -> np.ndarray:
    d = ndimage.binary_dilation(mask, structure=np.ones((dilate, dilate), bool))
    # border_value=1 so regions touching the raster edge are not eroded away
    return ndimage.binary_erosion(
        d, structure=np.ones((erode, erode), bool), border_value=1
    )


def densify(sparse: PanopticBevMap, kernels: MorphKernelTable) -> PanopticBevMap:
    """Close each class mask morphologically and recomposite.

    Composite order: tall stuff, short stuff, things, vegetation last.
    Later classes never overwrite already-written pixels, so tree
    canopies only fill regions carrying no other label.  Thing classes
    are closed per instance so instance ids survive densification.
    """
    cats = sparse.categories
    present = sorted(int(c) for c in np.unique(sparse.class_id) if c != VOID_ID)
    for c in present:
        kernels.group_of(c)  # raises MissingKernel up front

    order_rank = {
        GROUP_TALL_STUFF: 0,
        GROUP_SHORT_STUFF: 1,
        GROUP_VEHICLE: 2,
        GROUP_PERSON: 2,
        GROUP_VEGETATION: 3,
    }
    present.sort(key=lambda c: (order_rank[kernels.group_of(c)], c))

    out = PanopticBevMap.empty(cats, sparse.grid)
    for c in present:
        dilate, erode = kernels.kernels_for(c)
        if cats.is_thing(c):
            for inst in np.unique(sparse.instance_index[sparse.class_id == c]):
                mask = (sparse.class_id == c) & (sparse.instance_index == inst)
                closed = _closing(mask, dilate, erode)
                write = closed & (out.class_id == VOID_ID)
                out.class_id[write] = c
                out.instance_index[write] = inst
        else:
            closed = _closing(sparse.class_id == c, dilate, erode)
            write = closed & (out.class_id == VOID_ID)
            out.class_id[write] = c
    return out


# ---------------------------------------------------------------------------
# Stage 3b: instance fusion


def box_footprint_mask(box: Box3D, grid: BevGridSpec) -> np.ndarray:
    """Cells whose centers fall inside the box's rotated rectangle footprint."""
    xm, zm = grid.center_mesh()
    dx = xm - box.center[0]
    dz = zm - box.center[2]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    local_x = c * dx - s * dz
    local_z = s * dx + c * dz
    length, width = box.dims[0], box.dims[1]
    return (np.abs(local_x) <= width / 2) & (np.abs(local_z) <= length / 2)


def fuse_instances(
    bev: PanopticBevMap,
    boxes: list[Box3D],
    grid: BevGridSpec,
) -> PanopticBevMap:
    """Stamp box footprints and assign per-frame instance indices.

    Boxes are rasterized nearest-first; a later (farther) box never
    overwrites a nearer one.  Thing-class pixels outside every footprint
    get connected-component instance indices continuing after the boxes.
    """
    out = bev.copy()
    out.instance_index[:] = 0
    cats = bev.categories

    boxes = sorted(boxes, key=lambda b: float(np.hypot(b.center[0], b.center[2])))
    claimed = np.zeros(grid.shape, dtype=bool)
    next_index = 1
    for box in boxes:
        mask = box_footprint_mask(box, grid) & ~claimed
        if not mask.any():
            next_index += 1  # index reserved even if the footprint is hidden
            continue
        out.class_id[mask] = box.class_id
        out.instance_index[mask] = next_index
        claimed |= mask
        next_index += 1

    # Dynamic points without a box: connected components per thing class.
    for c in cats.thing_ids():
        loose = (out.class_id == c) & ~claimed
        if not loose.any():
            continue
        labels, n = ndimage.label(loose)
        for k in range(1, n + 1):
            out.instance_index[labels == k] = next_index
            next_index += 1
    return out


# ---------------------------------------------------------------------------
# Stage 4: occlusion


def occlusion_mask(
    hmap: HeightMap,
    grid: BevGridSpec,
    camera_cell: tuple[int, int] | None = None,
    substeps: int = 4,
    n_rays: int = 16,
) -> np.ndarray:
    """Cells strictly lower than the running height maximum along the camera ray.

    For every cell, ``n_rays`` rays leave the camera cell center toward a
    subgrid of endpoints spread inside the cell, each walked with a
    deterministic DDA at ``substeps`` samples per cell so no crossed cell
    is skipped; the cell is occluded if a majority of rays find taller
    geometry in front of it.  The angular supersampling removes the
    aliasing a single center ray suffers at shadow boundaries.  Empty
    cells count as ground height 0.  A cell never occludes itself; the
    camera cell is never occluded.
    """
    h = hmap.filled(0.0)
    if camera_cell is None:
        camera_cell = grid.camera_cell()
    r0, c0 = camera_cell
    nrow, ncol = grid.shape

    side = int(round(np.sqrt(n_rays)))
    offs = ((np.arange(side) + 0.5) / side - 0.5) * 0.9
    jitters = [(a, b) for a in offs for b in offs]

    cell_r, cell_c = np.meshgrid(np.arange(nrow), np.arange(ncol), indexing="ij")
    cell_r = cell_r.ravel()
    cell_c = cell_c.ravel()
    n_steps = max(nrow, ncol) * substeps
    ts = np.arange(1, n_steps + 1) / n_steps
    votes = np.zeros(nrow * ncol, dtype=int)
    target_h = h[cell_r, cell_c]
    block = max(1, 2**22 // n_steps)  # bound transient memory
    for dr, dc in jitters:
        for lo in range(0, len(cell_r), block):
            sl = slice(lo, lo + block)
            br, bc = cell_r[sl], cell_c[sl]
            rs = np.rint(r0 + np.outer(br + dr - r0, ts)).astype(int)
            cs = np.rint(c0 + np.outer(bc + dc - c0, ts)).astype(int)
            heights = h[rs, cs]
            at_target = (rs == br[:, None]) & (cs == bc[:, None])
            heights = np.where(at_target, -np.inf, heights)
            run_max = np.maximum(heights.max(axis=1), h[r0, c0])
            votes[sl] += target_h[sl] < run_max
    occluded = (votes > len(jitters) // 2).reshape(nrow, ncol)
    occluded[r0, c0] = False
    return occluded


def relabel_occluded(
    bev: PanopticBevMap, occluded: np.ndarray
) -> PanopticBevMap:
    """Stamp the occlusion stuff class over occluded cells."""
    occ_id = bev.categories.occlusion_id
    if occ_id is None:
        raise ValueError("category table has no occlusion class")
    out = bev.copy()
    out.class_id[occluded] = occ_id
    out.instance_index[occluded] = 0
    return out


# ---------------------------------------------------------------------------
# Stage 5: field-of-view crop


def apply_fov_crop(
    bev: PanopticBevMap, mask: np.ndarray, crop: BevGridSpec | None = None
) -> PanopticBevMap:
    """Void cells outside the frustum mask, then crop to the target grid."""
    out = bev.copy()
    out.class_id[~mask] = VOID_ID
    out.instance_index[~mask] = 0
    if crop is None:
        return out
    grid = bev.grid
    res = grid.resolution
    if not np.isclose(crop.resolution, res):
        raise CropOutOfBounds("crop resolution differs from the source grid")
    row_off = int(round((grid.z_max - crop.z_max) / res))
    col_off = int(round((crop.x_min - grid.x_min) / res))
    if (
        row_off < 0
        or col_off < 0
        or row_off + crop.cells_z > grid.cells_z
        or col_off + crop.cells_x > grid.cells_x
    ):
        raise CropOutOfBounds("crop extends beyond the source grid")
    sl = (
        slice(row_off, row_off + crop.cells_z),
        slice(col_off, col_off + crop.cells_x),
    )
    return PanopticBevMap(
        out.class_id[sl].copy(), out.instance_index[sl].copy(), bev.categories, crop
    )


# ---------------------------------------------------------------------------
# Frontal-view vertical/flat masks


def fv_vertical_flat_masks(
    fv_labels: np.ndarray, grouping: dict[int, str], void_id: int = VOID_ID
) -> tuple[np.ndarray, np.ndarray]:
    """Split a FV class raster into disjoint vertical and flat masks."""
    fv_labels = np.asarray(fv_labels)
    present = {int(c) for c in np.unique(fv_labels)} - {void_id}
    missing = {c for c in present if grouping.get(c) not in ("vertical", "flat")}
    if missing:
        raise UnmappedClass(f"classes {sorted(missing)} lack a vertical/flat group")
    vertical = np.zeros(fv_labels.shape, dtype=bool)
    flat = np.zeros(fv_labels.shape, dtype=bool)
    for c in present:
        target = vertical if grouping[c] == "vertical" else flat
        target |= fv_labels == c
    return vertical, flat


# ---------------------------------------------------------------------------
# Full pipeline


@dataclass
class PipelineResult:
    bev: PanopticBevMap
    height: HeightMap
    occluded: np.ndarray | None


def run_pipeline(
    clouds: list[LabeledPointCloud],
    poses: dict[int, EgoPose],
    boxes: list[Box3D],
    target_frame: int,
    extr: CameraExtrinsics,
    grid: BevGridSpec,
    kernels: MorphKernelTable,
    categories: CategoryTable,
    fov: np.ndarray | None = None,
    crop: BevGridSpec | None = None,
    window: int | None = 50,
    occlusion: bool = True,
) -> PipelineResult:
    """Run accumulate, project, densify, fuse, occlude and crop for one frame."""
    cloud = accumulate_static(clouds, poses, target_frame, window=window)
    sparse, hmap = project_orthographic(cloud, extr, grid, categories)
    dense = densify(sparse, kernels)
    frame_boxes = [b for b in boxes if b.frame == target_frame]
    fused = fuse_instances(dense, frame_boxes, grid)
    occluded = None
    if occlusion:
        occluded = occlusion_mask(hmap, grid)
        fused = relabel_occluded(fused, occluded)
    if fov is None:
        fov = np.ones(grid.shape, dtype=bool)
    final = apply_fov_crop(fused, fov, crop)
    return PipelineResult(final, hmap, occluded)
