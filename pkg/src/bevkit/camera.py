"""Pinhole projection, IPM homography and BEV/FV warping.

Coordinate conventions
======================
Camera frame (right-handed, standard computer vision):
  - x: right, y: down, z: forward (optical axis).
  - Only points with z > 0 are in front of the camera.

Ground frame:
  - Origin on the ground plane directly below the camera optical center.
  - x: right, y: down, z: forward.  Ground plane is y = 0, so the camera
    sits at y = -camera_height.  A ground point (x, 0, z) maps to
    (x, camera_height, z) in the camera frame for the canonical rig.

BEV raster:
  - Row 0 is the far edge (z = z_max), the last row is the near edge.
  - Column 0 is x = x_min.  The camera projects to the bottom-center
    cell when x_min = -x_max and z_min = 0.
  - Continuous raster coordinates place the center of pixel (i, j) at
    (row=i, col=j), matching scipy.ndimage.map_coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import DegenerateConfiguration, NonPositiveDepth, ShapeMismatch

_DET_EPS = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class CameraExtrinsics:
    """Rigid pose of the camera relative to the ground frame.

    ``rotation`` and ``translation`` map ground-frame points into the
    camera frame: p_cam = R @ p_ground + t.
    """

    rotation: np.ndarray
    translation: np.ndarray
    camera_height: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal within 1e-9")
        if self.camera_height <= 0:
            raise ValueError("camera_height must be positive")

    @classmethod
    def level(cls, camera_height: float) -> "CameraExtrinsics":
        """Canonical rig: level camera at the given height above ground."""
        return cls(np.eye(3), np.array([0.0, camera_height, 0.0]), camera_height)


@dataclass(frozen=True)
class BevGridSpec:
    """BEV raster geometry: metric extents plus cell resolution."""

    cells_x: int
    cells_z: int
    resolution: float
    x_min: float
    x_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not np.isclose((self.x_max - self.x_min) / self.resolution, self.cells_x):
            raise ValueError("x extent inconsistent with cells_x")
        if not np.isclose((self.z_max - self.z_min) / self.resolution, self.cells_z):
            raise ValueError("z extent inconsistent with cells_z")

    @classmethod
    def from_size(
        cls, cells_z: int, cells_x: int, resolution: float, z_min: float = 0.0
    ) -> "BevGridSpec":
        """Grid with the camera at the bottom-center column."""
        half = cells_x * resolution / 2.0
        return cls(
            cells_x=cells_x,
            cells_z=cells_z,
            resolution=resolution,
            x_min=-half,
            x_max=half,
            z_min=z_min,
            z_max=z_min + cells_z * resolution,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.cells_z, self.cells_x)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, z) metric coordinates of cell centers.

        Returns ``x`` of shape (cells_x,) and ``z`` of shape (cells_z,),
        with z ordered from far (row 0) to near (last row).
        """
        x = self.x_min + (np.arange(self.cells_x) + 0.5) * self.resolution
        z = self.z_max - (np.arange(self.cells_z) + 0.5) * self.resolution
        return x, z

    def center_mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (cells_z, cells_x) meshes of cell-center x and z."""
        x, z = self.cell_centers()
        xm, zm = np.meshgrid(x, z)
        return xm, zm

    def col_of_x(self, x):
        return (np.asarray(x, dtype=float) - self.x_min) / self.resolution - 0.5

    def row_of_z(self, z):
        return (self.z_max - np.asarray(z, dtype=float)) / self.resolution - 0.5

    def camera_cell(self) -> tuple[int, int]:
        """Raster cell closest to the camera footprint (x=0, z=0)."""
        col = int(np.clip(np.floor((0.0 - self.x_min) / self.resolution), 0, self.cells_x - 1))
        row = int(np.clip(np.floor((self.z_max - 0.0) / self.resolution), 0, self.cells_z - 1))
        return row, col

    def to_dict(self) -> dict:
        return {
            "cells_x": self.cells_x,
            "cells_z": self.cells_z,
            "resolution": self.resolution,
            "x_min": self.x_min,
            "x_max": self.x_max,
            "z_min": self.z_min,
            "z_max": self.z_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BevGridSpec":
        return cls(**{k: d[k] for k in (
            "cells_x", "cells_z", "resolution", "x_min", "x_max", "z_min", "z_max")})


@dataclass(frozen=True)
class Homography:
    """Projectively normalized, invertible 3x3 map."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(m)) or not np.any(m):
            raise DegenerateConfiguration("homography entries must be finite")
        if abs(m[2, 2]) > _DET_EPS:
            m = m / m[2, 2]
        else:
            m = m / np.linalg.norm(m)
        object.__setattr__(self, "m", m)
        if abs(np.linalg.det(m)) <= _DET_EPS:
            raise DegenerateConfiguration("homography is singular")

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Apply to an (N, 2) array of points, returning (N, 2)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        h = np.column_stack([pts, np.ones(len(pts))]) @ self.m.T
        return h[:, :2] / h[:, 2:3]


def project_point(intr: CameraIntrinsics, p) -> np.ndarray:
    """Project camera-frame points onto the image plane.

    ``p`` is a length-3 point or an (N, 3) array.  Raises
    NonPositiveDepth if any point has z <= 0.  Results may fall outside
    the image bounds; the caller decides clipping.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(p[:, 2] <= 0):
        raise NonPositiveDepth("projection requires z > 0")
    u = intr.fx * p[:, 0] / p[:, 2] + intr.cx
    v = intr.fy * p[:, 1] / p[:, 2] + intr.cy
    uv = np.column_stack([u, v])
    return uv[0] if single else uv


def ipm_homography(
    intr: CameraIntrinsics, extr: CameraExtrinsics, grid: BevGridSpec
) -> Homography:
    """Homography mapping FV pixels to BEV raster coordinates.

    Built analytically from K [r1 r3 t] restricted to the ground plane
    (y_ground = 0), composed with the metric-to-raster affine map of the
    grid.  A ground point projected through the camera and then through
    this homography lands exactly on its orthographic BEV cell.
    """
    r = extr.rotation
    g = intr.k_matrix @ np.column_stack([r[:, 0], r[:, 2], extr.translation])
    if abs(np.linalg.det(g)) <= _DET_EPS * max(1.0, np.abs(g).max()) ** 3:
        raise DegenerateConfiguration("camera is parallel to the ground plane")
    res = grid.resolution
    affine = np.array(
        [
            [1.0 / res, 0.0, -grid.x_min / res - 0.5],
            [0.0, -1.0 / res, grid.z_max / res - 0.5],
            [0.0, 0.0, 1.0],
        ]
    )
    return Homography(affine @ np.linalg.inv(g))


def _warp(image: np.ndarray, matrix: np.ndarray, out_shape, interpolation: str):
    """Inverse-mapping warp: output pixel (r, c) samples source at matrix @ (c, r, 1)."""
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    order = 1 if interpolation == "bilinear" else 0
    rows, cols = np.meshgrid(
        np.arange(out_shape[0], dtype=float),
        np.arange(out_shape[1], dtype=float),
        indexing="ij",
    )
    ones = np.ones_like(rows)
    src = np.einsum("ij,jrc->irc", matrix, np.stack([cols, rows, ones]))
    with np.errstate(divide="ignore", invalid="ignore"):
        sc = src[0] / src[2]
        sr = src[1] / src[2]
    bad = ~np.isfinite(sc) | ~np.isfinite(sr)
    # The homogeneous scale changes sign across the mapped horizon line and
    # its overall sign is arbitrary, so anchor the valid side at the output
    # pixel that maps to the source center; the far side wraps around
    # projectively and must not be sampled.
    center = np.linalg.solve(
        matrix, [image.shape[1] / 2.0, image.shape[0] / 2.0, 1.0]
    )
    if abs(center[2]) > 1e-12:
        bad |= np.sign(src[2]) != np.sign(center[2])
    sc = np.where(bad, -1e9, sc)
    sr = np.where(bad, -1e9, sr)
    if image.ndim == 2:
        return map_coordinates(image.astype(float), [sr, sc], order=order, cval=0.0)
    out = np.empty(out_shape + (image.shape[2],))
    for k in range(image.shape[2]):
        out[..., k] = map_coordinates(
            image[..., k].astype(float), [sr, sc], order=order, cval=0.0
        )
    return out


def warp_fv_to_bev(
    image: np.ndarray,
    h: Homography,
    grid: BevGridSpec,
    interpolation: str = "bilinear",
) -> np.ndarray:
    """Warp a frontal-view image onto the BEV raster.

    Out-of-source samples are zero-filled.  Use nearest interpolation
    for label maps; labels must never be blended.
    """
    return _warp(np.asarray(image), h.inverse().m, grid.shape, interpolation)


def warp_bev_to_fv(
    image: np.ndarray,
    h: Homography,
    intr: CameraIntrinsics,
    interpolation: str = "bilinear",
) -> np.ndarray:
    """Warp a BEV raster back into the frontal view via the inverse map."""
    return _warp(np.asarray(image), h.m, (intr.height, intr.width), interpolation)


def polar_resample_grid(
    intr: CameraIntrinsics,
    grid: BevGridSpec,
    src_width: int | None = None,
    src_height: int | None = None,
) -> np.ndarray:
    """Sampling grid that undoes perspective column distortion.

    For each BEV cell the source column is the perspective projection of
    the cell center, u = fx*x/z + cx, rescaled to the source feature
    width; rows map linearly in z.  Returns (cells_z, cells_x, 2) of
    (row, col) source coordinates.  Cells at z <= 0 map off-source.
    """
    if src_width is None:
        src_width = intr.width
    if src_height is None:
        src_height = grid.cells_z
    xm, zm = grid.center_mesh()
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * xm / zm + intr.cx
    col = u * (src_width / intr.width)
    col = np.where(zm > 0, col, -1.0)
    row = (grid.z_max - zm) / (grid.z_max - grid.z_min) * src_height - 0.5
    return np.stack([row, col], axis=-1)


def fov_mask(intr: CameraIntrinsics, grid: BevGridSpec) -> np.ndarray:
    """Boolean mask of BEV cells whose centers fall inside the camera frustum.

    A cell is kept iff its center projects to a column 0 <= u < width at
    positive depth.  For cx = width/2 the kept region is a symmetric wedge.
    """
    xm, zm = grid.center_mesh()
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * xm / zm + intr.cx
    return (zm > 0) & (u >= 0) & (u < intr.width)


def load_camera_rig(path) -> tuple[CameraIntrinsics, CameraExtrinsics]:
    """Load a camera rig from the JSON rig document."""
    with open(path) as f:
        d = json.load(f)
    intr = CameraIntrinsics(
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
        width=d["width"], height=d["height"],
    )
    extr = CameraExtrinsics(
        rotation=np.array(d["rotation"], dtype=float).reshape(3, 3),
        translation=np.array(d["translation"], dtype=float),
        camera_height=d["camera_height"],
    )
    return intr, extr


def save_camera_rig(path, intr: CameraIntrinsics, extr: CameraExtrinsics) -> None:
    d = {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
        "rotation": [float(v) for v in extr.rotation.ravel()],
        "translation": [float(v) for v in extr.translation],
        "camera_height": extr.camera_height,
    }
    with open(path, "w") as f:
        json.dump(d, f, indent=2)
