"""Loss-weight maps: distance sensitivity and class-frequency weighting.

Two weighting schemes live here.  The sensitivity scheme measures how
far a frontal-view pixel moves when its BEV cell is displaced by one
meter; far cells move little and therefore receive a larger weight.
The class scheme counters class imbalance with inverse-square-root
frequency weights, linearly blended across a band around infrequent
class boundaries so the weight field stays continuous.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_cdt

from .camera import BevGridSpec, CameraIntrinsics
from .errors import (
    InvalidGrid,
    NonPositiveLambda,
    UnknownClass,
    ZeroFrequencyClass,
)

DEFAULT_LAMBDA = 10.0
DEFAULT_BLEND_RADIUS = 20
# Floor on the sensitivity used for the weight clamp; keeps weights bounded
# for cells where the sensitivity vanishes.
S_MIN = 1e-6


@dataclass(frozen=True)
class SensitivityMap:
    """Per-cell FV-pixel displacement per meter of BEV displacement (px/m)."""

    s: np.ndarray
    grid: BevGridSpec

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        object.__setattr__(self, "s", s)
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("sensitivity must be finite and nonnegative")


@dataclass(frozen=True)
class WeightMap:
    """Positive per-pixel loss weights; kind is sensitivity, class or combined."""

    w: np.ndarray
    kind: str
    grid: BevGridSpec | None = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "w", w)
        if self.kind not in ("sensitivity", "class", "combined"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and positive")


@dataclass
class ClassFrequencyTable:
    """Relative pixel frequencies and the derived per-class weights."""

    frequency: dict[int, float]
    infrequent: set[int] = field(default_factory=set)

    def __post_init__(self):
        total = sum(self.frequency.values())
        if total > 1 + 1e-9:
            raise ValueError("frequencies must sum to <= 1")

    @classmethod
    def from_label_maps(
        cls, labels, infrequent_threshold: float = 0.05, void_id: int = 0
    ) -> "ClassFrequencyTable":
        """Tally frequencies over one or more class rasters.

        Classes rarer than ``infrequent_threshold`` are flagged infrequent.
        Void pixels count toward the denominator but get no entry, so
        frequencies may sum to less than one.
        """
        if isinstance(labels, np.ndarray):
            labels = [labels]
        counts: dict[int, int] = {}
        total = 0
        for lab in labels:
            ids, n = np.unique(np.asarray(lab), return_counts=True)
            total += int(np.asarray(lab).size)
            for i, c in zip(ids, n):
                if i != void_id:
                    counts[int(i)] = counts.get(int(i), 0) + int(c)
        freq = {i: c / total for i, c in counts.items()}
        infreq = {i for i, f in freq.items() if f < infrequent_threshold}
        return cls(freq, infreq)


def sensitivity_map(
    intr: CameraIntrinsics, grid: BevGridSpec, plane_height: float = 0.0
) -> SensitivityMap:
    """Sensitivity S = sqrt(fx^2 z^2 + (fx x + fy y)^2) / z^2 at cell centers.

    ``plane_height`` is the fixed y at which the gradient of the
    projection is evaluated; the orthographic constraint zeroes the dy
    component.  Raises InvalidGrid if any cell center has z <= 0.
    """
    xm, zm = grid.center_mesh()
    if np.any(zm <= 0):
        raise InvalidGrid("all BEV cells must have z > 0")
    y = plane_height
    s = np.sqrt(intr.fx**2 * zm**2 + (intr.fx * xm + intr.fy * y) ** 2) / zm**2
    return SensitivityMap(s, grid)


def weight_cap(lambda_s: float = DEFAULT_LAMBDA) -> float:
    """Upper clamp for sensitivity weights, evaluated at S = S_MIN."""
    return 1.0 + 1.0 / np.log1p(lambda_s * S_MIN)


def sensitivity_weight(
    s: SensitivityMap, lambda_s: float = DEFAULT_LAMBDA
) -> WeightMap:
    """Map sensitivity to loss weights: w = 1 + 1/log(1 + lambda_s * S).

    The log is natural.  Cells with near-zero sensitivity are clamped to
    weight_cap(lambda_s) instead of diverging.
    """
    if lambda_s <= 0:
        raise NonPositiveLambda("lambda_s must be positive")
    denom = np.log1p(lambda_s * s.s)
    eps = np.log1p(lambda_s * S_MIN)
    cap = weight_cap(lambda_s)
    with np.errstate(divide="ignore"):
        w = np.where(denom < eps, cap, 1.0 + 1.0 / denom)
    return WeightMap(w, "sensitivity", s.grid)


def class_weights(table: ClassFrequencyTable) -> dict[int, float]:
    """Per-class weight = frequency ** -0.5."""
    out = {}
    for cid, f in table.frequency.items():
        if f <= 0:
            raise ZeroFrequencyClass(f"class {cid} has zero frequency")
        out[cid] = f ** -0.5
    return out


def boundary_blend_weights(
    labels: np.ndarray,
    table: ClassFrequencyTable,
    radius: int = DEFAULT_BLEND_RADIUS,
    void_id: int = 0,
) -> WeightMap:
    """Class-weight raster with a linear blend around infrequent classes.

    Infrequent-class pixels carry their own weight.  A frequent pixel at
    L1 distance d from the nearest infrequent pixel (d = 0 for a pixel
    directly adjacent) carries ((radius - d) * w_infreq + d * w_freq) /
    radius for d <= radius and w_freq beyond.  Distances come from an
    exact two-pass L1 chamfer transform.  Void pixels get weight 1.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    labels = np.asarray(labels)
    present = {int(c) for c in np.unique(labels)} - {void_id}
    missing = present - set(table.frequency)
    if missing:
        raise UnknownClass(f"classes {sorted(missing)} missing from table")
    wc = class_weights(table)

    w = np.ones(labels.shape, dtype=float)
    for cid in present:
        w[labels == cid] = wc[cid]

    infreq_mask = np.isin(labels, sorted(present & table.infrequent))
    freq_mask = np.isin(labels, sorted(present - table.infrequent))
    if not infreq_mask.any() or not freq_mask.any():
        return WeightMap(w, "class")

    dist, (ir, ic) = distance_transform_cdt(
        ~infreq_mask, metric="taxicab", return_indices=True
    )
    # d = 0 at the first frequent pixel adjacent to the infrequent set.
    d = np.clip(dist - 1, 0, radius).astype(float)
    w_near = w[ir, ic]  # weight of the nearest infrequent pixel
    blend = ((radius - d) * w_near + d * w) / radius
    w = np.where(freq_mask, blend, w)
    return WeightMap(w, "class")


def combine_weights(a: WeightMap, b: WeightMap) -> WeightMap:
    """Pixel-wise product of two weight maps."""
    if a.w.shape != b.w.shape:
        raise ValueError("weight map shapes differ")
    return WeightMap(a.w * b.w, "combined", a.grid or b.grid)
