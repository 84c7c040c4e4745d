"""Pipeline configuration: presets, YAML config files and flag overrides.

Precedence is command-line flag > config file > preset default.  The
effective configuration serializes to a stable YAML document whose
SHA-256 is the run's config hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace

import yaml

from .camera import BevGridSpec
from .labelgen import (
    GROUP_PERSON,
    GROUP_SHORT_STUFF,
    GROUP_TALL_STUFF,
    GROUP_VEGETATION,
    GROUP_VEHICLE,
    MorphKernelTable,
)

SCHEMA_VERSION = 1

# Kernel sides shared by both dataset presets: dilation per group
# tall stuff / short stuff / vegetation / vehicles / persons = 3/9/9/9/7,
# erosion = 3/5/3/5/5.
PRESET_DILATION = {
    GROUP_TALL_STUFF: 3,
    GROUP_SHORT_STUFF: 9,
    GROUP_VEGETATION: 9,
    GROUP_VEHICLE: 9,
    GROUP_PERSON: 7,
}
PRESET_EROSION = {
    GROUP_TALL_STUFF: 3,
    GROUP_SHORT_STUFF: 5,
    GROUP_VEGETATION: 3,
    GROUP_VEHICLE: 5,
    GROUP_PERSON: 5,
}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a batch run needs, serializable and hashable."""

    preset: str = "custom"
    schema_version: int = SCHEMA_VERSION
    rig_path: str | None = None
    grid_cells_z: int = 64
    grid_cells_x: int = 64
    grid_resolution: float = 0.25
    grid_z_min: float = 0.0
    dilation: dict = field(default_factory=lambda: dict(PRESET_DILATION))
    erosion: dict = field(default_factory=lambda: dict(PRESET_EROSION))
    class_groups: dict = field(default_factory=dict)
    accumulation_window: int = 50
    occlusion: bool = True
    fov_crop: bool = True
    lambda_s: float = 10.0
    sensitivity_plane_height: float = 0.0
    blend_radius: int = 20
    score_threshold: float = 0.1
    nms_threshold: float = 0.3
    rpn_nms_threshold: float = 0.7
    min_segment_px: int = 16
    out_dir: str | None = None

    def grid(self) -> BevGridSpec:
        return BevGridSpec.from_size(
            self.grid_cells_z, self.grid_cells_x, self.grid_resolution, self.grid_z_min
        )

    def kernel_table(self, class_groups: dict[int, str] | None = None) -> MorphKernelTable:
        groups = class_groups or {int(k): v for k, v in self.class_groups.items()}
        return MorphKernelTable(dict(self.dilation), dict(self.erosion), groups)

    def effective_yaml(self) -> str:
        """Stable dump of the effective configuration."""
        d = asdict(self)
        return yaml.safe_dump(d, sort_keys=True, default_flow_style=False)

    def config_hash(self) -> str:
        # out_dir is a run-placement detail, not part of the configuration
        # identity; two runs with the same parameters must hash alike.
        d = asdict(self)
        d.pop("out_dir")
        doc = yaml.safe_dump(d, sort_keys=True, default_flow_style=False)
        return hashlib.sha256(doc.encode()).hexdigest()

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)


def preset(name: str) -> PipelineConfig:
    """Named dataset presets; raster sizes are rows (depth) x cols (lateral)."""
    if name == "kitti360":
        return PipelineConfig(
            preset="kitti360",
            grid_cells_z=768,
            grid_cells_x=704,
            grid_resolution=0.074,
            score_threshold=0.1,
            nms_threshold=0.3,
            rpn_nms_threshold=0.7,
        )
    if name == "nuscenes":
        return PipelineConfig(
            preset="nuscenes",
            grid_cells_z=896,
            grid_cells_x=768,
            grid_resolution=0.077,
            score_threshold=0.3,
            nms_threshold=0.2,
            rpn_nms_threshold=0.7,
        )
    if name == "custom":
        return PipelineConfig()
    raise ValueError(f"unknown preset {name!r}")


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Layer a YAML config file over a preset (or the custom defaults)."""
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema version {version}")
    if base is None:
        base = preset(doc.pop("preset", "custom"))
    else:
        doc.pop("preset", None)
    unknown = set(doc) - set(base.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return replace(base, **doc)
