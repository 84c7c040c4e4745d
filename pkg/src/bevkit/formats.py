"""On-disk formats: point clouds, poses, boxes, label maps, float rasters.

All binary formats are little-endian and self-describing so artifacts
round-trip across machines.  Label maps are stored as 16-bit PNG with
pixel = class_id * 1000 + instance_index plus a JSON sidecar carrying
the category table, grid spec and pipeline config hash.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import BevGridSpec

POINT_MAGIC = b"BEVPC\x00\x00\x01"  # 8 bytes: name + version
RASTER_MAGIC = b"BEVFR\x00\x00\x01"
INSTANCE_ENCODING = 1000  # pixel = class_id * INSTANCE_ENCODING + instance

POINT_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("class_id", "<u2"),
        ("instance_id", "<u2"),
        ("frame", "<u4"),
        ("dynamic", "u1"),
        ("pad", "u1"),
    ]
)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via temp file + rename so interrupted runs never leave torn files."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Point clouds


def write_point_cloud(path, xyz, class_id, instance_id, frame, dynamic) -> None:
    n = len(xyz)
    rec = np.zeros(n, dtype=POINT_DTYPE)
    xyz = np.asarray(xyz, dtype=float)
    rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rec["class_id"] = class_id
    rec["instance_id"] = instance_id
    rec["frame"] = frame
    rec["dynamic"] = np.asarray(dynamic).astype("u1")
    header = POINT_MAGIC + struct.pack("<II", 1, n)
    atomic_write_bytes(path, header + rec.tobytes())


def read_point_cloud(path):
    """Read the binary record format (or CSV fallback by extension).

    Returns (xyz, class_id, instance_id, frame, dynamic) arrays.
    """
    path = Path(path)
    if path.suffix == ".csv":
        data = np.genfromtxt(path, delimiter=",", names=True)
        data = np.atleast_1d(data)
        xyz = np.column_stack([data["x"], data["y"], data["z"]])
        return (
            xyz,
            data["class_id"].astype(np.uint16),
            data["instance_id"].astype(np.uint16),
            data["frame"].astype(np.uint32),
            data["dynamic"].astype(bool),
        )
    raw = path.read_bytes()
    if raw[:8] != POINT_MAGIC:
        raise ValueError(f"{path}: bad point-cloud magic")
    _version, n = struct.unpack("<II", raw[8:16])
    rec = np.frombuffer(raw[16:], dtype=POINT_DTYPE, count=n)
    xyz = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(float)
    return (
        xyz,
        rec["class_id"].copy(),
        rec["instance_id"].copy(),
        rec["frame"].copy(),
        rec["dynamic"].astype(bool),
    )


def write_point_cloud_csv(path, xyz, class_id, instance_id, frame, dynamic) -> None:
    lines = ["x,y,z,class_id,instance_id,frame,dynamic"]
    xyz = np.asarray(xyz, dtype=float)
    for i in range(len(xyz)):
        lines.append(
            f"{float(xyz[i, 0])!r},{float(xyz[i, 1])!r},{float(xyz[i, 2])!r},"
            f"{int(class_id[i])},{int(instance_id[i])},{int(frame[i])},{int(dynamic[i])}"
        )
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# Poses and boxes


def write_poses(path, poses: dict[int, np.ndarray]) -> None:
    doc = [
        {"frame": int(f), "matrix": [float(v) for v in np.asarray(m).ravel()]}
        for f, m in sorted(poses.items())
    ]
    atomic_write_bytes(path, json.dumps(doc, indent=2).encode())


def read_poses(path) -> dict[int, np.ndarray]:
    with open(path) as f:
        doc = json.load(f)
    return {int(e["frame"]): np.array(e["matrix"], dtype=float).reshape(4, 4) for e in doc}


def write_boxes(path, boxes: list[dict]) -> None:
    atomic_write_bytes(path, json.dumps(boxes, indent=2).encode())


def read_boxes(path) -> list[dict]:
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Label maps


def write_label_map(path, class_id, instance_index, sidecar: dict) -> None:
    """16-bit PNG + JSON sidecar. Sidecar keys: categories, grid, config_hash."""
    class_id = np.asarray(class_id, dtype=np.uint32)
    instance_index = np.asarray(instance_index, dtype=np.uint32)
    if np.any(instance_index >= INSTANCE_ENCODING):
        raise ValueError("instance index overflows the pixel encoding")
    enc = (class_id * INSTANCE_ENCODING + instance_index).astype(np.uint16)
    img = Image.fromarray(enc)
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
    atomic_write_bytes(
        Path(path).with_suffix(".json"), json.dumps(sidecar, indent=2, sort_keys=True).encode()
    )


def read_label_map(path):
    """Returns (class_id, instance_index, sidecar)."""
    img = Image.open(path)
    enc = np.asarray(img, dtype=np.uint16).astype(np.uint32)
    sidecar_path = Path(path).with_suffix(".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return (
        (enc // INSTANCE_ENCODING).astype(np.uint16),
        (enc % INSTANCE_ENCODING).astype(np.uint16),
        sidecar,
    )


# ---------------------------------------------------------------------------
# Float rasters


def write_float_raster(path, array: np.ndarray, header: dict) -> None:
    """32-bit float raster: magic, u32 header length, JSON header, raw data."""
    array = np.ascontiguousarray(array, dtype="<f4")
    header = dict(header)
    header["shape"] = list(array.shape)
    hjson = json.dumps(header, sort_keys=True).encode()
    atomic_write_bytes(
        path, RASTER_MAGIC + struct.pack("<I", len(hjson)) + hjson + array.tobytes()
    )


def read_float_raster(path):
    """Returns (array, header)."""
    raw = Path(path).read_bytes()
    if raw[:8] != RASTER_MAGIC:
        raise ValueError(f"{path}: bad raster magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode())
    arr = np.frombuffer(raw[12 + hlen :], dtype="<f4").reshape(header["shape"])
    return arr.astype(float), header


def write_heatmap_png(path, array: np.ndarray) -> None:
    """8-bit grayscale preview of a scalar raster, min-max normalized."""
    a = np.asarray(array, dtype=float)
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    img = Image.fromarray((scaled * 255).astype(np.uint8), mode="L")
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def grid_to_sidecar(grid: BevGridSpec) -> dict:
    return grid.to_dict()
