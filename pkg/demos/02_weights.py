"""Sensitivity and class-frequency loss weighting, end to end.

Shows the distance-dependent sensitivity weight field (far cells, which a
camera resolves poorly, get larger training weights), the inverse-sqrt
class weights, and the linear boundary blend that keeps the combined
weight raster continuous across class edges.

Run:  python3 demos/02_weights.py
"""

import numpy as np

from bevkit.camera import BevGridSpec, CameraIntrinsics
from bevkit.weighting import (
    ClassFrequencyTable,
    boundary_blend_weights,
    class_weights,
    combine_weights,
    sensitivity_map,
    sensitivity_weight,
)

intr = CameraIntrinsics(fx=721.5377, fy=721.5377, cx=609.5593, cy=172.854,
                        width=1242, height=375)
grid = BevGridSpec.from_size(cells_z=128, cells_x=128, resolution=0.25)

smap = sensitivity_map(intr, grid)
wmap = sensitivity_weight(smap, lambda_s=10.0)
col = grid.shape[1] // 2
print("sensitivity weight along the optical axis (weight grows with range):")
for row in (120, 96, 64, 32, 4):
    z = grid.z_max - (row + 0.5) * grid.resolution
    print(f"  z = {z:5.1f} m   S = {smap.s[row, col]:8.2f}   "
          f"w = {wmap.w[row, col]:.4f}")

# Class weights from pixel frequencies: rare classes weigh more.
table = ClassFrequencyTable({1: 0.64, 2: 0.04}, infrequent={2})
wc = class_weights(table)
print(f"\nclass weights (f^-0.5): frequent {wc[1]:.3f}, rare {wc[2]:.3f}")

# Boundary blend: a rare blob inside a frequent background.
labels = np.ones((32, 32), dtype=np.uint16)
labels[12:20, 12:20] = 2
blend = boundary_blend_weights(labels, table, radius=6)
row = blend.w[16, :]
print("weight profile through the blob (row 16):")
print("  " + " ".join(f"{v:.2f}" for v in row[4:28]))
print(f"max adjacent jump: {np.abs(np.diff(row)).max():.4f} "
      f"(bound {(wc[2] - wc[1]) / 6:.4f})")

small = BevGridSpec.from_size(32, 32, 0.25)
combined = combine_weights(
    sensitivity_weight(sensitivity_map(intr, small), 10.0), blend
)
print(f"\ncombined (elementwise product) raster range: "
      f"[{combined.w.min():.3f}, {combined.w.max():.3f}]")
