import numpy as np
import pytest

from bevkit.camera import BevGridSpec, CameraIntrinsics
from bevkit.errors import InvalidGrid, NonPositiveLambda, UnknownClass, ZeroFrequencyClass
from bevkit.weighting import (
    ClassFrequencyTable,
    S_MIN,
    SensitivityMap,
    boundary_blend_weights,
    class_weights,
    combine_weights,
    sensitivity_map,
    sensitivity_weight,
    weight_cap,
)

INTR = CameraIntrinsics(500, 500, 320, 240, 640, 480)
GRID = BevGridSpec.from_size(64, 64, 0.25)


def sensitivity_oracle(fx, fy, x, y, z):
    return np.sqrt(fx**2 * z**2 + (fx * x + fy * y) ** 2) / z**2


class TestSensitivity:
    def test_matches_pointwise_oracle(self):
        sm = sensitivity_map(INTR, GRID)
        x, z = GRID.cell_centers()
        for r in range(0, 64, 7):
            for c in range(0, 64, 7):
                assert np.isclose(
                    sm.s[r, c],
                    sensitivity_oracle(INTR.fx, INTR.fy, x[c], 0.0, z[r]),
                    rtol=1e-12,
                )

    def test_frozen_value(self):
        # oracle: sqrt(500^2 * 10^2 + (500 * 2)^2) / 10^2 = 50.99019513...
        sm = sensitivity_map(
            INTR, BevGridSpec(1, 1, 1.0, 1.5, 2.5, 9.5, 10.5)
        )
        assert np.isclose(sm.s[0, 0], 50.99019513592785, rtol=1e-12)

    def test_decreases_with_depth_on_axis(self):
        sm = sensitivity_map(INTR, GRID)
        x, _ = GRID.cell_centers()
        col = np.argmin(np.abs(x))
        # rows run far -> near, so sensitivity increases down the column
        assert np.all(np.diff(sm.s[:, col]) > 0)

    def test_on_axis_equals_fx_over_z(self):
        sm = sensitivity_map(INTR, BevGridSpec(1, 1, 1.0, -0.5, 0.5, 9.5, 10.5))
        assert np.isclose(sm.s[0, 0], INTR.fx / 10.0, rtol=1e-12)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(InvalidGrid):
            sensitivity_map(INTR, BevGridSpec(4, 4, 1.0, -2.0, 2.0, -1.0, 3.0))

    def test_plane_height_shifts_sensitivity(self):
        a = sensitivity_map(INTR, GRID, plane_height=0.0)
        b = sensitivity_map(INTR, GRID, plane_height=-1.0)
        assert not np.allclose(a.s, b.s)


class TestSensitivityWeight:
    def test_frozen_unit_sensitivity_weight(self):
        # oracle: 1 + 1/ln(1 + 10 * 1) = 1.4170323914...
        sm = SensitivityMap(np.array([[1.0]]), GRID)
        w = sensitivity_weight(sm, 10.0)
        assert np.isclose(w.w[0, 0], 1.0 + 1.0 / np.log(11.0), rtol=1e-12)
        assert np.isclose(w.w[0, 0], 1.4170323914242462, rtol=1e-10)

    def test_monotone_decreasing_in_sensitivity(self):
        s_vals = np.linspace(0.01, 100, 500)
        w = sensitivity_weight(SensitivityMap(s_vals[None, :], GRID)).w[0]
        assert np.all(np.diff(w) < 0)

    def test_weight_exceeds_one(self):
        sm = sensitivity_map(INTR, GRID)
        w = sensitivity_weight(sm)
        assert np.all(w.w > 1.0)

    def test_clamp_at_tiny_sensitivity(self):
        sm = SensitivityMap(np.array([[0.0, S_MIN / 10, S_MIN]]), GRID)
        w = sensitivity_weight(sm, 10.0)
        cap = weight_cap(10.0)
        assert np.isclose(w.w[0, 0], cap)
        assert np.isclose(w.w[0, 1], cap)
        assert w.w[0, 2] <= cap + 1e-12

    def test_nonpositive_lambda_rejected(self):
        sm = SensitivityMap(np.ones((2, 2)), GRID)
        with pytest.raises(NonPositiveLambda):
            sensitivity_weight(sm, 0.0)

    def test_lambda_scales_weight_down(self):
        sm = SensitivityMap(np.full((3, 3), 2.0), GRID)
        w10 = sensitivity_weight(sm, 10.0).w
        w100 = sensitivity_weight(sm, 100.0).w
        assert np.all(w100 < w10)


class TestClassWeights:
    def test_inverse_sqrt_frequency(self):
        table = ClassFrequencyTable({1: 0.64, 2: 0.04})
        w = class_weights(table)
        assert np.isclose(w[1], 1.25)  # 0.64 ** -0.5
        assert np.isclose(w[2], 5.0)  # 0.04 ** -0.5
        assert w[2] > w[1]

    def test_zero_frequency_rejected(self):
        with pytest.raises(ZeroFrequencyClass):
            class_weights(ClassFrequencyTable({1: 0.0}))

    def test_from_label_maps(self):
        lab = np.zeros((10, 10), dtype=int)
        lab[:8] = 1  # 80 px
        lab[8, :2] = 2  # 2 px, rare
        table = ClassFrequencyTable.from_label_maps(lab)
        assert np.isclose(table.frequency[1], 0.80)
        assert np.isclose(table.frequency[2], 0.02)
        assert table.infrequent == {2}
        # void pixels counted in the denominator only
        assert 0 not in table.frequency


def blend_oracle(labels, table, radius, void_id=0):
    """Brute-force O(N^2) L1 nearest-infrequent-pixel blend."""
    wc = class_weights(table)
    h, w_ = labels.shape
    infreq_px = [
        (r, c)
        for r in range(h)
        for c in range(w_)
        if labels[r, c] != void_id and labels[r, c] in table.infrequent
    ]
    out = np.ones((h, w_), dtype=float)
    for r in range(h):
        for c in range(w_):
            cid = labels[r, c]
            if cid == void_id:
                continue
            out[r, c] = wc[cid]
            if cid in table.infrequent or not infreq_px:
                continue
            best = min(
                (abs(r - ir) + abs(c - ic), ir, ic) for ir, ic in infreq_px
            )
            d = min(max(best[0] - 1, 0), radius)
            w_near = wc[labels[best[1], best[2]]]
            out[r, c] = ((radius - d) * w_near + d * wc[cid]) / radius
    return out


class TestBoundaryBlend:
    TABLE = ClassFrequencyTable({1: 0.64, 2: 0.04}, infrequent={2})

    def test_frozen_adjacent_pixel_value(self):
        # one infrequent pixel in a frequent field, radius 4:
        # adjacent pixel (d = 0) carries w_infreq = 5.0 exactly;
        # at chamfer distance 3 (d = 2): ((4-2)*5 + 2*1.25)/4 = 3.125
        labels = np.ones((9, 9), dtype=int)
        labels[4, 4] = 2
        w = boundary_blend_weights(labels, self.TABLE, radius=4).w
        assert np.isclose(w[4, 4], 5.0)
        assert np.isclose(w[4, 5], 5.0)  # d = 0
        assert np.isclose(w[4, 6], ((4 - 1) * 5.0 + 1 * 1.25) / 4)  # 4.0625
        assert np.isclose(w[4, 7], ((4 - 2) * 5.0 + 2 * 1.25) / 4)  # 3.125
        assert np.isclose(w[4, 8], ((4 - 3) * 5.0 + 3 * 1.25) / 4)  # 2.1875
        assert np.isclose(w[0, 0], 1.25)  # beyond the radius: plain w_freq

    def test_matches_bruteforce_oracle_random_maps(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            labels = rng.choice([0, 1, 2], size=(16, 16), p=[0.1, 0.7, 0.2])
            w = boundary_blend_weights(labels, self.TABLE, radius=5).w
            assert np.allclose(w, blend_oracle(labels, self.TABLE, 5))

    def test_void_pixels_weight_one(self):
        labels = np.ones((6, 6), dtype=int)
        labels[0, 0] = 0
        labels[3, 3] = 2
        w = boundary_blend_weights(labels, self.TABLE).w
        assert w[0, 0] == 1.0

    def test_all_frequent_map_is_flat(self):
        labels = np.ones((8, 8), dtype=int)
        w = boundary_blend_weights(labels, self.TABLE).w
        assert np.allclose(w, 1.25)

    def test_unknown_class_rejected(self):
        with pytest.raises(UnknownClass):
            boundary_blend_weights(np.full((4, 4), 9), self.TABLE)

    def test_continuity_step_bound(self):
        # adjacent-pixel weight jumps within the blend band are bounded by
        # the per-step blend increment plus the infrequent/frequent gap at
        # the region boundary itself
        rng = np.random.default_rng(11)
        radius = 5
        wc = class_weights(self.TABLE)
        step = abs(wc[2] - wc[1]) / radius
        for _ in range(5):
            labels = rng.choice([1, 2], size=(24, 24), p=[0.8, 0.2])
            w = boundary_blend_weights(labels, self.TABLE, radius=radius).w
            same = labels[:, 1:] == labels[:, :-1]
            jumps = np.abs(np.diff(w, axis=1))[same]
            assert jumps.max() <= 2 * step + 1e-9


class TestCombine:
    def test_product(self):
        a = np.full((4, 4), 2.0)
        b = np.full((4, 4), 3.0)
        w = combine_weights(WeightMapFixture(a), WeightMapFixture(b))
        assert np.allclose(w.w, 6.0)
        assert w.kind == "combined"

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            combine_weights(
                WeightMapFixture(np.ones((2, 2))), WeightMapFixture(np.ones((3, 3)))
            )


def WeightMapFixture(arr):
    from bevkit.weighting import WeightMap

    return WeightMap(arr, "class")
