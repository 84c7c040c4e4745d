import numpy as np
import pytest

from bevkit.camera import BevGridSpec
from bevkit.errors import NoValidPixels, ShapeMismatch
from bevkit.fusion import (
    InstanceSet,
    PanopticLogits,
    SemanticLogits,
    box_iou,
    filter_instances,
    merge_logits,
    panoptic_cross_entropy,
    resolve_panoptic,
)
from bevkit.labelgen import PanopticBevMap
from bevkit.synth import (
    CLASS_CAR,
    CLASS_ROAD,
    CLASS_TERRAIN,
    default_categories,
    oracle_finite_diff,
)

CATS = default_categories()
GRID = BevGridSpec.from_size(8, 8, 1.0)
STUFF = [CLASS_ROAD, CLASS_TERRAIN]
H = W = 8


def sem_logits(arr):
    return SemanticLogits(arr, STUFF, [CLASS_CAR])


def instance(mask_rows, score=0.9):
    mask = np.zeros((H, W))
    mask[mask_rows] = 4.0
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = [rows[0], cols[0], rows[-1] + 1, cols[-1] + 1]
    return mask, box, score


class TestBoxIoU:
    def test_known_values(self):
        a = np.array([0, 0, 4, 4])
        assert box_iou(a, a) == 1.0
        assert box_iou(a, np.array([4, 4, 8, 8])) == 0.0
        # 2x4 overlap over union 16 + 16 - 8 = 24
        assert np.isclose(box_iou(a, np.array([2, 0, 6, 4])), 8 / 24)


def nms_oracle(boxes, scores, score_thr, nms_thr):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if scores[i] < score_thr:
            continue
        if all(box_iou(boxes[i], boxes[j]) <= nms_thr for j in keep):
            keep.append(i)
    return sorted(keep)


class TestFilterInstances:
    def test_score_threshold(self):
        inst = InstanceSet(
            np.zeros((3, H, W)), [CLASS_CAR] * 3, [0.9, 0.05, 0.5],
            [[0, 0, 2, 2], [4, 4, 6, 6], [0, 4, 2, 6]],
        )
        out = filter_instances(inst, 0.1, 0.5)
        assert len(out) == 2
        assert 0.05 not in out.scores

    def test_nms_suppresses_overlap(self):
        inst = InstanceSet(
            np.zeros((2, H, W)), [CLASS_CAR] * 2, [0.9, 0.8],
            [[0, 0, 4, 4], [0, 1, 4, 5]],
        )
        out = filter_instances(inst, 0.0, 0.3)
        assert len(out) == 1
        assert out.scores[0] == 0.9

    def test_matches_bruteforce_nms_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            n = 8
            r0 = rng.uniform(0, 5, n)
            c0 = rng.uniform(0, 5, n)
            boxes = np.column_stack(
                [r0, c0, r0 + rng.uniform(1, 3, n), c0 + rng.uniform(1, 3, n)]
            )
            scores = np.round(rng.random(n), 3)
            inst = InstanceSet(np.zeros((n, H, W)), [CLASS_CAR] * n, scores, boxes)
            out = filter_instances(inst, 0.2, 0.4)
            keep = nms_oracle(boxes, scores, 0.2, 0.4)
            assert sorted(out.scores.tolist()) == sorted(scores[keep].tolist())


class TestMergeLogits:
    def test_additive_inside_box_zero_outside(self):
        sem = np.zeros((H, W, 3))
        sem[..., 2] = 1.5  # car semantic channel
        mask, box, score = instance(slice(2, 4))
        inst = InstanceSet(mask[None], [CLASS_CAR], [score], [box])
        pl = merge_logits(sem_logits(sem), inst)
        assert pl.logits.shape == (H, W, 3)
        # inside the box: mask logit + thing semantic logit
        assert np.allclose(pl.logits[2:4, :, 2], 4.0 + 1.5)
        # outside the box: exactly zero
        assert np.allclose(pl.logits[5:, :, 2], 0.0)

    def test_stuff_channels_copied(self):
        sem = np.arange(H * W * 3, dtype=float).reshape(H, W, 3)
        pl = merge_logits(sem_logits(sem), InstanceSet.empty((H, W)))
        assert np.array_equal(pl.logits, sem[..., :2])

    def test_shape_mismatch_rejected(self):
        inst = InstanceSet(np.zeros((1, 4, 4)), [CLASS_CAR], [0.5], [[0, 0, 2, 2]])
        with pytest.raises(ShapeMismatch):
            merge_logits(sem_logits(np.zeros((H, W, 3))), inst)


class TestResolvePanoptic:
    def make_logits(self):
        logits = np.zeros((H, W, 3))
        logits[..., 0] = 1.0  # road everywhere by default
        logits[1:4, 1:4, 2] = 5.0  # a 9-px car instance
        return PanopticLogits(logits, STUFF, [CLASS_CAR])

    def test_per_pixel_argmax_oracle(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(H, W, 2))
        pl = PanopticLogits(logits, STUFF, [])
        out = resolve_panoptic(pl, CATS, GRID, min_segment_px=0)
        for r in range(H):
            for c in range(W):
                expect = STUFF[int(np.argmax(logits[r, c]))]
                assert out.class_id[r, c] == expect

    def test_instance_segment_labeled(self):
        out = resolve_panoptic(self.make_logits(), CATS, GRID, min_segment_px=4)
        assert (out.class_id[1:4, 1:4] == CLASS_CAR).all()
        assert (out.instance_index[1:4, 1:4] == 1).all()
        assert out.class_id[0, 0] == CLASS_ROAD

    def test_small_segment_falls_back_to_stuff(self):
        pl = self.make_logits()
        out = resolve_panoptic(pl, CATS, GRID, min_segment_px=16)
        # 9 px < 16: the segment reverts to the runner-up stuff channel
        assert (out.class_id == CLASS_ROAD).all()
        assert not out.instance_index.any()

    def test_argmax_invariant_to_common_shift(self):
        pl = self.make_logits()
        shifted = PanopticLogits(pl.logits + 3.7, STUFF, [CLASS_CAR])
        a = resolve_panoptic(pl, CATS, GRID)
        b = resolve_panoptic(shifted, CATS, GRID)
        assert np.array_equal(a.class_id, b.class_id)
        assert np.array_equal(a.instance_index, b.instance_index)


def gt_map(class_id, instance_index=None):
    if instance_index is None:
        instance_index = np.zeros_like(class_id)
    return PanopticBevMap(class_id, instance_index, CATS, GRID)


class TestPanopticCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        # all-zero logits over C channels: CE = ln(C) exactly
        for c_count, stuff in [(2, STUFF), (3, STUFF)]:
            n_inst = c_count - len(stuff)
            pl = PanopticLogits(
                np.zeros((H, W, c_count)), stuff, [CLASS_CAR] * n_inst
            )
            gt = gt_map(np.full((H, W), CLASS_ROAD, dtype=np.uint16))
            loss = panoptic_cross_entropy(pl, gt)
            assert np.isclose(loss, np.log(c_count), rtol=1e-12)

    def test_confident_correct_prediction_loss_near_zero(self):
        logits = np.zeros((H, W, 2))
        logits[..., 0] = 50.0
        pl = PanopticLogits(logits, STUFF, [])
        gt = gt_map(np.full((H, W), CLASS_ROAD, dtype=np.uint16))
        assert panoptic_cross_entropy(pl, gt) < 1e-12

    def test_void_pixels_excluded(self):
        logits = np.zeros((H, W, 2))
        logits[..., 1] = 100.0  # catastrophically wrong where it counts
        pl = PanopticLogits(logits, STUFF, [])
        cls = np.zeros((H, W), dtype=np.uint16)
        cls[0, 0] = CLASS_ROAD
        loss_one = panoptic_cross_entropy(pl, gt_map(cls))
        # only the one valid pixel contributes; mean over valid = its CE
        assert np.isclose(loss_one, 100.0, rtol=1e-6)

    def test_all_void_raises(self):
        pl = PanopticLogits(np.zeros((H, W, 2)), STUFF, [])
        with pytest.raises(NoValidPixels):
            panoptic_cross_entropy(pl, gt_map(np.zeros((H, W), dtype=np.uint16)))

    def test_weights_scale_loss(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(H, W, 2))
        pl = PanopticLogits(logits, STUFF, [])
        gt = gt_map(np.full((H, W), CLASS_TERRAIN, dtype=np.uint16))
        base = panoptic_cross_entropy(pl, gt)
        doubled = panoptic_cross_entropy(pl, gt, weights=np.full((H, W), 2.0))
        assert np.isclose(doubled, 2 * base, rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(H, W, 3))
        cls = rng.choice([CLASS_ROAD, CLASS_TERRAIN, CLASS_CAR], (H, W)).astype(np.uint16)
        inst = np.where(cls == CLASS_CAR, 1, 0).astype(np.uint16)
        gt = gt_map(cls, inst)
        weights = rng.uniform(0.5, 2.0, (H, W))

        def loss_of(arr):
            pl = PanopticLogits(arr, STUFF, [CLASS_CAR])
            return panoptic_cross_entropy(pl, gt, weights=weights)

        pl = PanopticLogits(logits, STUFF, [CLASS_CAR])
        loss, grad = panoptic_cross_entropy(pl, gt, weights=weights, return_grad=True)
        numeric = oracle_finite_diff(loss_of, logits.copy(), h=1e-5)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert (np.abs(grad - numeric) / denom).max() < 1e-4

    def test_unmatched_gt_instance_excluded(self):
        # gt has a car but the logits carry no instance channel: those
        # pixels must not contribute
        pl = PanopticLogits(np.zeros((H, W, 2)), STUFF, [])
        cls = np.full((H, W), CLASS_ROAD, dtype=np.uint16)
        cls[0:2, 0:2] = CLASS_CAR
        inst = np.zeros((H, W), dtype=np.uint16)
        inst[0:2, 0:2] = 1
        loss = panoptic_cross_entropy(pl, gt_map(cls, inst))
        assert np.isclose(loss, np.log(2), rtol=1e-12)

    def test_instance_matching_is_iou_hungarian(self):
        # two gt cars, two instance channels whose argmax masks overlap them
        # crosswise with different IoU; matching must pick the max-IoU pairing
        logits = np.zeros((H, W, 4))
        logits[..., 0] = 1.0
        logits[0:3, 0:3, 2] = 5.0  # channel A: covers gt car 1 fully
        logits[5:8, 5:8, 3] = 5.0  # channel B: covers gt car 2 fully
        pl = PanopticLogits(logits, STUFF, [CLASS_CAR, CLASS_CAR])
        cls = np.full((H, W), CLASS_ROAD, dtype=np.uint16)
        inst = np.zeros((H, W), dtype=np.uint16)
        cls[0:3, 0:3] = CLASS_CAR
        inst[0:3, 0:3] = 1
        cls[5:8, 5:8] = CLASS_CAR
        inst[5:8, 5:8] = 2
        loss = panoptic_cross_entropy(pl, gt_map(cls, inst))
        # correct matching means the car pixels are confidently right;
        # mismatched channels would cost ~5 nats per car pixel
        assert loss < 1.0
