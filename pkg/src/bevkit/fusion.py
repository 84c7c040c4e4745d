"""Semantic/instance logit fusion, panoptic resolution and the panoptic loss.

Panoptic logits have one channel per stuff class followed by one channel
per surviving instance.  Fusion is additive: an instance channel carries
the instance mask logit plus the semantic logit of its thing class,
restricted to the instance box.  Resolution is a single per-pixel argmax
over the merged channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .errors import NoValidPixels, ShapeMismatch
from .labelgen import VOID_ID, CategoryTable, PanopticBevMap


@dataclass
class SemanticLogits:
    """(H, W, N_stuff + N_thing) logits; stuff channels first."""

    logits: np.ndarray
    stuff_ids: list[int]
    thing_ids: list[int]

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.ndim != 3:
            raise ValueError("semantic logits must be (H, W, C)")
        if self.logits.shape[2] != len(self.stuff_ids) + len(self.thing_ids):
            raise ValueError("channel count disagrees with the class lists")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    def thing_channel(self, class_id: int) -> int:
        return len(self.stuff_ids) + self.thing_ids.index(class_id)


@dataclass
class InstanceSet:
    """Per-instance masks, classes, confidences and axis-aligned boxes."""

    masks: np.ndarray  # (N, H, W) float mask logits (binary masks as 0/1)
    class_ids: np.ndarray  # (N,)
    scores: np.ndarray  # (N,) in [0, 1]
    boxes: np.ndarray  # (N, 4) as (r0, c0, r1, c1), half-open

    def __post_init__(self):
        self.masks = np.atleast_3d(np.asarray(self.masks, dtype=float))
        if self.masks.ndim != 3:
            self.masks = self.masks.reshape((0,) + self.masks.shape)
        self.class_ids = np.asarray(self.class_ids, dtype=int)
        self.scores = np.asarray(self.scores, dtype=float)
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.class_ids)

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "InstanceSet":
        return cls(np.zeros((0,) + shape), [], [], np.zeros((0, 4)))

    def select(self, idx) -> "InstanceSet":
        return InstanceSet(
            self.masks[idx], self.class_ids[idx], self.scores[idx], self.boxes[idx]
        )


@dataclass
class PanopticLogits:
    """(H, W, N_stuff + N_instance) merged logits with channel bookkeeping."""

    logits: np.ndarray
    stuff_ids: list[int]
    instance_class_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        expected = len(self.stuff_ids) + len(self.instance_class_ids)
        if self.logits.shape[2] != expected:
            raise ValueError("channel bookkeeping disagrees with logit shape")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @property
    def n_stuff(self) -> int:
        return len(self.stuff_ids)


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two (r0, c0, r1, c1) boxes."""
    r0 = max(a[0], b[0])
    c0 = max(a[1], b[1])
    r1 = min(a[2], b[2])
    c1 = min(a[3], b[3])
    inter = max(0.0, r1 - r0) * max(0.0, c1 - c0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def filter_instances(
    inst: InstanceSet, score_thr: float, nms_thr: float
) -> InstanceSet:
    """Drop low-confidence instances, then greedy box NMS by descending score."""
    if not (0 <= score_thr <= 1 and 0 <= nms_thr <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    keep = np.flatnonzero(inst.scores >= score_thr)
    keep = keep[np.argsort(-inst.scores[keep], kind="stable")]
    survivors: list[int] = []
    for i in keep:
        if all(box_iou(inst.boxes[i], inst.boxes[j]) <= nms_thr for j in survivors):
            survivors.append(int(i))
    return inst.select(survivors)


def merge_logits(sem: SemanticLogits, inst: InstanceSet) -> PanopticLogits:
    """Additive fusion of semantic and instance logits.

    Stuff channels are copied.  Instance channel j carries the instance
    mask logit plus the semantic logit of its thing class inside the
    instance box and zero logit outside it.
    """
    h, w, _ = sem.logits.shape
    if len(inst) and inst.masks.shape[1:] != (h, w):
        raise ShapeMismatch("instance masks disagree with semantic raster size")
    n_stuff = len(sem.stuff_ids)
    out = np.zeros((h, w, n_stuff + len(inst)))
    out[..., :n_stuff] = sem.logits[..., :n_stuff]
    for j in range(len(inst)):
        cid = int(inst.class_ids[j])
        chan = inst.masks[j] + sem.logits[..., sem.thing_channel(cid)]
        r0, c0, r1, c1 = inst.boxes[j]
        box_mask = np.zeros((h, w), dtype=bool)
        box_mask[
            max(0, int(np.floor(r0))) : min(h, int(np.ceil(r1))),
            max(0, int(np.floor(c0))) : min(w, int(np.ceil(c1))),
        ] = True
        out[..., n_stuff + j] = np.where(box_mask, chan, 0.0)
    return PanopticLogits(out, list(sem.stuff_ids), [int(c) for c in inst.class_ids])


def resolve_panoptic(
    pl: PanopticLogits,
    categories: CategoryTable,
    grid,
    min_segment_px: int = 16,
) -> PanopticBevMap:
    """Per-pixel argmax over merged logits, with small-segment suppression.

    Instance segments smaller than ``min_segment_px`` fall back to the
    per-pixel runner-up stuff channel, so no pixel is left unknown.
    """
    n_stuff = pl.n_stuff
    winner = np.argmax(pl.logits, axis=2)
    best_stuff = np.argmax(pl.logits[..., :n_stuff], axis=2)

    class_map = np.zeros(winner.shape, dtype=np.uint16)
    inst_map = np.zeros(winner.shape, dtype=np.uint16)
    for k, cid in enumerate(pl.stuff_ids):
        class_map[winner == k] = cid
    for j, cid in enumerate(pl.instance_class_ids):
        seg = winner == n_stuff + j
        if seg.sum() < min_segment_px:
            for k, scid in enumerate(pl.stuff_ids):
                sel = seg & (best_stuff == k)
                class_map[sel] = scid
            continue
        class_map[seg] = cid
        inst_map[seg] = j + 1
    return PanopticBevMap(class_map, inst_map, categories, grid)


def _target_channel_map(pl: PanopticLogits, gt: PanopticBevMap) -> np.ndarray:
    """Per-pixel target channel, -1 where the pixel is excluded.

    Ground-truth instances are matched to instance channels of the same
    class by Hungarian assignment on mask IoU.  Pixels of unmatched
    ground-truth instances are excluded: the merged logits carry no
    channel that could represent them.
    """
    n_stuff = pl.n_stuff
    target = np.full(gt.class_id.shape, -1, dtype=int)
    for k, cid in enumerate(pl.stuff_ids):
        target[gt.class_id == cid] = k

    gt_instances = [
        (int(c), int(i))
        for c, i in {
            (c, i)
            for c, i in zip(gt.class_id.ravel(), gt.instance_index.ravel())
            if c != VOID_ID and i > 0
        }
    ]
    if gt_instances and pl.instance_class_ids:
        iou = np.zeros((len(gt_instances), len(pl.instance_class_ids)))
        pred_masks = [
            np.argmax(pl.logits, axis=2) == n_stuff + j
            for j in range(len(pl.instance_class_ids))
        ]
        for a, (cid, idx) in enumerate(gt_instances):
            gmask = (gt.class_id == cid) & (gt.instance_index == idx)
            for b, pcid in enumerate(pl.instance_class_ids):
                if pcid != cid:
                    continue
                inter = np.logical_and(gmask, pred_masks[b]).sum()
                union = np.logical_or(gmask, pred_masks[b]).sum()
                iou[a, b] = inter / union if union else 0.0
        rows, cols = linear_sum_assignment(-iou)
        for a, b in zip(rows, cols):
            cid, idx = gt_instances[a]
            if pl.instance_class_ids[b] != cid:
                continue
            gmask = (gt.class_id == cid) & (gt.instance_index == idx)
            target[gmask] = n_stuff + b
    return target


def panoptic_cross_entropy(
    pl: PanopticLogits,
    gt: PanopticBevMap,
    weights: np.ndarray | None = None,
    return_grad: bool = False,
):
    """Weighted softmax cross-entropy of the merged logits against the map.

    Void pixels and unmatched ground-truth instances are excluded.  The
    loss is the mean over valid pixels of w * CE.  With return_grad the
    analytic gradient with respect to the logits is returned as well.
    """
    if pl.logits.shape[:2] != gt.class_id.shape:
        raise ShapeMismatch("logit raster and ground truth disagree")
    target = _target_channel_map(pl, gt)
    valid = target >= 0
    if not valid.any():
        raise NoValidPixels("no pixels contribute to the panoptic loss")

    logits = pl.logits
    lse = logsumexp(logits, axis=2)
    t = np.where(valid, target, 0)
    picked = np.take_along_axis(logits, t[..., None], axis=2)[..., 0]
    ce = lse - picked
    if weights is None:
        w = np.ones_like(ce)
    else:
        w = np.asarray(weights, dtype=float)
    n = int(valid.sum())
    loss = float(np.sum(np.where(valid, w * ce, 0.0)) / n)
    if not return_grad:
        return loss

    softmax = np.exp(logits - lse[..., None])
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=2)
    grad = (softmax - onehot) * (w * valid)[..., None] / n
    return loss, grad
