"""Panoptic quality (PQ/SQ/RQ), semantic mIoU, and comparison maps.

Matching follows the standard panoptic quality definition: segments of
the same class match when their IoU exceeds 0.5, which makes the match
unique without an assignment step.  Void (class 0) is excluded from all
tallies; predicted segments that mostly cover void ground truth are not
counted as false positives.  The occlusion class is scored as ordinary
stuff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch
from .labelgen import VOID_ID, PanopticBevMap

# A predicted segment overlapping ground-truth void by more than this
# fraction of its area is ignored rather than counted as a false positive.
VOID_OVERLAP_LIMIT = 0.5

IMPROVEMENT_NONE = 0
IMPROVEMENT_GREEN = 1  # baseline wrong, candidate right
IMPROVEMENT_BLUE = 2  # candidate wrong, baseline right
IMPROVEMENT_RED = 3  # both wrong

IMPROVEMENT_COLORS = {
    IMPROVEMENT_NONE: (0, 0, 0),
    IMPROVEMENT_GREEN: (0, 255, 0),
    IMPROVEMENT_BLUE: (0, 0, 255),
    IMPROVEMENT_RED: (255, 0, 0),
}


@dataclass
class SegmentMatch:
    """Per-class TP pairs with IoU plus FP and FN segment ids."""

    tp: dict[int, list[tuple[tuple, tuple, float]]] = field(default_factory=dict)
    fp: dict[int, list[tuple]] = field(default_factory=dict)
    fn: dict[int, list[tuple]] = field(default_factory=dict)
    gt_classes: set[int] = field(default_factory=set)
    thing_ids: set[int] = field(default_factory=set)

    def classes(self) -> set[int]:
        return set(self.tp) | set(self.fp) | set(self.fn)

    def merge(self, other: "SegmentMatch") -> "SegmentMatch":
        """Order-independent accumulation across frames."""
        out = SegmentMatch(
            {k: list(v) for k, v in self.tp.items()},
            {k: list(v) for k, v in self.fp.items()},
            {k: list(v) for k, v in self.fn.items()},
            set(self.gt_classes),
            set(self.thing_ids) | set(other.thing_ids),
        )
        for k, v in other.tp.items():
            out.tp.setdefault(k, []).extend(v)
        for k, v in other.fp.items():
            out.fp.setdefault(k, []).extend(v)
        for k, v in other.fn.items():
            out.fn.setdefault(k, []).extend(v)
        out.gt_classes |= other.gt_classes
        return out


@dataclass
class PanopticScores:
    """Per-class and aggregated PQ/SQ/RQ in [0, 1]."""

    per_class: dict[int, tuple[float, float, float]]
    all: tuple[float, float, float]
    things: tuple[float, float, float]
    stuff: tuple[float, float, float]

    def to_dict(self, scale: float = 100.0) -> dict:
        fmt = lambda t: {"pq": t[0] * scale, "sq": t[1] * scale, "rq": t[2] * scale}
        return {
            "all": fmt(self.all),
            "things": fmt(self.things),
            "stuff": fmt(self.stuff),
            "per_class": {str(c): fmt(t) for c, t in sorted(self.per_class.items())},
        }


def _segments(bev: PanopticBevMap) -> np.ndarray:
    """Encode (class, instance) per pixel as a single int; 0 is void."""
    return bev.class_id.astype(np.int64) * 100000 + bev.instance_index.astype(np.int64)


def _check_grids(pred: PanopticBevMap, gt: PanopticBevMap) -> None:
    if pred.class_id.shape != gt.class_id.shape:
        raise GridMismatch("prediction and ground truth rasters differ in shape")
    if pred.grid != gt.grid:
        raise GridMismatch("prediction and ground truth grid specs differ")


def match_segments(pred: PanopticBevMap, gt: PanopticBevMap) -> SegmentMatch:
    """Unique same-class matching of segments at IoU > 0.5."""
    _check_grids(pred, gt)
    pseg = _segments(pred)
    gseg = _segments(gt)

    gt_ids, gt_areas = np.unique(gseg[gt.class_id != VOID_ID], return_counts=True)
    pred_ids, pred_areas = np.unique(pseg[pred.class_id != VOID_ID], return_counts=True)
    gt_area = dict(zip(gt_ids.tolist(), gt_areas.tolist()))
    pred_area = dict(zip(pred_ids.tolist(), pred_areas.tolist()))

    valid_gt = gt.class_id != VOID_ID
    pair = gseg[valid_gt] * (10**10) + pseg[valid_gt]
    codes, counts = np.unique(pair, return_counts=True)
    inter: dict[tuple[int, int], int] = {}
    for code, n in zip(codes.tolist(), counts.tolist()):
        inter[(code // 10**10, code % 10**10)] = n

    # Overlap of each predicted segment with ground-truth void.
    void_gt = ~valid_gt
    void_ids, void_counts = np.unique(pseg[void_gt & (pred.class_id != VOID_ID)],
                                      return_counts=True)
    void_overlap = dict(zip(void_ids.tolist(), void_counts.tolist()))

    match = SegmentMatch(thing_ids=set(gt.categories.thing_ids()))
    match.gt_classes = {int(g) // 100000 for g in gt_area}

    matched_gt: set[int] = set()
    matched_pred: set[int] = set()
    for (g, p), n in inter.items():
        gc, pc = g // 100000, p // 100000
        if gc != pc:
            continue
        union = gt_area[g] + pred_area[p] - n - void_overlap.get(p, 0)
        iou = n / union
        if iou > 0.5:
            match.tp.setdefault(gc, []).append(
                ((gc, g % 100000), (pc, p % 100000), iou)
            )
            matched_gt.add(g)
            matched_pred.add(p)

    for g, area in gt_area.items():
        if g not in matched_gt:
            gc = g // 100000
            match.fn.setdefault(gc, []).append((gc, g % 100000))
    for p, area in pred_area.items():
        if p in matched_pred:
            continue
        if void_overlap.get(p, 0) / area > VOID_OVERLAP_LIMIT:
            continue
        pc = p // 100000
        match.fp.setdefault(pc, []).append((pc, p % 100000))
    return match


def pq_sq_rq(match: SegmentMatch) -> PanopticScores:
    """PQ = sum IoU / (TP + FP/2 + FN/2); SQ = sum IoU / TP; RQ = TP / same.

    Aggregates are unweighted means over classes present in the ground
    truth; thing/stuff splits follow the category table.
    """
    per_class: dict[int, tuple[float, float, float]] = {}
    for c in sorted(match.gt_classes | match.classes()):
        tps = match.tp.get(c, [])
        n_tp = len(tps)
        n_fp = len(match.fp.get(c, []))
        n_fn = len(match.fn.get(c, []))
        iou_sum = sum(i for _, _, i in tps)
        denom = n_tp + 0.5 * n_fp + 0.5 * n_fn
        pq = iou_sum / denom if denom else 0.0
        sq = iou_sum / n_tp if n_tp else 0.0
        rq = n_tp / denom if denom else 0.0
        per_class[c] = (pq, sq, rq)

    def agg(ids):
        ids = [c for c in ids if c in match.gt_classes]
        if not ids:
            return (0.0, 0.0, 0.0)
        return tuple(float(np.mean([per_class[c][k] for c in ids])) for k in range(3))

    scored = sorted(match.gt_classes)
    things = [c for c in scored if c in match.thing_ids]
    stuff = [c for c in scored if c not in match.thing_ids]
    return PanopticScores(
        per_class={c: per_class[c] for c in per_class if c in match.gt_classes},
        all=agg(scored),
        things=agg(things),
        stuff=agg(stuff),
    )


def miou(
    pred_classes: np.ndarray, gt_classes: np.ndarray
) -> tuple[dict[int, float], float]:
    """Per-class pixel IoU and its mean over classes present in the gt."""
    pred_classes = np.asarray(pred_classes)
    gt_classes = np.asarray(gt_classes)
    if pred_classes.shape != gt_classes.shape:
        raise GridMismatch("rasters differ in shape")
    valid = gt_classes != VOID_ID
    present = sorted(int(c) for c in np.unique(gt_classes[valid]))
    per_class = {}
    for c in present:
        tp = int(np.sum((gt_classes == c) & (pred_classes == c) & valid))
        fp = int(np.sum((gt_classes != c) & (pred_classes == c) & valid))
        fn = int(np.sum((gt_classes == c) & (pred_classes != c) & valid))
        denom = tp + fp + fn
        per_class[c] = tp / denom if denom else 0.0
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def confusion_matrix(
    pred_classes: np.ndarray, gt_classes: np.ndarray, n_classes: int
) -> np.ndarray:
    """C x C counts of (gt class, predicted class) over non-void gt pixels."""
    pred_classes = np.asarray(pred_classes)
    gt_classes = np.asarray(gt_classes)
    if pred_classes.shape != gt_classes.shape:
        raise GridMismatch("rasters differ in shape")
    valid = gt_classes != VOID_ID
    idx = gt_classes[valid].astype(np.int64) * n_classes + pred_classes[valid]
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes
    )


def improvement_error_map(
    pred_a: PanopticBevMap, pred_b: PanopticBevMap, gt: PanopticBevMap
) -> np.ndarray:
    """Three-state class-level comparison of two predictions against gt.

    Green where b is wrong and a is right, blue where a is wrong and b is
    right, red where both are wrong; void ground truth is skipped.
    """
    _check_grids(pred_a, gt)
    _check_grids(pred_b, gt)
    a_ok = pred_a.class_id == gt.class_id
    b_ok = pred_b.class_id == gt.class_id
    valid = gt.class_id != VOID_ID
    out = np.full(gt.class_id.shape, IMPROVEMENT_NONE, dtype=np.uint8)
    out[valid & a_ok & ~b_ok] = IMPROVEMENT_GREEN
    out[valid & ~a_ok & b_ok] = IMPROVEMENT_BLUE
    out[valid & ~a_ok & ~b_ok] = IMPROVEMENT_RED
    return out


def improvement_map_rgb(states: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 image with the comparison color convention."""
    out = np.zeros(states.shape + (3,), dtype=np.uint8)
    for state, color in IMPROVEMENT_COLORS.items():
        out[states == state] = color
    return out


def format_score_table(scores: PanopticScores, miou_value: float | None = None) -> str:
    """Plain-text table with PQ/SQ/RQ columns for all/things/stuff, x100."""
    rows = [("All", scores.all), ("Things", scores.things), ("Stuff", scores.stuff)]
    lines = [f"{'':8s} {'PQ':>7s} {'SQ':>7s} {'RQ':>7s}"]
    for name, (pq, sq, rq) in rows:
        lines.append(f"{name:8s} {pq * 100:7.2f} {sq * 100:7.2f} {rq * 100:7.2f}")
    if miou_value is not None:
        lines.append(f"{'mIoU':8s} {miou_value * 100:7.2f}")
    return "\n".join(lines)
