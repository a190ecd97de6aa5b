"""Detection evaluation: greedy matching, 101-point AP, summary table, ROC.

Matching convention (single category, per image): detections are processed
in descending score, ties broken by input index. Each detection matches the
admissible ground truth of highest IoU at or above the threshold, lowest
index on IoU ties. Non-crowd ground truths can be matched once and produce a
TP; crowd ground truths stay admissible forever, absorb any number of
detections, and every detection they absorb is ignored (neither TP nor FP).
Unmatched detections are FPs.

Area-restricted metrics reuse the area-agnostic matching and then restrict:
a TP counts only if its matched ground truth is in range (ignored
otherwise), and an FP counts only if the detection's own box area is in
range. Ranges follow the common 32^2 / 96^2 split: small is area < 1024,
medium is 1024 <= area <= 9216, large is area > 9216.

ROC uses the detection-set-relative convention: after matching, TPs are the
positives and FPs the negatives, rates are cumulative counts over descending
score thresholds divided by the totals, and the curve is anchored at (0, 0)
and (1, 1). AUC is the trapezoidal area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, iou_matrix

TP = 1
FP = 0
IGNORED = -1

SENTINEL = -1.0  # reported when a metric has no qualifying ground truths

AREA_SMALL_MAX = 32.0**2  # exclusive upper bound for "small"
AREA_MEDIUM_MAX = 96.0**2  # inclusive upper bound for "medium"

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
AR_MAX_DETECTIONS = 100


@dataclass(frozen=True)
class Detection:
    """A scored model output box for one image."""

    image_id: int
    box: Box
    score: float
    category_id: int = 1

    def __post_init__(self) -> None:
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruthBox:
    """An annotated box; ``area`` defaults to the box area when not supplied.

    A supplied ``area`` (e.g. a segmentation area from the source
    annotations) wins over the box area for area-range bucketing.
    """

    image_id: int
    box: Box
    category_id: int = 1
    iscrowd: bool = False
    area: float | None = None

    @property
    def effective_area(self) -> float:
        return self.box.area if self.area is None else self.area


@dataclass(frozen=True)
class ApSummary:
    """The seven-number evaluation record; values in [0, 1] or -1 sentinel."""

    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    ar: float

    def row(self) -> tuple[float, float, float, float, float, float]:
        return (self.ap, self.ap50, self.ap75, self.ap_small, self.ap_medium, self.ap_large)


@dataclass
class MatchResult:
    """Outcome of :func:`match_detections`, aligned with the input order.

    ``det_status[i]`` is TP, FP, or IGNORED (crowd absorption);
    ``det_matched_gt[i]`` is the matched ground-truth index or -1;
    ``gt_matched[j]`` is True for non-crowd ground truths that were matched.
    """

    det_status: np.ndarray
    det_matched_gt: np.ndarray
    gt_matched: np.ndarray


def _det_order(dets: Sequence[Detection], indices: Iterable[int]) -> list[int]:
    """Indices sorted by descending score, ties by input index."""
    return sorted(indices, key=lambda i: (-dets[i].score, i))


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    iou_thr: float,
) -> MatchResult:
    """Greedily match detections to ground truths per image (one category)."""
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"iou_thr must be in (0, 1], got {iou_thr}")
    cats = {d.category_id for d in dets} | {g.category_id for g in gts}
    if len(cats) > 1:
        raise ValueError(f"matching is single-category, got category ids {sorted(cats)}")

    det_status = np.full(len(dets), FP, dtype=np.int64)
    det_matched_gt = np.full(len(dets), -1, dtype=np.int64)
    gt_matched = np.zeros(len(gts), dtype=bool)

    image_ids = sorted(
        {d.image_id for d in dets} | {g.image_id for g in gts}
    )
    for image_id in image_ids:
        det_idx = _det_order(dets, (i for i, d in enumerate(dets) if d.image_id == image_id))
        gt_idx = [j for j, g in enumerate(gts) if g.image_id == image_id]
        if not det_idx:
            continue
        if not gt_idx:
            continue  # all detections of this image stay FP
        gt_boxes = np.array([gts[j].box.as_array() for j in gt_idx])
        det_boxes = np.array([dets[i].box.as_array() for i in det_idx])
        ious = iou_matrix(det_boxes, gt_boxes)
        for row, i in enumerate(det_idx):
            best_j = -1
            best_iou = -1.0
            for col, j in enumerate(gt_idx):
                if gt_matched[j] and not gts[j].iscrowd:
                    continue
                v = ious[row, col]
                if v >= iou_thr and v > best_iou:
                    best_iou = v
                    best_j = j
            if best_j < 0:
                continue
            det_matched_gt[i] = best_j
            if gts[best_j].iscrowd:
                det_status[i] = IGNORED
            else:
                det_status[i] = TP
                gt_matched[best_j] = True
    return MatchResult(det_status, det_matched_gt, gt_matched)


def average_precision(tp_flags: Sequence[bool], total_gt: int) -> float:
    """101-point interpolated average precision.

    Args:
        tp_flags: True/False per counted detection, already ordered by
            descending score (ignored detections excluded by the caller).
        total_gt: number of matchable ground truths.

    Precision is made non-increasing from the right, sampled at the 101
    recall points 0.00, 0.01, ..., 1.00 (0 beyond the achieved recall), and
    averaged. ``total_gt == 0`` returns 0; callers exclude that case from
    aggregation.
    """
    if total_gt < 0:
        raise ValueError("total_gt must be >= 0")
    if total_gt == 0:
        return 0.0
    flags = np.asarray(list(tp_flags), dtype=bool)
    if flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    recall = tp_cum / total_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # envelope: precision non-increasing from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    sample_points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, sample_points, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return math.fsum(sampled) / 101.0


def _in_range(area: float, range_name: str) -> bool:
    if range_name == "all":
        return True
    if range_name == "small":
        return area < AREA_SMALL_MAX
    if range_name == "medium":
        return AREA_SMALL_MAX <= area <= AREA_MEDIUM_MAX
    if range_name == "large":
        return area > AREA_MEDIUM_MAX
    raise ValueError(f"unknown area range {range_name!r}")


def _restricted_flags(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    match: MatchResult,
    det_order: Sequence[int],
    range_name: str,
) -> list[bool]:
    flags: list[bool] = []
    for i in det_order:
        status = match.det_status[i]
        if status == IGNORED:
            continue
        if status == TP:
            gt = gts[match.det_matched_gt[i]]
            if _in_range(gt.effective_area, range_name):
                flags.append(True)
            # TP of an out-of-range ground truth is ignored, not an FP
        else:
            if _in_range(dets[i].box.area, range_name):
                flags.append(False)
    return flags


def coco_summary(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    iou_thresholds: Sequence[float] | None = None,
) -> ApSummary:
    """Evaluate one category over the IoU sweep and area ranges.

    AP is the mean over ``iou_thresholds`` (default 0.50:0.05:0.95) of the
    101-point AP; AP50/AP75 are always computed at the fixed thresholds 0.5
    and 0.75. APs/APm/APl restrict to the small/medium/large area ranges.
    AR is the mean over the sweep of recall with at most
    ``AR_MAX_DETECTIONS`` highest-scoring detections per image. Any field
    with no qualifying ground truths is the -1 sentinel.
    """
    thresholds = tuple(iou_thresholds) if iou_thresholds is not None else DEFAULT_IOU_THRESHOLDS
    if not thresholds:
        raise ValueError("need at least one IoU threshold")

    det_order = _det_order(dets, range(len(dets)))
    matches: dict[float, MatchResult] = {}

    def match_at(t: float) -> MatchResult:
        if t not in matches:
            matches[t] = match_detections(dets, gts, t)
        return matches[t]

    def totals(range_name: str) -> int:
        return sum(
            1 for g in gts if not g.iscrowd and _in_range(g.effective_area, range_name)
        )

    def ap_at(t: float, range_name: str) -> float | None:
        total = totals(range_name)
        if total == 0:
            return None
        flags = _restricted_flags(dets, gts, match_at(t), det_order, range_name)
        return average_precision(flags, total)

    def mean_ap(range_name: str) -> float:
        values = [ap_at(t, range_name) for t in thresholds]
        if values[0] is None:
            return SENTINEL
        return math.fsum(values) / len(values)

    ap = mean_ap("all")
    ap50 = ap_at(0.5, "all")
    ap75 = ap_at(0.75, "all")

    # AR: recall averaged over the sweep, detections capped per image
    total_gt = totals("all")
    if total_gt == 0:
        ar = SENTINEL
    else:
        capped: list[Detection] = []
        for image_id in sorted({d.image_id for d in dets}):
            idx = _det_order(dets, (i for i, d in enumerate(dets) if d.image_id == image_id))
            capped.extend(dets[i] for i in idx[:AR_MAX_DETECTIONS])
        recalls = [
            int(match_detections(capped, gts, t).gt_matched.sum()) / total_gt
            for t in thresholds
        ]
        ar = math.fsum(recalls) / len(recalls)

    return ApSummary(
        ap=ap,
        ap50=SENTINEL if ap50 is None else ap50,
        ap75=SENTINEL if ap75 is None else ap75,
        ap_small=mean_ap("small"),
        ap_medium=mean_ap("medium"),
        ap_large=mean_ap("large"),
        ar=ar,
    )


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    """ROC points with their score thresholds and the trapezoidal AUC."""

    thresholds: list[float]
    points: list[tuple[float, float]]
    auc: float


def _scored_labels(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    iou_thr: float,
) -> list[tuple[float, bool]]:
    if len(gts) == 0:
        raise ValueError("ROC needs at least one ground truth")
    if len(dets) == 0:
        raise ValueError("ROC needs at least one detection")
    match = match_detections(dets, gts, iou_thr)
    order = _det_order(dets, range(len(dets)))
    labeled = [
        (dets[i].score, match.det_status[i] == TP)
        for i in order
        if match.det_status[i] != IGNORED
    ]
    if not labeled:
        raise ValueError("every detection was absorbed by crowd regions")
    return labeled


def roc_auc(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    iou_thr: float = 0.5,
) -> RocCurve:
    """ROC over descending score thresholds after TP/FP labeling.

    Rates are relative to the labeled detection set: the positives are all
    TP detections and the negatives all FP detections. The curve always
    starts at (0, 0) (threshold inf) and ends at (1, 1) (threshold -inf when
    one of the totals is zero and the endpoint is not reached naturally).
    """
    labeled = _scored_labels(dets, gts, iou_thr)
    total_tp = sum(1 for _, is_tp in labeled if is_tp)
    total_fp = len(labeled) - total_tp

    thresholds = [math.inf]
    points: list[tuple[float, float]] = [(0.0, 0.0)]
    tp = fp = 0
    k = 0
    while k < len(labeled):
        score = labeled[k][0]
        while k < len(labeled) and labeled[k][0] == score:
            if labeled[k][1]:
                tp += 1
            else:
                fp += 1
            k += 1
        fpr = fp / total_fp if total_fp else 0.0
        tpr = tp / total_tp if total_tp else 0.0
        thresholds.append(score)
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        thresholds.append(-math.inf)
        points.append((1.0, 1.0))

    auc = math.fsum(
        (x1 - x0) * (y0 + y1) / 2.0
        for (x0, y0), (x1, y1) in zip(points[:-1], points[1:])
    )
    return RocCurve(thresholds=thresholds, points=points, auc=auc)


def best_threshold_accuracy(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    iou_thr: float = 0.5,
) -> tuple[float, float]:
    """Max over score thresholds of (TP + TN) / (P + N), detection-relative.

    At threshold t, detections scoring >= t are predicted positive. TP are
    true positives above t, TN are false-positive detections below t.
    Returns (best_threshold, best_accuracy); earliest (highest) threshold
    wins ties.
    """
    labeled = _scored_labels(dets, gts, iou_thr)
    total = len(labeled)
    total_fp = sum(1 for _, is_tp in labeled if not is_tp)

    best_thr = math.inf
    best_acc = total_fp / total  # predict nothing positive
    tp = fp = 0
    k = 0
    while k < len(labeled):
        score = labeled[k][0]
        while k < len(labeled) and labeled[k][0] == score:
            if labeled[k][1]:
                tp += 1
            else:
                fp += 1
            k += 1
        acc = (tp + (total_fp - fp)) / total
        if acc > best_acc:
            best_acc = acc
            best_thr = score
    return best_thr, best_acc


# ---------------------------------------------------------------------------
# Rendering

_COLUMNS = ("AP", "AP50", "AP75", "APs", "APm", "APl")


def _cell(value: float) -> str:
    return "—" if value < 0 else f"{value * 100:.1f}"


def format_summary_row(values: Sequence[float]) -> str:
    """Six metric fractions as the compact space-separated x100 row."""
    vals = tuple(values)
    if len(vals) != 6:
        raise ValueError(f"expected 6 values, got {len(vals)}")
    return " ".join(_cell(v) for v in vals)


def format_summary_text(summary: ApSummary) -> str:
    """Plain-text report: header line, value row, AR line."""
    return (
        " ".join(_COLUMNS)
        + "\n"
        + format_summary_row(summary.row())
        + "\n"
        + f"AR {_cell(summary.ar)}"
        + "\n"
    )


def format_summary_csv(summary: ApSummary) -> str:
    """CSV report with the same x100 one-decimal scaling."""
    return (
        ",".join(_COLUMNS)
        + "\n"
        + ",".join(_cell(v) for v in summary.row())
        + "\n"
        + f"AR,{_cell(summary.ar)}"
        + "\n"
    )


def _fmt_threshold(t: float) -> str:
    if math.isinf(t):
        return "inf" if t > 0 else "-inf"
    return f"{t:.6f}"


def format_roc_csv(curve: RocCurve) -> str:
    """CSV of threshold,fpr,tpr rows with a one-line auc trailer."""
    lines = ["threshold,fpr,tpr"]
    for t, (fpr, tpr) in zip(curve.thresholds, curve.points):
        lines.append(f"{_fmt_threshold(t)},{fpr:.6f},{tpr:.6f}")
    lines.append(f"auc={curve.auc:.6f}")
    return "\n".join(lines) + "\n"
