"""Region-proposal machinery: greedy NMS, anchor labeling, proposal selection.

Determinism rules used throughout (and relied on by the tests): score ties
are always broken by the lower original index, and suppression removes only
candidates whose IoU is strictly greater than the threshold, so boxes sitting
exactly at the threshold survive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, iou_matrix

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

NO_MATCH = -1


@dataclass(frozen=True)
class ScoredBox:
    """A box with an objectness score in [0, 1]."""

    box: Box
    score: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be finite and in [0, 1], got {self.score}")


@dataclass
class AnchorLabels:
    """Per-anchor training targets.

    ``labels[i]`` is POSITIVE, NEGATIVE, or IGNORE. ``matched_gt[i]`` is the
    index of the ground-truth box assigned to anchor ``i`` and is >= 0 exactly
    when ``labels[i] == POSITIVE`` (NO_MATCH otherwise).
    """

    labels: np.ndarray
    matched_gt: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.matched_gt = np.asarray(self.matched_gt, dtype=np.int64)
        if self.labels.shape != self.matched_gt.shape:
            raise ValueError("labels and matched_gt must have the same length")
        pos = self.labels == POSITIVE
        if not np.array_equal(pos, self.matched_gt >= 0):
            raise ValueError("matched_gt must be set exactly for positive anchors")

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def _boxes_to_array(candidates: Sequence[ScoredBox]) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array(
        [[c.box.x1, c.box.y1, c.box.x2, c.box.y2] for c in candidates],
        dtype=np.float64,
    ).reshape(-1, 4)
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    return boxes, scores


def nms(candidates: Sequence[ScoredBox], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining candidate and removes every
    remaining candidate whose IoU with it is strictly greater than
    ``iou_threshold``. Returns the kept indices, in keep order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if len(candidates) == 0:
        return []

    boxes, scores = _boxes_to_array(candidates)
    order = np.argsort(-scores, kind="stable")  # ties fall back to input order
    ious = iou_matrix(boxes, boxes)

    suppressed = np.zeros(len(candidates), dtype=bool)
    keep: list[int] = []
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        suppressed |= ious[idx] > iou_threshold
        suppressed[idx] = True
    return keep


def assign_anchor_labels(
    anchors: Sequence[Box] | np.ndarray,
    gts: Sequence[Box] | np.ndarray,
    pos_thr: float = 0.7,
    neg_thr: float = 0.3,
) -> AnchorLabels:
    """Label anchors against ground-truth boxes for proposal training.

    An anchor is POSITIVE if its IoU with some ground truth reaches
    ``pos_thr``, or if it attains the maximum IoU for some ground truth
    (ties: every tied anchor becomes positive). It is NEGATIVE if its best
    IoU is below ``neg_thr``, and IGNORE otherwise. ``matched_gt`` is the
    ground truth of highest IoU (lowest index on ties). With no ground
    truths, every anchor is NEGATIVE.
    """
    if not (0.0 < neg_thr <= pos_thr < 1.0):
        raise ValueError(
            f"need 0 < neg_thr <= pos_thr < 1, got pos={pos_thr} neg={neg_thr}"
        )
    anchor_arr = _as_box_array(anchors)
    gt_arr = _as_box_array(gts)
    n = anchor_arr.shape[0]

    if gt_arr.shape[0] == 0:
        return AnchorLabels(
            labels=np.full(n, NEGATIVE, dtype=np.int64),
            matched_gt=np.full(n, NO_MATCH, dtype=np.int64),
        )

    ious = iou_matrix(anchor_arr, gt_arr)  # (n_anchors, n_gt)
    best_iou = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)  # lowest gt index on ties

    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[best_iou < neg_thr] = NEGATIVE
    labels[best_iou >= pos_thr] = POSITIVE
    # Per-gt argmax rule: the best anchor(s) for each gt are positive even
    # when the overlap is low, so no ground truth is left without a match.
    gt_best = ious.max(axis=0)
    forced = (ious == gt_best[None, :]).any(axis=1)
    labels[forced] = POSITIVE

    matched = np.where(labels == POSITIVE, best_gt, NO_MATCH)
    return AnchorLabels(labels=labels, matched_gt=matched)


def select_proposals(
    scored: Sequence[ScoredBox],
    pre_nms_k: int = 2000,
    post_nms_k: int = 1000,
    nms_thr: float = 0.7,
) -> list[ScoredBox]:
    """Top-k filtering followed by NMS, the proposal-selection pipeline.

    Takes the ``pre_nms_k`` highest-scoring candidates (stable on ties), runs
    :func:`nms` at ``nms_thr``, and returns at most ``post_nms_k`` survivors
    in keep order.
    """
    if pre_nms_k < 1 or post_nms_k < 1:
        raise ValueError("pre_nms_k and post_nms_k must be >= 1")
    if len(scored) == 0:
        return []
    scores = np.array([c.score for c in scored], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:pre_nms_k]
    shortlist = [scored[int(i)] for i in order]
    keep = nms(shortlist, nms_thr)[:post_nms_k]
    return [shortlist[k] for k in keep]


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    return np.array(
        [[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64
    ).reshape(-1, 4)
