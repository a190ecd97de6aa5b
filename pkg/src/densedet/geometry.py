"""Axis-aligned box arithmetic, anchor grids, and box-delta coding.

Everything in this module works in corner coordinates ``(x1, y1, x2, y2)``
with ``x2 >= x1`` and ``y2 >= y1``, real-valued pixels. COCO's ``[x, y, w, h]``
convention is converted once at the data-ingestion boundary, never here.

The delta parameterization is the standard one for anchor-based regression:
center offsets normalized by the anchor size and log-space size ratios, with
all regression weights fixed at 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with inclusive real-valued edges."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)

    def clip(self, width: float, height: float) -> "Box":
        """Return a copy clipped to the rectangle [0, width] x [0, height]."""
        return Box(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )


@dataclass(frozen=True)
class AnchorSpec:
    """Configuration of the sliding anchor grid.

    ``ratios`` are height/width aspect ratios; an anchor for (scale, ratio)
    has area ``(base_size * scale)**2`` and aspect ``ratio``. ``stride`` is
    the spacing of grid cells in image pixels.
    """

    base_size: float = 16.0
    scales: tuple[float, ...] = (8.0, 16.0, 32.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride: int = 16

    def __post_init__(self) -> None:
        if self.base_size <= 0:
            raise ValueError(f"base_size must be > 0, got {self.base_size}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be non-empty and positive, got {self.scales}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError(f"ratios must be non-empty and positive, got {self.ratios}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class BoxDelta:
    """Dimensionless regression target (tx, ty, tw, th) relative to an anchor."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self) -> None:
        fields = (self.tx, self.ty, self.tw, self.th)
        if not all(math.isfinite(v) for v in fields):
            raise ValueError(f"box delta must be finite, got {fields}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Returns 0 by convention when the union has zero area (both boxes
    degenerate), so degenerate boxes never match anything.
    """
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two box sets.

    Args:
        boxes_a: (N, 4) corner-format boxes.
        boxes_b: (M, 4) corner-format boxes.

    Returns:
        (N, M) IoU matrix; entries where the union is degenerate are 0.
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def anchor_grid(spec: AnchorSpec, feat_h: int, feat_w: int) -> np.ndarray:
    """Anchor boxes for every cell of a feature map, as an (N, 4) array.

    Anchors for cell (row, col) are centered at
    ``((col + 0.5) * stride, (row + 0.5) * stride)``. Ordering is row-major
    over cells, then by scale, then by ratio, so
    ``N = feat_h * feat_w * len(scales) * len(ratios)``.
    """
    if feat_h < 1 or feat_w < 1:
        raise ValueError(f"feature map must be at least 1x1, got {feat_h}x{feat_w}")

    scales = np.asarray(spec.scales, dtype=np.float64)
    ratios = np.asarray(spec.ratios, dtype=np.float64)
    # side s = base * scale; width = s / sqrt(r), height = s * sqrt(r)
    sides = spec.base_size * scales
    half_w = 0.5 * sides[:, None] / np.sqrt(ratios)[None, :]  # (S, R)
    half_h = 0.5 * sides[:, None] * np.sqrt(ratios)[None, :]

    cx = (np.arange(feat_w, dtype=np.float64) + 0.5) * spec.stride
    cy = (np.arange(feat_h, dtype=np.float64) + 0.5) * spec.stride
    cxg, cyg = np.meshgrid(cx, cy)  # (H, W) each, row-major

    centers = np.stack([cxg.ravel(), cyg.ravel()], axis=1)  # (H*W, 2)
    hw = np.stack([half_w.ravel(), half_h.ravel()], axis=1)  # (S*R, 2)

    x1 = centers[:, None, 0] - hw[None, :, 0]
    y1 = centers[:, None, 1] - hw[None, :, 1]
    x2 = centers[:, None, 0] + hw[None, :, 0]
    y2 = centers[:, None, 1] + hw[None, :, 1]
    return np.stack([x1, y1, x2, y2], axis=2).reshape(-1, 4)


def generate_anchors(spec: AnchorSpec, feat_h: int, feat_w: int) -> list[Box]:
    """Anchor boxes for a feature map, as Box objects (see :func:`anchor_grid`)."""
    return [Box.from_array(row) for row in anchor_grid(spec, feat_h, feat_w)]


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized delta encoding for (N, 4) anchor/target arrays."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have strictly positive width and height")
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    if np.any(tw <= 0) or np.any(th <= 0):
        raise ValueError("targets must have strictly positive width and height")
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    tcx = t[:, 0] + 0.5 * tw
    tcy = t[:, 1] + 0.5 * th
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)],
        axis=1,
    )


def decode_deltas(
    anchors: np.ndarray,
    deltas: np.ndarray,
    image_size: tuple[float, float] | None = None,
) -> np.ndarray:
    """Vectorized delta decoding; inverse of :func:`encode_deltas`.

    Args:
        anchors: (N, 4) anchors with positive width/height.
        deltas: (N, 4) finite regression values.
        image_size: optional (width, height); decoded boxes are clipped to
            [0, width] x [0, height] when given.
    """
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(d)):
        raise ValueError("deltas must be finite")
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have strictly positive width and height")
    cx = a[:, 0] + 0.5 * aw + d[:, 0] * aw
    cy = a[:, 1] + 0.5 * ah + d[:, 1] * ah
    # log-size deltas are clamped so exp stays finite on untrained inputs;
    # the bound is far beyond any delta produced by encode on real boxes
    w = aw * np.exp(np.minimum(d[:, 2], 50.0))
    h = ah * np.exp(np.minimum(d[:, 3], 50.0))
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        width, height = image_size
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
    return boxes


def encode_box(anchor: Box, target: Box) -> BoxDelta:
    """Encode ``target`` relative to ``anchor``.

    ``(tx, ty)`` is the center offset normalized by the anchor size and
    ``(tw, th)`` are log size ratios. The anchor (and target) must have
    strictly positive width and height so every field is finite.
    """
    row = encode_deltas(anchor.as_array()[None, :], target.as_array()[None, :])[0]
    return BoxDelta(*(float(v) for v in row))


def decode_box(
    anchor: Box,
    delta: BoxDelta,
    image_size: tuple[float, float] | None = None,
) -> Box:
    """Apply ``delta`` to ``anchor``; exact inverse of :func:`encode_box`.

    When ``image_size=(width, height)`` is given, the decoded box is clipped
    to the image rectangle.
    """
    row = decode_deltas(anchor.as_array()[None, :], delta.as_array()[None, :], image_size)[0]
    return Box.from_array(row)
