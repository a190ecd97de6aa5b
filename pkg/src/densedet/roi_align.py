"""Quantization-free region feature extraction with an exact adjoint.

Sampling convention (tests and the training harness depend on it exactly):

* The value of feature cell ``(row i, col j)`` lives at the continuous point
  ``(x, y) = (j + 0.5, i + 0.5)``, i.e. pixel centers on the half-integer
  grid. Boxes are used in continuous coordinates directly, with no extra
  half-pixel offset applied to them.
* A box is scaled by ``spatial_scale`` into feature coordinates and divided
  into ``out_size x out_size`` bins; each bin averages
  ``sampling_ratio**2`` bilinear samples placed at the regular interior
  fractions ``(k + 0.5) / sampling_ratio``.
* A bilinear corner that falls outside the map contributes nothing (zero
  weight); samples are never clamped inward.

The operator is linear in the feature values, and the backward pass scatters
exactly the forward weights, so the adjoint identity
``<roi_align(v), g> == <v, roi_align_backward(g)>`` holds to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box


@dataclass
class FeatureMap:
    """A C x H x W grid of finite values plus its scale relative to the image.

    ``spatial_scale`` is feature pixels per image pixel (e.g. 0.25 for a
    stride-4 map).
    """

    values: np.ndarray
    spatial_scale: float = 1.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"values must be C x H x W, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains non-finite values")
        if not self.spatial_scale > 0:
            raise ValueError(f"spatial_scale must be > 0, got {self.spatial_scale}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class RoiFeatures:
    """C x P x P pooled features; ``degenerate`` marks a zero-area input box."""

    values: np.ndarray
    degenerate: bool = False


def _sample_weights(
    box: Box,
    spatial_scale: float,
    height: int,
    width: int,
    out_size: int,
    sampling_ratio: int,
):
    """Bilinear corner indices/weights for every sample point of every bin.

    Returns (rows, cols, weights), each of shape (4, P, P, n, n): the four
    bilinear corners per sample, with weight already zeroed for corners
    outside the map. Index arrays are clipped in-range so they are always
    safe to use for gathering or scattering.
    """
    p = out_size
    n = sampling_ratio
    x1 = box.x1 * spatial_scale
    y1 = box.y1 * spatial_scale
    bin_w = (box.x2 - box.x1) * spatial_scale / p
    bin_h = (box.y2 - box.y1) * spatial_scale / p

    offs = (np.arange(n, dtype=np.float64) + 0.5) / n
    xs = x1 + (np.arange(p, dtype=np.float64)[:, None] + offs[None, :]) * bin_w  # (P, n)
    ys = y1 + (np.arange(p, dtype=np.float64)[:, None] + offs[None, :]) * bin_h

    # continuous -> lattice coordinates (pixel centers at half-integers)
    u = xs - 0.5
    v = ys - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    dx = u - x0
    dy = v - y0

    # broadcast to the full (P_row, P_col, n_row, n_col) sample grid
    y0g = y0[:, None, :, None]
    x0g = x0[None, :, None, :]
    dyg = dy[:, None, :, None]
    dxg = dx[None, :, None, :]
    shape = (p, p, n, n)
    y0g, x0g, dyg, dxg = (np.broadcast_to(a, shape) for a in (y0g, x0g, dyg, dxg))

    rows = np.stack([y0g, y0g, y0g + 1, y0g + 1])
    cols = np.stack([x0g, x0g + 1, x0g, x0g + 1])
    weights = np.stack(
        [
            (1.0 - dyg) * (1.0 - dxg),
            (1.0 - dyg) * dxg,
            dyg * (1.0 - dxg),
            dyg * dxg,
        ]
    )
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    weights = np.where(inside, weights, 0.0)
    rows = np.clip(rows, 0, height - 1)
    cols = np.clip(cols, 0, width - 1)
    return rows, cols, weights


def roi_align(
    fm: FeatureMap,
    box: Box,
    out_size: int,
    sampling_ratio: int = 2,
) -> RoiFeatures:
    """Pool a region of ``fm`` into a fixed C x P x P grid.

    Args:
        fm: source feature map.
        box: region in image coordinates (scaled internally by
            ``fm.spatial_scale``).
        out_size: output resolution P.
        sampling_ratio: samples per bin side; each bin averages
            ``sampling_ratio**2`` bilinear samples.

    A zero-area box yields an all-zero output with ``degenerate=True``
    rather than an error.
    """
    if out_size < 1:
        raise ValueError(f"out_size must be >= 1, got {out_size}")
    if sampling_ratio < 1:
        raise ValueError(f"sampling_ratio must be >= 1, got {sampling_ratio}")
    c, h, w = fm.shape
    if box.width <= 0.0 or box.height <= 0.0:
        return RoiFeatures(np.zeros((c, out_size, out_size)), degenerate=True)

    rows, cols, weights = _sample_weights(
        box, fm.spatial_scale, h, w, out_size, sampling_ratio
    )
    # gather: (C, 4, P, P, n, n) values, weight, then average over samples
    sampled = fm.values[:, rows, cols] * weights[None]
    out = sampled.sum(axis=1).mean(axis=(3, 4))
    return RoiFeatures(out, degenerate=False)


def roi_align_backward(
    grad_out: np.ndarray | RoiFeatures,
    fm_shape: tuple[int, int, int],
    box: Box,
    out_size: int,
    sampling_ratio: int = 2,
    spatial_scale: float = 1.0,
) -> np.ndarray:
    """Exact adjoint of :func:`roi_align` as a linear map.

    Args:
        grad_out: upstream gradient, C x P x P (array or RoiFeatures).
        fm_shape: (C, H, W) of the feature map the forward call read from.
        box, out_size, sampling_ratio, spatial_scale: the same geometry
            arguments the forward call used.

    Returns:
        C x H x W gradient with the forward bilinear weights scattered back.
    """
    g = grad_out.values if isinstance(grad_out, RoiFeatures) else np.asarray(grad_out)
    g = g.astype(np.float64)
    if len(fm_shape) != 3:
        raise ValueError(f"fm_shape must be (C, H, W), got {fm_shape}")
    c, h, w = fm_shape
    if g.shape != (c, out_size, out_size):
        raise ValueError(
            f"grad_out shape {g.shape} does not match (C, P, P) = {(c, out_size, out_size)}"
        )
    grad_fm = np.zeros((c, h, w), dtype=np.float64)
    if box.width <= 0.0 or box.height <= 0.0:
        return grad_fm

    rows, cols, weights = _sample_weights(
        box, spatial_scale, h, w, out_size, sampling_ratio
    )
    n2 = float(sampling_ratio * sampling_ratio)
    # per-sample upstream share: grad_out / n^2, times the forward weight
    share = g[:, None, :, :, None, None] * weights[None] / n2  # (C, 4, P, P, n, n)
    flat_idx = (rows * w + cols).ravel()
    for ch in range(c):
        grad_fm[ch] = np.bincount(
            flat_idx, weights=share[ch].ravel(), minlength=h * w
        ).reshape(h, w)
    return grad_fm
