"""Region pooling against a dense-sampling oracle, plus adjoint checks."""

import numpy as np
import pytest

from densedet.geometry import Box
from densedet.roi_align import FeatureMap, roi_align, roi_align_backward


def bilinear_at(values, y, x):
    """Scalar bilinear read with pixel centers at half-integers and zero
    weight outside the map; deliberately written point-by-point."""
    h, w = values.shape
    u = x - 0.5
    v = y - 0.5
    x0 = int(np.floor(u))
    y0 = int(np.floor(v))
    dx = u - x0
    dy = v - y0
    total = 0.0
    for yy, wy in ((y0, 1.0 - dy), (y0 + 1, dy)):
        for xx, wx in ((x0, 1.0 - dx), (x0 + 1, dx)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * values[yy, xx]
    return total


def oracle_roi_align(fm, box, out_size, sampling_ratio):
    """Direct enumeration of every sample point of every bin."""
    c, _, _ = fm.values.shape
    out = np.zeros((c, out_size, out_size))
    x1 = box.x1 * fm.spatial_scale
    y1 = box.y1 * fm.spatial_scale
    bin_w = (box.x2 - box.x1) * fm.spatial_scale / out_size
    bin_h = (box.y2 - box.y1) * fm.spatial_scale / out_size
    n = sampling_ratio
    for ch in range(c):
        for i in range(out_size):
            for j in range(out_size):
                acc = 0.0
                for a in range(n):
                    for b in range(n):
                        sy = y1 + (i + (a + 0.5) / n) * bin_h
                        sx = x1 + (j + (b + 0.5) / n) * bin_w
                        acc += bilinear_at(fm.values[ch], sy, sx)
                out[ch, i, j] = acc / (n * n)
    return out


def random_case(rng, c=2, h=6, w=7):
    fm = FeatureMap(rng.normal(size=(c, h, w)), spatial_scale=float(rng.uniform(0.5, 2.0)))
    scale = fm.spatial_scale
    x1 = rng.uniform(-1.0, w / scale * 0.5)
    y1 = rng.uniform(-1.0, h / scale * 0.5)
    box = Box(x1, y1, x1 + rng.uniform(0.5, w / scale), y1 + rng.uniform(0.5, h / scale))
    return fm, box


class TestForward:
    def test_constant_map(self):
        fm = FeatureMap(np.full((3, 8, 8), 2.25))
        out = roi_align(fm, Box(1.5, 1.0, 6.5, 6.0), 4, 2)
        np.testing.assert_allclose(out.values, 2.25, atol=1e-12)
        assert not out.degenerate

    def test_integer_aligned_box_copies_cells(self):
        rng = np.random.default_rng(71)
        values = rng.normal(size=(1, 8, 8))
        out = roi_align(FeatureMap(values), Box(2, 3, 5, 6), 3, 1)
        np.testing.assert_allclose(out.values[0], values[0, 3:6, 2:5], atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(72)
        for _ in range(50):
            fm, box = random_case(rng)
            p = int(rng.integers(1, 5))
            sr = int(rng.integers(1, 4))
            got = roi_align(fm, box, p, sr)
            want = oracle_roi_align(fm, box, p, sr)
            np.testing.assert_allclose(got.values, want, atol=1e-9)

    def test_degenerate_box_flagged(self):
        fm = FeatureMap(np.ones((1, 4, 4)))
        out = roi_align(fm, Box(2, 1, 2, 3), 2, 1)
        assert out.degenerate
        np.testing.assert_array_equal(out.values, 0.0)

    def test_linearity(self):
        rng = np.random.default_rng(73)
        a = rng.normal(size=(2, 5, 5))
        b = rng.normal(size=(2, 5, 5))
        box = Box(0.3, 0.7, 4.1, 4.4)
        alpha, beta = 1.7, -0.4
        lhs = roi_align(FeatureMap(alpha * a + beta * b), box, 3, 2).values
        rhs = alpha * roi_align(FeatureMap(a), box, 3, 2).values + beta * roi_align(
            FeatureMap(b), box, 3, 2
        ).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_translation_consistency(self):
        rng = np.random.default_rng(74)
        values = np.zeros((1, 12, 12))
        values[0, 3:7, 3:7] = rng.normal(size=(4, 4))
        box = Box(2.3, 2.1, 8.2, 8.4)
        base = roi_align(FeatureMap(values), box, 3, 2).values
        shifted = np.roll(values, (2, 1), axis=(1, 2))
        moved = Box(box.x1 + 1, box.y1 + 2, box.x2 + 1, box.y2 + 2)
        np.testing.assert_allclose(roi_align(FeatureMap(shifted), moved, 3, 2).values, base, atol=1e-12)

    def test_bad_args(self):
        fm = FeatureMap(np.ones((1, 4, 4)))
        with pytest.raises(ValueError):
            roi_align(fm, Box(0, 0, 2, 2), 0, 1)
        with pytest.raises(ValueError):
            roi_align(fm, Box(0, 0, 2, 2), 2, 0)
        with pytest.raises(ValueError):
            FeatureMap(np.ones((4, 4)))
        with pytest.raises(ValueError):
            FeatureMap(np.full((1, 4, 4), np.nan))


class TestBackward:
    def test_zero_gradient(self):
        g = roi_align_backward(np.zeros((2, 3, 3)), (2, 6, 6), Box(1, 1, 4, 4), 3, 2)
        np.testing.assert_array_equal(g, 0.0)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(81)
        for _ in range(50):
            fm, box = random_case(rng)
            p = int(rng.integers(1, 5))
            sr = int(rng.integers(1, 4))
            g = rng.normal(size=(fm.shape[0], p, p))
            lhs = float((roi_align(fm, box, p, sr).values * g).sum())
            grad = roi_align_backward(g, fm.shape, box, p, sr, fm.spatial_scale)
            rhs = float((fm.values * grad).sum())
            assert abs(lhs - rhs) < 1e-9

    def test_finite_differences(self):
        rng = np.random.default_rng(82)
        values = rng.normal(size=(1, 4, 4))
        box = Box(0.4, 0.6, 3.1, 3.4)
        g = rng.normal(size=(1, 3, 3))
        grad = roi_align_backward(g, (1, 4, 4), box, 3, 2, 1.0)
        eps = 1e-4
        for idx in np.ndindex(values.shape):
            plus = values.copy()
            plus[idx] += eps
            minus = values.copy()
            minus[idx] -= eps
            f_plus = float((roi_align(FeatureMap(plus), box, 3, 2).values * g).sum())
            f_minus = float((roi_align(FeatureMap(minus), box, 3, 2).values * g).sum())
            fd = (f_plus - f_minus) / (2 * eps)
            denom = max(1e-12, abs(fd) + abs(grad[idx]))
            assert abs(fd - grad[idx]) / denom < 1e-5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            roi_align_backward(np.zeros((1, 2, 2)), (1, 4, 4), Box(0, 0, 2, 2), 3, 2)
        with pytest.raises(ValueError):
            roi_align_backward(np.zeros((2, 3, 3)), (1, 4, 4), Box(0, 0, 2, 2), 3, 2)

    def test_degenerate_box_zero_gradient(self):
        g = roi_align_backward(np.ones((1, 2, 2)), (1, 4, 4), Box(1, 1, 1, 3), 2, 1)
        np.testing.assert_array_equal(g, 0.0)
