"""Desk-scale end-to-end training with fully manual gradients.

The model is deliberately tiny: a trunk of 3x3 stride-2 convolution + ReLU
blocks followed by three 1x1 heads producing per-cell objectness logits,
box-regression deltas, and a D-channel pixel-embedding map. All forward and
backward rules are explicit numpy so every gradient can be audited with
central finite differences.

Array layouts (fixed, relied on by the anchor bookkeeping):

* objectness map (A, h, w): channel ``a = scale_index * len(ratios) + ratio_index``;
  flattening as (h, w, A) matches the anchor-grid ordering.
* delta map (4A, h, w): channel ``a * 4 + k`` with k indexing (tx, ty, tw, th).

Training is plain SGD, one update per scene, scene order reshuffled each
epoch from the run seed; everything downstream of the seed is deterministic.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import AnchorSpec, Box, anchor_grid, decode_deltas, encode_deltas
from .metrics import ApSummary, Detection, GroundTruthBox, coco_summary
from .proposals import IGNORE, POSITIVE, ScoredBox, assign_anchor_labels, select_proposals
from .roi_align import FeatureMap, roi_align, roi_align_backward
from .surface_embedding import (
    CorrespondenceSample,
    EmbeddingMatrix,
    cse_loss,
    expected_geodesic_error,
    vertex_posterior,
)

TOY_ANCHORS = AnchorSpec(base_size=4.0, scales=(3.0, 5.0, 7.0), ratios=(0.5, 1.0, 2.0), stride=4)


class TrainingDiverged(RuntimeError):
    """Raised when the total loss turns non-finite; carries the epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


class GradCheckError(RuntimeError):
    """A finite-difference probe hit a non-finite evaluation."""

    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


# ---------------------------------------------------------------------------
# Elementwise pieces


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def smooth_l1(x: np.ndarray) -> np.ndarray:
    """Quadratic inside |x| < 1, linear outside; C1 at the switch point."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def bce_with_logits(z: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over logits; returns (loss, dloss/dz)."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    losses = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - t) / z.size
    return float(losses.mean()), grad


def balanced_bce_with_logits(z: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """BCE averaged per class then across classes, so a handful of positive
    anchors is not drowned out by thousands of negatives."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    pos = t > 0.5
    if not pos.any() or pos.all():
        return bce_with_logits(z, t)
    losses = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n_pos = int(pos.sum())
    n_neg = z.size - n_pos
    loss = 0.5 * losses[pos].mean() + 0.5 * losses[~pos].mean()
    grad = (sigmoid(z) - t) * np.where(pos, 0.5 / n_pos, 0.5 / n_neg)
    return float(loss), grad


# ---------------------------------------------------------------------------
# Convolution with explicit forward/backward


def _conv_forward(x, w, b, stride, pad):
    # x: (Cin, H, W); w: (Cout, Cin, k, k); returns (out, window view)
    k = w.shape[2]
    if pad:
        cin, h, w_in = x.shape
        xp = np.zeros((cin, h + 2 * pad, w_in + 2 * pad))
        xp[:, pad:-pad, pad:-pad] = x
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    # flattened matmul beats einsum path search at these tiny sizes
    cin, hout, wout = win.shape[:3]
    cols = win.reshape(cin, hout * wout, k * k).transpose(1, 0, 2).reshape(hout * wout, cin * k * k)
    out = (cols @ w.reshape(w.shape[0], -1).T).T.reshape(w.shape[0], hout, wout)
    out = out + b[:, None, None]
    return out, cols


def _conv_backward(gout, cols, w, x_shape, stride, pad):
    cout = w.shape[0]
    k = w.shape[2]
    hout, wout = gout.shape[1:]
    g2 = gout.reshape(cout, hout * wout)
    grad_w = (g2 @ cols).reshape(w.shape)
    grad_b = gout.sum(axis=(1, 2))
    cin, h, w_in = x_shape
    # scatter the per-window gradient back onto the padded input
    gcols = (g2.T @ w.reshape(cout, -1)).reshape(hout, wout, cin, k, k)
    gxp = np.zeros((cin, h + 2 * pad, w_in + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            gxp[:, ki : ki + stride * hout : stride, kj : kj + stride * wout : stride] += (
                gcols[:, :, :, ki, kj].transpose(2, 0, 1)
            )
    grad_x = gxp[:, pad : pad + h, pad : pad + w_in] if pad else gxp
    return grad_w, grad_b, grad_x


@dataclass
class BackboneOutputs:
    objectness: np.ndarray  # (A, h, w) logits
    deltas: np.ndarray  # (4A, h, w)
    embeddings: np.ndarray  # (D, h, w)


class TinyBackbone:
    """Explicit-weight convolutional trunk with objectness/box/embedding heads."""

    def __init__(
        self,
        seed: int,
        in_channels: int = 1,
        trunk_channels: Sequence[int] = (8, 16, 16),
        trunk_strides: Sequence[int] | None = None,
        num_anchors: int = 9,
        embed_dim: int = 16,
        emb_hidden: int = 16,
    ):
        self.in_channels = in_channels
        self.trunk_channels = tuple(trunk_channels)
        if trunk_strides is None:
            # downsample twice, then grow the receptive field at full stride
            trunk_strides = tuple(2 if i < 2 else 1 for i in range(len(self.trunk_channels)))
        self.trunk_strides = tuple(trunk_strides)
        if len(self.trunk_strides) != len(self.trunk_channels):
            raise ValueError("trunk_strides must match trunk_channels in length")
        if any(s < 1 for s in self.trunk_strides):
            raise ValueError("trunk strides must be >= 1")
        self.num_anchors = num_anchors
        self.embed_dim = embed_dim
        self.emb_hidden = emb_hidden
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.weights: dict[str, np.ndarray] = {}
        cin = in_channels
        for idx, cout in enumerate(self.trunk_channels):
            fan_in = cin * 9
            self.weights[f"trunk{idx}.w"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (cout, cin, 3, 3))
            self.weights[f"trunk{idx}.b"] = np.zeros(cout)
            cin = cout
        if emb_hidden:
            # a private block in front of the embedding head keeps the
            # correspondence objective from reshaping the shared features
            self.weights["embmid.w"] = rng.normal(0.0, math.sqrt(2.0 / (cin * 9)), (emb_hidden, cin, 3, 3))
            self.weights["embmid.b"] = np.zeros(emb_hidden)
        emb_in = emb_hidden if emb_hidden else cin
        for name, head_cin, cout in (
            ("obj", cin, num_anchors),
            ("delta", cin, 4 * num_anchors),
            ("emb", emb_in, embed_dim),
        ):
            self.weights[f"{name}.w"] = rng.normal(0.0, 0.01, (cout, head_cin, 3, 3))
            self.weights[f"{name}.b"] = np.zeros(cout)

    @property
    def stride(self) -> int:
        out = 1
        for s in self.trunk_strides:
            out *= s
        return out

    def forward(self, image: np.ndarray) -> tuple[BackboneOutputs, dict]:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ValueError(f"image must be ({self.in_channels}, H, W), got {x.shape}")
        trunk_cache = []
        for idx in range(len(self.trunk_channels)):
            w = self.weights[f"trunk{idx}.w"]
            b = self.weights[f"trunk{idx}.b"]
            z, cols = _conv_forward(x, w, b, stride=self.trunk_strides[idx], pad=1)
            trunk_cache.append({"cols": cols, "z": z, "x_shape": x.shape})
            x = np.maximum(z, 0.0)
        head_cache = {}
        outs = {}
        for name in ("obj", "delta"):
            out, cols = _conv_forward(x, self.weights[f"{name}.w"], self.weights[f"{name}.b"], 1, 1)
            head_cache[name] = {"cols": cols, "x_shape": x.shape}
            outs[name] = out
        emb_in = x
        mid_cache = None
        if self.emb_hidden:
            z_mid, cols_mid = _conv_forward(x, self.weights["embmid.w"], self.weights["embmid.b"], 1, 1)
            mid_cache = {"cols": cols_mid, "z": z_mid, "x_shape": x.shape}
            emb_in = np.maximum(z_mid, 0.0)
        out, cols = _conv_forward(emb_in, self.weights["emb.w"], self.weights["emb.b"], 1, 1)
        head_cache["emb"] = {"cols": cols, "x_shape": emb_in.shape}
        outs["emb"] = out
        cache = {"trunk": trunk_cache, "heads": head_cache, "embmid": mid_cache}
        return BackboneOutputs(outs["obj"], outs["delta"], outs["emb"]), cache

    def backward(
        self,
        cache: dict,
        grad_obj: np.ndarray,
        grad_delta: np.ndarray,
        grad_emb: np.ndarray,
    ) -> dict[str, np.ndarray]:
        """Exact gradients of a scalar loss for every weight.

        The three arguments are the loss gradients with respect to the three
        output maps of the forward call that produced ``cache``.
        """
        grads: dict[str, np.ndarray] = {}
        grad_feat = None
        for name, gout in (("obj", grad_obj), ("delta", grad_delta)):
            hc = cache["heads"][name]
            gw, gb, gx = _conv_backward(
                np.asarray(gout, dtype=np.float64), hc["cols"], self.weights[f"{name}.w"], hc["x_shape"], 1, 1
            )
            grads[f"{name}.w"] = gw
            grads[f"{name}.b"] = gb
            grad_feat = gx if grad_feat is None else grad_feat + gx

        hc = cache["heads"]["emb"]
        gw, gb, gx_emb = _conv_backward(
            np.asarray(grad_emb, dtype=np.float64), hc["cols"], self.weights["emb.w"], hc["x_shape"], 1, 1
        )
        grads["emb.w"] = gw
        grads["emb.b"] = gb
        if self.emb_hidden:
            mc = cache["embmid"]
            gz_mid = gx_emb * (mc["z"] > 0.0)
            gw, gb, gx_emb = _conv_backward(gz_mid, mc["cols"], self.weights["embmid.w"], mc["x_shape"], 1, 1)
            grads["embmid.w"] = gw
            grads["embmid.b"] = gb
        grad_feat = grad_feat + gx_emb

        gx = grad_feat
        for idx in reversed(range(len(self.trunk_channels))):
            tc = cache["trunk"][idx]
            gz = gx * (tc["z"] > 0.0)
            gw, gb, gx = _conv_backward(gz, tc["cols"], self.weights[f"trunk{idx}.w"], tc["x_shape"], self.trunk_strides[idx], 1)
            grads[f"trunk{idx}.w"] = gw
            grads[f"trunk{idx}.b"] = gb
        return grads

    # parameter-vector plumbing for the finite-difference audit
    def param_keys(self) -> list[str]:
        return list(self.weights)

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in self.param_keys()])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for k in self.param_keys():
            n = self.weights[k].size
            self.weights[k] = vec[pos : pos + n].reshape(self.weights[k].shape).copy()
            pos += n
        if pos != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {pos}")

    def grads_as_vector(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self.param_keys()])

    def min_abs_preactivation(self, cache: dict) -> float:
        zs = [float(np.abs(tc["z"]).min()) for tc in cache["trunk"]]
        if cache["embmid"] is not None:
            zs.append(float(np.abs(cache["embmid"]["z"]).min()))
        return min(zs)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    eps: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Args:
        f: objective mapping a parameter vector to ``(value, gradient)``.
        params: the point to probe.
        eps: central-difference step.

    The relative error per coordinate is
    ``|g_analytic - g_fd| / max(1e-12, |g_analytic| + |g_fd|)``. A non-finite
    evaluation raises :class:`GradCheckError` naming the coordinate.
    """
    params = np.asarray(params, dtype=np.float64)
    value, grad = f(params)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value):
        raise GradCheckError("objective is non-finite at the base point")
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != params shape {params.shape}")
    max_err = 0.0
    for i in range(params.size):
        probe = params.copy()
        probe[i] = params[i] + eps
        f_plus, _ = f(probe)
        probe[i] = params[i] - eps
        f_minus, _ = f(probe)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradCheckError(f"non-finite evaluation at coordinate {i}", coordinate=i)
        g_fd = (f_plus - f_minus) / (2.0 * eps)
        err = abs(grad[i] - g_fd) / max(1e-12, abs(grad[i]) + abs(g_fd))
        max_err = max(max_err, err)
    return max_err


GRADCHECK_THRESHOLDS = {
    "cse_loss": 1e-5,
    "roi_align": 1e-5,
    "smooth_l1": 1e-5,
    "backbone": 1e-4,
}


def _cse_check(seed: int) -> tuple[Callable, np.ndarray]:
    rng = np.random.default_rng(seed)
    v, d, p = 5, 3, 2
    table = rng.normal(0.0, 0.5, (v, d))
    grid = rng.normal(0.0, 0.5, (d, p, p))
    samples = [
        CorrespondenceSample(row=int(rng.integers(p)), col=int(rng.integers(p)), gt_vertex=int(rng.integers(v)))
        for _ in range(4)
    ]

    def f(params: np.ndarray):
        tab = params[: v * d].reshape(v, d)
        fld = params[v * d :].reshape(d, p, p)
        loss, g_tab, g_fld = cse_loss(EmbeddingMatrix(tab), fld, samples)
        return loss, np.concatenate([g_tab.ravel(), g_fld.ravel()])

    return f, np.concatenate([table.ravel(), grid.ravel()])


def _roi_check(seed: int) -> tuple[Callable, np.ndarray]:
    rng = np.random.default_rng(seed)
    h = w = 4
    x1, y1 = rng.uniform(-0.5, 1.5, 2)
    bw, bh = rng.uniform(1.0, 3.0, 2)
    box = Box(float(x1), float(y1), float(x1 + bw), float(y1 + bh))
    proj = rng.normal(0.0, 1.0, (1, 2, 2))

    def f(params: np.ndarray):
        fm = FeatureMap(params.reshape(1, h, w), spatial_scale=1.0)
        out = roi_align(fm, box, out_size=2, sampling_ratio=2)
        value = float((out.values * proj).sum())
        grad = roi_align_backward(proj, (1, h, w), box, 2, 2, 1.0)
        return value, grad.ravel()

    return f, rng.normal(0.0, 1.0, h * w)


def _smooth_l1_check(seed: int) -> tuple[Callable, np.ndarray]:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.5, 2.5, 8)
    # keep probe points clear of the |x| = 1 switch so the quadratic
    # error model of the central difference applies
    x = np.where(np.abs(np.abs(x) - 1.0) < 1e-3, x + 5e-3, x)

    def f(params: np.ndarray):
        return float(smooth_l1(params).sum()), smooth_l1_grad(params)

    return f, x


def _backbone_check(seed: int) -> tuple[Callable, np.ndarray]:
    # redraw until no ReLU preactivation sits near its kink, so the finite
    # difference never straddles the nondifferentiable point
    for attempt in range(32):
        rng = np.random.default_rng((seed, attempt))
        bb = TinyBackbone(
            seed=int(rng.integers(2**31)),
            trunk_channels=(2, 3),
            num_anchors=2,
            embed_dim=2,
        )
        image = rng.normal(0.0, 1.0, (1, 16, 16))
        outs, cache = bb.forward(image)
        if bb.min_abs_preactivation(cache) > 1e-2:
            break
    proj = {
        "obj": rng.normal(0.0, 1.0, outs.objectness.shape),
        "delta": rng.normal(0.0, 1.0, outs.deltas.shape),
        "emb": rng.normal(0.0, 1.0, outs.embeddings.shape),
    }

    def f(params: np.ndarray):
        bb.set_param_vector(params)
        o, c = bb.forward(image)
        value = float(
            (o.objectness * proj["obj"]).sum()
            + (o.deltas * proj["delta"]).sum()
            + (o.embeddings * proj["emb"]).sum()
        )
        grads = bb.backward(c, proj["obj"], proj["delta"], proj["emb"])
        return value, bb.grads_as_vector(grads)

    return f, bb.param_vector()


_CHECK_BUILDERS = {
    "cse_loss": _cse_check,
    "roi_align": _roi_check,
    "smooth_l1": _smooth_l1_check,
    "backbone": _backbone_check,
}


def run_gradient_audit(
    seed: int = 0,
    rounds: int = 5,
    checks: Sequence[str] | None = None,
    _corrupt: str | None = None,
) -> dict[str, float]:
    """Run every finite-difference check ``rounds`` times; return max errors.

    ``_corrupt`` is a test hook: it perturbs the named check's analytic
    gradient so the audit must fail.
    """
    names = tuple(checks) if checks is not None else tuple(_CHECK_BUILDERS)
    results: dict[str, float] = {}
    for name in names:
        builder = _CHECK_BUILDERS[name]
        worst = 0.0
        for r in range(rounds):
            f, params = builder(seed + r)
            if _corrupt == name:
                inner = f

                def f(p, _inner=inner):
                    value, grad = _inner(p)
                    grad = np.asarray(grad, dtype=np.float64).copy()
                    grad[0] += 1.0
                    return value, grad

            worst = max(worst, grad_check(f, params))
        results[name] = worst
    return results


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.5
    seed: int = 0
    with_dense_head: bool = True
    lambda_obj: float = 1.0
    lambda_box: float = 1.0
    lambda_cse: float = 1.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("lambda_obj", "lambda_box", "lambda_cse"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class EpochLoss:
    total: float
    obj: float
    box: float
    cse: float


@dataclass
class RunReport:
    config: TrainConfig
    losses: list[EpochLoss]
    eval_history: list[tuple[int, ApSummary]]
    final_summary: ApSummary
    mean_geodesic_error: float | None
    wall_time_s: float

    def canonical_dict(self) -> dict:
        """Everything except wall time, for determinism comparisons."""
        return {
            "config": asdict(self.config),
            "losses": [asdict(l) for l in self.losses],
            "eval_history": [[e, asdict(s)] for e, s in self.eval_history],
            "final_summary": asdict(self.final_summary),
            "mean_geodesic_error": self.mean_geodesic_error,
        }


@dataclass
class _ScenePrep:
    """Per-scene targets that depend only on the scene and anchor spec."""

    labeled_idx: np.ndarray
    labels01: np.ndarray
    positive_idx: np.ndarray
    delta_targets: np.ndarray
    roi_groups: list[tuple[int, list[CorrespondenceSample]]]  # (box index, grid samples)


def _prepare_scene(scene, anchors_arr, roi_size: int, pos_thr: float = 0.5, neg_thr: float = 0.5) -> _ScenePrep:
    # one threshold for both sides: no unsupervised ignore band, so every
    # anchor the scorer can rank high also carries trained regression
    gt_arr = np.array([b.as_array() for b in scene.gt_boxes])
    assignment = assign_anchor_labels(anchors_arr, gt_arr, pos_thr=pos_thr, neg_thr=neg_thr)
    labeled = np.flatnonzero(assignment.labels != IGNORE)
    labels01 = (assignment.labels[labeled] == POSITIVE).astype(np.float64)
    pos = assignment.positive_indices
    delta_targets = encode_deltas(anchors_arr[pos], gt_arr[assignment.matched_gt[pos]])

    matched_boxes = set(int(g) for g in assignment.matched_gt[pos])
    by_box: dict[int, list[CorrespondenceSample]] = {}
    for s in scene.correspondences:
        by_box.setdefault(int(s.source_id), []).append(s)
    roi_groups = []
    for box_idx in sorted(by_box):
        if box_idx not in matched_boxes:
            continue
        box = scene.gt_boxes[box_idx]
        grid_samples = []
        for s in by_box[box_idx]:
            fx = (s.col + 0.5 - box.x1) / box.width
            fy = (s.row + 0.5 - box.y1) / box.height
            grid_samples.append(
                CorrespondenceSample(
                    row=min(int(fy * roi_size), roi_size - 1),
                    col=min(int(fx * roi_size), roi_size - 1),
                    gt_vertex=s.gt_vertex,
                    source_id=s.source_id,
                )
            )
        roi_groups.append((box_idx, grid_samples))
    return _ScenePrep(labeled, labels01, pos, delta_targets, roi_groups)


def _flatten_obj(objectness: np.ndarray) -> np.ndarray:
    return objectness.transpose(1, 2, 0).reshape(-1)


def _flatten_deltas(deltas: np.ndarray, num_anchors: int) -> np.ndarray:
    a4, h, w = deltas.shape
    return deltas.reshape(num_anchors, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)


def _scene_losses_and_grads(bb, table, scene, prep, config, roi_size):
    outs, cache = bb.forward(scene.image)
    a = bb.num_anchors
    h, w = outs.objectness.shape[1:]
    obj_flat = _flatten_obj(outs.objectness)
    delta_flat = _flatten_deltas(outs.deltas, a)

    # objectness
    z = obj_flat[prep.labeled_idx]
    loss_obj, gz = balanced_bce_with_logits(z, prep.labels01)
    g_obj_flat = np.zeros_like(obj_flat)
    g_obj_flat[prep.labeled_idx] = gz
    g_obj_map = g_obj_flat.reshape(h, w, a).transpose(2, 0, 1)

    # box regression over positive anchors
    g_delta_flat = np.zeros_like(delta_flat)
    if prep.positive_idx.size:
        diff = delta_flat[prep.positive_idx] - prep.delta_targets
        loss_box = float(smooth_l1(diff).sum(axis=1).mean())
        g_delta_flat[prep.positive_idx] = smooth_l1_grad(diff) / prep.positive_idx.size
    else:
        loss_box = 0.0
    g_delta_map = (
        g_delta_flat.reshape(h, w, a, 4).transpose(2, 3, 0, 1).reshape(4 * a, h, w)
    )

    # dense correspondence head
    loss_cse = 0.0
    g_emb_map = np.zeros_like(outs.embeddings)
    g_table = np.zeros_like(table.values)
    if config.with_dense_head and prep.roi_groups:
        fm = FeatureMap(outs.embeddings, spatial_scale=1.0 / bb.stride)
        n_rois = len(prep.roi_groups)
        for box_idx, samples in prep.roi_groups:
            box = scene.gt_boxes[box_idx]
            pooled = roi_align(fm, box, roi_size, sampling_ratio=2)
            l, g_tab, g_field = cse_loss(table, pooled.values, samples)
            loss_cse += l / n_rois
            g_table += g_tab / n_rois
            g_emb_map += roi_align_backward(
                g_field / n_rois, fm.shape, box, roi_size, 2, fm.spatial_scale
            )

    grads = bb.backward(
        cache,
        config.lambda_obj * g_obj_map,
        config.lambda_box * g_delta_map,
        config.lambda_cse * g_emb_map,
    )
    total = (
        config.lambda_obj * loss_obj
        + config.lambda_box * loss_box
        + config.lambda_cse * loss_cse
    )
    return total, loss_obj, loss_box, loss_cse, grads, config.lambda_cse * g_table


def detect_scene(
    bb: TinyBackbone,
    scene,
    anchors_arr: np.ndarray,
    image_id: int,
    pre_nms_k: int = 300,
    post_nms_k: int = 100,
    nms_thr: float = 0.5,
) -> list[Detection]:
    """Run plain inference on one scene: score, decode, NMS, package."""
    outs, _ = bb.forward(scene.image)
    scores = sigmoid(_flatten_obj(outs.objectness))
    deltas = _flatten_deltas(outs.deltas, bb.num_anchors)
    size = float(scene.image.shape[1])
    boxes = decode_deltas(anchors_arr, deltas, image_size=(size, size))
    scored = [
        ScoredBox(Box.from_array(boxes[i]), float(scores[i])) for i in range(len(scores))
    ]
    props = select_proposals(scored, pre_nms_k, post_nms_k, nms_thr)
    return [
        Detection(image_id=image_id, box=p.box, score=p.score, category_id=1)
        for p in props
    ]


def _evaluate(bb, table, scenes, anchors_arr, config, roi_size):
    dets: list[Detection] = []
    gts: list[GroundTruthBox] = []
    for sid, scene in enumerate(scenes):
        dets.extend(detect_scene(bb, scene, anchors_arr, image_id=sid))
        gts.extend(
            GroundTruthBox(image_id=sid, box=b, category_id=1) for b in scene.gt_boxes
        )
    summary = coco_summary(dets, gts)

    mean_geo = None
    if config.with_dense_head:
        errors: list[float] = []
        for scene in scenes:
            outs, _ = bb.forward(scene.image)
            fm = FeatureMap(outs.embeddings, spatial_scale=1.0 / bb.stride)
            prep = _prepare_scene(scene, anchors_arr, roi_size)
            for box_idx, samples in prep.roi_groups:
                pooled = roi_align(fm, scene.gt_boxes[box_idx], roi_size, 2)
                for s in samples:
                    post = vertex_posterior(table, pooled.values[:, s.row, s.col])
                    errors.append(expected_geodesic_error(post, s.gt_vertex, scene.mesh))
        if errors:
            mean_geo = float(np.mean(errors))
    return summary, mean_geo


def train_toy_detector(
    config: TrainConfig,
    train_scenes: Sequence,
    val_scenes: Sequence,
    anchors: AnchorSpec = TOY_ANCHORS,
    trunk_channels: Sequence[int] = (8, 16, 16),
    embed_dim: int = 16,
    roi_size: int = 7,
    eval_interval: int = 10,
) -> RunReport:
    """Full training run over synthetic scenes; deterministic per seed.

    Each epoch makes one SGD update per scene (order reshuffled from the run
    seed) on the weighted sum of the objectness, box-regression, and (when
    the dense head is on) correspondence losses. The validation split is
    evaluated every ``eval_interval`` epochs and at the end.
    """
    if not train_scenes or not val_scenes:
        raise ValueError("need non-empty train and validation scene lists")
    start = time.perf_counter()

    sizes = {s.image.shape for s in list(train_scenes) + list(val_scenes)}
    if len(sizes) != 1:
        raise ValueError(f"scenes disagree on image shape: {sizes}")
    _, img_h, img_w = next(iter(sizes))
    bb = TinyBackbone(
        seed=config.seed,
        trunk_channels=trunk_channels,
        num_anchors=anchors.anchors_per_cell,
        embed_dim=embed_dim,
    )
    if anchors.stride != bb.stride:
        raise ValueError(
            f"anchor stride {anchors.stride} != backbone stride {bb.stride}"
        )
    if img_h % bb.stride or img_w % bb.stride:
        raise ValueError(f"image size {img_h}x{img_w} not divisible by stride {bb.stride}")

    feat_h, feat_w = img_h // bb.stride, img_w // bb.stride
    anchors_arr = anchor_grid(anchors, feat_h, feat_w)

    vertex_count = train_scenes[0].mesh.vertex_count
    table = EmbeddingMatrix.initialize(vertex_count, embed_dim, seed=config.seed)

    preps = [_prepare_scene(s, anchors_arr, roi_size) for s in train_scenes]
    rng = np.random.default_rng(config.seed)

    losses: list[EpochLoss] = []
    eval_history: list[tuple[int, ApSummary]] = []
    summary = None
    mean_geo = None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_scenes))
        epoch_terms = np.zeros(4)
        for si in order:
            total, l_obj, l_box, l_cse, grads, g_table = _scene_losses_and_grads(
                bb, table, train_scenes[si], preps[si], config, roi_size
            )
            if not math.isfinite(total):
                raise TrainingDiverged(epoch)
            for key in bb.param_keys():
                bb.weights[key] -= config.learning_rate * grads[key]
            table = EmbeddingMatrix(table.values - config.learning_rate * g_table)
            epoch_terms += (total, l_obj, l_box, l_cse)
        epoch_terms /= len(train_scenes)
        losses.append(EpochLoss(*map(float, epoch_terms)))
        if epoch % eval_interval == 0 or epoch == config.epochs:
            summary, mean_geo = _evaluate(bb, table, val_scenes, anchors_arr, config, roi_size)
            eval_history.append((epoch, summary))

    return RunReport(
        config=config,
        losses=losses,
        eval_history=eval_history,
        final_summary=summary,
        mean_geodesic_error=mean_geo,
        wall_time_s=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# Reports


def report_to_json(report: RunReport) -> str:
    import json

    doc = report.canonical_dict()
    doc["wall_time_s"] = report.wall_time_s
    return json.dumps(doc, indent=1)


def report_from_json(text: str) -> RunReport:
    import json

    doc = json.loads(text)
    return RunReport(
        config=TrainConfig(**doc["config"]),
        losses=[EpochLoss(**l) for l in doc["losses"]],
        eval_history=[(e, ApSummary(**s)) for e, s in doc["eval_history"]],
        final_summary=ApSummary(**doc["final_summary"]),
        mean_geodesic_error=doc["mean_geodesic_error"],
        wall_time_s=doc["wall_time_s"],
    )


def losses_to_csv(report: RunReport) -> str:
    lines = ["epoch,loss_total,loss_obj,loss_box,loss_cse"]
    for k, l in enumerate(report.losses, start=1):
        lines.append(f"{k},{l.total:.9g},{l.obj:.9g},{l.box:.9g},{l.cse:.9g}")
    return "\n".join(lines) + "\n"


@dataclass
class RunComparison:
    """Two summary rows and their fieldwise difference (second minus first)."""

    base_row: tuple[float, ...]
    other_row: tuple[float, ...]
    deltas: tuple[float, ...]

    def render(self) -> str:
        def cell(v: float) -> str:
            return "—" if v < 0 else f"{v * 100:.1f}"

        def dcell(d: float, a: float, b: float) -> str:
            return "—" if a < 0 or b < 0 else f"{d * 100:+.1f}"

        lines = [
            "AP AP50 AP75 APs APm APl",
            " ".join(cell(v) for v in self.base_row),
            " ".join(cell(v) for v in self.other_row),
            " ".join(
                dcell(d, a, b)
                for d, a, b in zip(self.deltas, self.base_row, self.other_row)
            ),
        ]
        return "\n".join(lines) + "\n"


def compare_runs(base: RunReport, other: RunReport) -> RunComparison:
    """Fieldwise comparison of two final summaries, rendered in table form."""
    row_a = base.final_summary.row()
    row_b = other.final_summary.row()
    deltas = tuple(b - a for a, b in zip(row_a, row_b))
    return RunComparison(base_row=row_a, other_row=row_b, deltas=deltas)
