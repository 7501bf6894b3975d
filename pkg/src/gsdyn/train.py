"""Loss assembly, gradients through unrolled integration, and the training loop.

Training supervises Gaussian-center trajectories at sparse frames (the
rasterizer is evaluation-only).  The total objective is

    total = data + lambda_coh * coherence + lambda_anchor * anchor + lambda_tv * tv

Gradients are exact reverse-mode derivatives of the discrete computation
graph: every RK4 stage of every step is cached on the forward pass and
replayed backward (discretize-then-differentiate, no adjoint ODE).  The
differentiable state per Gaussian is (position, rotation-tangent, log-scale
increment); the tangent channels accumulate linearly, so the anchor loss in
tangent space stays an exact quadratic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional

import numpy as np

from . import arrayio, feature_grid
from .anchors import AnchorSet
from .fields import NeuralVelocityField, VelocityField
from .scene import GaussianCloud, SceneData, knn, mean_neighbor_distance

COHERENCE_EPS = 1e-8  # the unspecified denominator epsilon


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    lambda_coh: float = 0.01
    lambda_anchor: float = 0.1
    lambda_tv: float = 1e-4
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1500
    frame_stride: int = 1  # train on every k-th frame
    train_fraction: float = 1.0  # supervise only frames with t <= fraction
    knn_k: int = 8
    coherence_step: float = 0.02
    coherence_variant: str = "relative"  # "literal" or "relative"
    coherence_batch: int = 256
    seed: int = 0
    steps_per_unit: int = 32  # training-time integration resolution
    hidden: tuple = (64, 64)
    grid_spatial_resolution: int = 32
    grid_time_resolution: int = 16
    grid_channels: int = 8

    def __post_init__(self):
        if min(self.lambda_coh, self.lambda_anchor, self.lambda_tv) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0.0 < self.train_fraction <= 1.0):
            raise ValueError("train_fraction must be in (0, 1]")
        if self.coherence_variant not in ("literal", "relative"):
            raise ValueError(f"unknown coherence variant {self.coherence_variant!r}")


@dataclass(frozen=True)
class LossReport:
    total: float
    data: float
    coherence: float
    anchor: float
    tv: float
    epoch: int = 0


def total_loss(data: float, coherence: float, anchor: float, tv: float, config: TrainingConfig, epoch: int = 0):
    """Weighted sum of the four terms; returns (total, LossReport)."""
    for name, v in (("data", data), ("coherence", coherence), ("anchor", anchor), ("tv", tv)):
        if not math.isfinite(v):
            raise TrainingError(f"non-finite loss term: {name}")
    total = data + config.lambda_coh * coherence + config.lambda_anchor * anchor + config.lambda_tv * tv
    return total, LossReport(total=total, data=data, coherence=coherence, anchor=anchor, tv=tv, epoch=epoch)


def trajectory_data_loss(predicted: np.ndarray, ground_truth: np.ndarray) -> float:
    """Mean squared position error over (frames x Gaussians)."""
    predicted = np.asarray(predicted, dtype=float)
    ground_truth = np.asarray(ground_truth, dtype=float)
    if predicted.shape != ground_truth.shape:
        raise ValueError(f"frame mismatch: predicted {predicted.shape} vs ground truth {ground_truth.shape}")
    return float(np.mean(np.sum((predicted - ground_truth) ** 2, axis=-1)))


def adam_step(params, grads, moments, config: TrainingConfig, step_index: int):
    """Standard bias-corrected Adam update, in place.

    moments is (m, v) — lists of arrays shaped like params; pass None on the
    first call.  Returns (params, moments).
    """
    if moments is None:
        moments = ([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    m, v = moments
    if not (len(params) == len(grads) == len(m) == len(v)):
        raise ValueError("parameter / gradient group count mismatch")
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**step_index
    bc2 = 1.0 - b2**step_index
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
        mi *= b1
        mi += (1 - b1) * g
        vi *= b2
        vi += (1 - b2) * g**2
        p -= config.learning_rate * (mi / bc1) / (np.sqrt(vi / bc2) + config.adam_eps)
    return params, moments


# ---------------------------------------------------------------------------
# Differentiable unrolled integration (neural field only)

_RK4_WEIGHTS = (1.0, 2.0, 2.0, 1.0)


def _forward_rk4_step(field: NeuralVelocityField, p, t, h):
    """One RK4 step on (position, tangent, scale-increment); caches all stages."""
    outs, caches = [], []
    stage_p = p
    stage_dt = (0.0, 0.5 * h, 0.5 * h, h)
    for i in range(4):
        out, cache = field.forward(stage_p, t + stage_dt[i], want_cache=True)
        outs.append(out)
        caches.append(cache)
        if i < 3:
            adv = h if i == 2 else 0.5 * h
            stage_p = p + adv * out[:, 0:3]
    comb = (h / 6.0) * sum(w * o for w, o in zip(_RK4_WEIGHTS, outs))
    p_next = p + comb[:, 0:3]
    theta_inc = comb[:, 3:6]
    scale_inc = comb[:, 6:9]
    return p_next, theta_inc, scale_inc, (caches, h)


def _backward_rk4_step(field: NeuralVelocityField, step_cache, g_p, g_theta, g_scale, grads):
    """Reverse one RK4 step: upstream (g_p, g_theta, g_scale) on the step's
    outputs -> gradient on the step's input position; params accumulate into
    ``grads``.  Tangent/scale gradients pass through unchanged (linear
    accumulation)."""
    caches, h = step_cache
    w6 = [h * w / 6.0 for w in _RK4_WEIGHTS]
    stage_adv = (0.5 * h, 0.5 * h, h)  # advance used to build stage i+1 from k_i
    g_stage_p = [None] * 4
    g_p_total = g_p.copy()
    for i in range(3, -1, -1):
        u_k = w6[i] * g_p
        if i < 3 and g_stage_p[i + 1] is not None:
            u_k = u_k + stage_adv[i] * g_stage_p[i + 1]
        upstream = np.concatenate([u_k, w6[i] * g_theta, w6[i] * g_scale], axis=1)
        stage_grads, g_pos = field.backward(caches[i], upstream)
        for acc, sg in zip(grads, stage_grads):
            acc += sg
        g_stage_p[i] = g_pos
        g_p_total += g_pos
    return g_p_total


@dataclass
class UnrollCache:
    """Forward tape of an unrolled integration segment."""

    step_caches: list
    checkpoint_after_step: list  # step index (1-based) at which each checkpoint was recorded
    n_gaussians: int


def unroll_segment(field: NeuralVelocityField, p0, t_start, checkpoint_times, steps_per_unit):
    """Integrate positions from (p0, t_start) through the checkpoint times.

    Step sizes are uniform within each sub-span, ceil(|span| * steps_per_unit)
    steps per sub-span.  Returns (checkpoints, cache) where checkpoints is a
    list of (positions, rotation-tangents, scale-increments) at each
    checkpoint time; tangents/increments are relative to the segment start.
    """
    p = np.asarray(p0, dtype=float)
    n = p.shape[0]
    theta = np.zeros((n, 3))
    scale = np.zeros((n, 3))
    t = t_start
    step_caches = []
    checkpoint_after_step = []
    checkpoints = []
    for t_ck in checkpoint_times:
        span = t_ck - t
        if span == 0:
            checkpoints.append((p.copy(), theta.copy(), scale.copy()))
            checkpoint_after_step.append(len(step_caches))
            continue
        n_steps = max(1, math.ceil(abs(span) * steps_per_unit))
        h = span / n_steps
        for s in range(n_steps):
            p, dtheta, dscale, cache = _forward_rk4_step(field, p, t + s * h, h)
            theta = theta + dtheta
            scale = scale + dscale
            step_caches.append(cache)
        t = t_ck
        checkpoints.append((p.copy(), theta.copy(), scale.copy()))
        checkpoint_after_step.append(len(step_caches))
    return checkpoints, UnrollCache(step_caches, checkpoint_after_step, n)


def backward_through_rollout(field: NeuralVelocityField, cache: UnrollCache, checkpoint_grads, grads=None):
    """Exact reverse-mode gradients through an unrolled segment.

    checkpoint_grads aligns with the cache's checkpoints; each entry is
    (g_position, g_tangent, g_scale) or None.  Returns parameter gradients
    aligned with ``field.parameters()`` (accumulated into ``grads`` when
    given).
    """
    if len(checkpoint_grads) != len(cache.checkpoint_after_step):
        raise TrainingError(
            f"cache holds {len(cache.checkpoint_after_step)} checkpoints, got {len(checkpoint_grads)} gradients"
        )
    if grads is None:
        grads = field.zero_grads()
    n = cache.n_gaussians
    g_p = np.zeros((n, 3))
    g_theta = np.zeros((n, 3))
    g_scale = np.zeros((n, 3))
    remaining = list(zip(cache.checkpoint_after_step, checkpoint_grads))
    for step in range(len(cache.step_caches), -1, -1):
        while remaining and remaining[-1][0] == step:
            _, ck = remaining.pop()
            if ck is not None:
                gp, gt, gs = ck
                if gp is not None:
                    g_p += gp
                if gt is not None:
                    g_theta += gt
                if gs is not None:
                    g_scale += gs
        if step > 0:
            g_p = _backward_rk4_step(field, cache.step_caches[step - 1], g_p, g_theta, g_scale, grads)
    return grads


# ---------------------------------------------------------------------------
# Coherence regularizer


def _pair_weights(positions, neighbors, rows=None):
    """Distance weights w_ij = exp(-||x_i - x_j|| / sigma), sigma = mean/2."""
    neighbors = np.asarray(neighbors)
    d_all = np.linalg.norm(positions[:, None, :] - positions[neighbors], axis=-1)
    mean_d = float(d_all.mean())
    if mean_d == 0.0:
        raise TrainingError("coincident points: sigma degenerates to 0")
    sigma = 0.5 * mean_d
    if rows is not None:
        d_all = d_all[rows]
    return np.exp(-d_all / sigma), sigma


def coherence_loss(
    cloud: GaussianCloud,
    neighbors: np.ndarray,
    field: VelocityField,
    h: float,
    variant: str = "literal",
    t: float = None,
) -> float:
    """Distance-weighted penalty on neighbor positions after one RK4 step.

    literal: sum w_ij * ||xh_i - xh_j||^2 / (sum w_ij + eps), exactly the
    displayed form (nonzero even for a static scene).  relative: the
    numerator compares post-step neighbor offsets against the canonical
    offsets, so any uniform translation scores zero.
    """
    if h <= 0:
        raise ValueError("coherence step h must be positive")
    t = cloud.time if t is None else t
    p = cloud.positions
    xh = _rk4_positions_once(field, p, t, h)
    return _coherence_value(p, xh, neighbors, variant)


def _rk4_positions_once(field: VelocityField, p, t, h):
    k1 = field.evaluate_batch(p, None, t).d_position
    k2 = field.evaluate_batch(p + 0.5 * h * k1, None, t + 0.5 * h).d_position
    k3 = field.evaluate_batch(p + 0.5 * h * k2, None, t + 0.5 * h).d_position
    k4 = field.evaluate_batch(p + h * k3, None, t + h).d_position
    return p + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _coherence_value(p, xh, neighbors, variant, rows=None):
    w, _ = _pair_weights(p, neighbors, rows)
    if rows is None:
        rows = np.arange(p.shape[0])
    diff = xh[rows][:, None, :] - xh[np.asarray(neighbors)[rows]]
    if variant == "relative":
        diff = diff - (p[rows][:, None, :] - p[np.asarray(neighbors)[rows]])
    elif variant != "literal":
        raise ValueError(f"unknown coherence variant {variant!r}")
    num = float(np.sum(w * np.sum(diff**2, axis=-1)))
    den = float(np.sum(w)) + COHERENCE_EPS
    return num / den


def _coherence_grad_xh(p, xh, neighbors, variant, rows=None):
    """Gradient of the coherence value w.r.t. the post-step positions."""
    w, _ = _pair_weights(p, neighbors, rows)
    if rows is None:
        rows = np.arange(p.shape[0])
    nb = np.asarray(neighbors)[rows]
    diff = xh[rows][:, None, :] - xh[nb]
    if variant == "relative":
        diff = diff - (p[rows][:, None, :] - p[nb])
    den = float(np.sum(w)) + COHERENCE_EPS
    g = np.zeros_like(xh)
    contrib = 2.0 * w[:, :, None] * diff / den
    np.add.at(g, rows, contrib.sum(axis=1))
    np.add.at(g, nb, -contrib)
    return g


# ---------------------------------------------------------------------------
# Training plan and loop


@dataclass
class _Segment:
    t_start: float
    p_start: np.ndarray  # (N, 3) ground-truth anchor positions
    checkpoint_times: list
    data_targets: list  # (N, 3) or None per checkpoint
    anchor_end: list  # bool per checkpoint


@dataclass
class _Plan:
    cloud: GaussianCloud
    segments: list
    anchor_times: list
    anchor_positions: list
    neighbors: np.ndarray
    n_data_frames: int


@dataclass
class FitResult:
    field: NeuralVelocityField
    anchors: AnchorSet
    history: list
    supervised_times: np.ndarray
    config: TrainingConfig


def _build_plan(scene: SceneData, config: TrainingConfig) -> _Plan:
    if not scene.has_trajectories:
        raise TrainingError("scene provides no ground-truth trajectories")
    times = scene.trajectory_times
    keep = np.arange(0, len(times), config.frame_stride)
    keep = keep[times[keep] <= config.train_fraction + 1e-12]
    if len(keep) < 2:
        raise TrainingError(f"only {len(keep)} supervised frames after stride/fraction filtering; need >= 2")
    sup_t = times[keep]
    sup_p = scene.trajectory_positions[keep]

    # anchors at start / midpoint / end of the training window, snapped to
    # supervised frames; the final anchor is dropped in extrapolation runs
    mid_idx = int(np.argmin(np.abs(sup_t - 0.5 * (sup_t[0] + sup_t[-1]))))
    anchor_idx = [0, mid_idx, len(sup_t) - 1]
    if config.train_fraction < 1.0:
        anchor_idx = anchor_idx[:-1]
    anchor_idx = sorted(set(anchor_idx))

    segments = []
    for a_pos, a in enumerate(anchor_idx):
        if a_pos + 1 < len(anchor_idx):
            stop = anchor_idx[a_pos + 1]
        elif a < len(sup_t) - 1:
            stop = len(sup_t) - 1  # trailing segment beyond the last anchor
        else:
            continue
        ck_times, targets, is_anchor = [], [], []
        for j in range(a + 1, stop + 1):
            ck_times.append(float(sup_t[j]))
            targets.append(sup_p[j])
            is_anchor.append(j in anchor_idx)
        segments.append(
            _Segment(
                t_start=float(sup_t[a]),
                p_start=sup_p[a],
                checkpoint_times=ck_times,
                data_targets=targets,
                anchor_end=is_anchor,
            )
        )

    n = len(scene.cloud)
    k = min(config.knn_k, n - 1)
    neighbors = knn(scene.cloud, k)
    n_data = sum(len(s.checkpoint_times) for s in segments)
    return _Plan(
        cloud=scene.cloud,
        segments=segments,
        anchor_times=[float(sup_t[i]) for i in anchor_idx],
        anchor_positions=[sup_p[i] for i in anchor_idx],
        neighbors=neighbors,
        n_data_frames=n_data,
    )


def _epoch_losses_and_grads(field: NeuralVelocityField, plan: _Plan, config: TrainingConfig, coh_rows=None,
                            want_grads: bool = True):
    """One full forward (and optionally backward) pass over the plan."""
    n = len(plan.cloud)
    grads = field.zero_grads() if want_grads else None
    data_sum = 0.0
    anchor_sum = 0.0
    denom = max(1, plan.n_data_frames) * n

    for seg in plan.segments:
        checkpoints, cache = unroll_segment(
            field, seg.p_start, seg.t_start, seg.checkpoint_times, config.steps_per_unit
        )
        ck_grads = []
        for (p, theta, scale), target, is_anchor in zip(checkpoints, seg.data_targets, seg.anchor_end):
            dp = p - target
            data_sum += float(np.sum(dp**2))
            gp = 2.0 * dp / denom
            gt = gs = None
            if is_anchor:
                anchor_sum += float(np.sum(dp**2) + np.sum(theta**2) + np.sum(scale**2))
                gp = gp + config.lambda_anchor * 2.0 * dp
                gt = config.lambda_anchor * 2.0 * theta
                gs = config.lambda_anchor * 2.0 * scale
            ck_grads.append((gp, gt, gs))
        if want_grads:
            backward_through_rollout(field, cache, ck_grads, grads)
    data = data_sum / denom

    # coherence: one short RK4 step from the canonical cloud
    p0 = plan.cloud.positions
    h = config.coherence_step
    t0 = plan.cloud.time
    p_next, _, _, step_cache = _forward_rk4_step(field, p0, t0, h)
    coherence = _coherence_value(p0, p_next, plan.neighbors, config.coherence_variant, coh_rows)
    if want_grads and config.lambda_coh > 0:
        g_xh = config.lambda_coh * _coherence_grad_xh(p0, p_next, plan.neighbors, config.coherence_variant, coh_rows)
        _backward_rk4_step(field, step_cache, g_xh, np.zeros((n, 3)), np.zeros((n, 3)), grads)

    tv = feature_grid.tv_loss(field.grid)
    if want_grads and config.lambda_tv > 0:
        tv_g = feature_grid.tv_grad(field.grid)
        n_mlp = 2 * len(field.weights)
        for k in range(6):
            grads[n_mlp + k] += config.lambda_tv * tv_g[k]

    total, report = total_loss(data, coherence, anchor_sum, tv, config)
    return report, grads


def fit(scene: SceneData, config: TrainingConfig = TrainingConfig()) -> FitResult:
    """Train a neural velocity field on a scene's sparse-frame trajectories.

    Deterministic for a fixed (scene, config, seed): same seed twice gives a
    bitwise-identical loss history.
    """
    plan = _build_plan(scene, config)
    n = len(scene.cloud)

    # grid bounds cover the supervised motion range with margin, so rollouts
    # that leave the window hit the clamped (constant) continuation late
    all_p = scene.trajectory_positions.reshape(-1, 3)
    extent = all_p.max(axis=0) - all_p.min(axis=0)
    pad = 0.25 * np.maximum(extent, 0.1) + 0.1
    grid = feature_grid.create_grid(
        all_p.min(axis=0) - pad,
        all_p.max(axis=0) + pad,
        spatial_resolution=config.grid_spatial_resolution,
        time_resolution=config.grid_time_resolution,
        channels=config.grid_channels,
        seed=config.seed,
    )
    # zero output layer: initial velocities are exactly zero
    field = NeuralVelocityField(grid, hidden=config.hidden, seed=config.seed + 1, output_scale=0.0)

    rng = np.random.default_rng(config.seed + 2)
    params = field.parameters()
    moments = None
    history = []
    for epoch in range(config.epochs):
        coh_rows = None
        if n > config.coherence_batch:
            coh_rows = np.sort(rng.choice(n, size=config.coherence_batch, replace=False))
        report, grads = _epoch_losses_and_grads(field, plan, config, coh_rows)
        params, moments = adam_step(params, grads, moments, config, epoch + 1)
        history.append(replace(report, epoch=epoch))

    anchor_set = AnchorSet()
    for t_a, p_a in zip(plan.anchor_times, plan.anchor_positions):
        anchor_set.insert(scene.cloud.with_positions(p_a), t_a)
    sup_times = np.array(sorted({t for seg in plan.segments for t in [seg.t_start, *seg.checkpoint_times]}))
    return FitResult(field=field, anchors=anchor_set, history=history, supervised_times=sup_times, config=config)


# ---------------------------------------------------------------------------
# Checkpoint bundle (mlp weights + grid planes + anchors)


def save_checkpoint(path, field: NeuralVelocityField, anchor_set: AnchorSet = None, extra_meta: dict = None):
    meta = {
        "kind": "gsdyn_checkpoint",
        "hidden": [w.shape[1] for w in field.weights[:-1]],
        "time_frequencies": field.time_frequencies,
        "grid": {"t0": field.grid.t0, "t1": field.grid.t1, "channels": field.grid.channels},
        "n_layers": len(field.weights),
        "n_anchors": 0 if anchor_set is None else len(anchor_set),
        "anchor_times": [] if anchor_set is None else [a.time for a in anchor_set],
    }
    if extra_meta:
        meta["extra"] = extra_meta
    arrays = {}
    for i, (w, b) in enumerate(zip(field.weights, field.biases)):
        arrays[f"mlp_w{i}"] = w
        arrays[f"mlp_b{i}"] = b
    for name, plane in zip(feature_grid.PLANE_ORDER, field.grid.planes):
        arrays[f"plane_{name}"] = plane
    arrays["bounds_lo"] = field.grid.bounds_lo
    arrays["bounds_hi"] = field.grid.bounds_hi
    if anchor_set is not None and len(anchor_set) > 0:
        arrays["anchor_positions"] = np.stack([a.cloud.positions for a in anchor_set])
        arrays["anchor_rotations"] = np.stack([a.cloud.rotations for a in anchor_set])
        arrays["anchor_log_scales"] = np.stack([a.cloud.log_scales for a in anchor_set])
        arrays["anchor_colors"] = anchor_set[0].cloud.colors
        arrays["anchor_opacities"] = anchor_set[0].cloud.opacities
    arrayio.save_bundle(path, meta, arrays)


def load_checkpoint(path):
    """Returns (field, anchor_set or None, meta)."""
    meta, arrays = arrayio.load_bundle(path)
    if meta.get("kind") != "gsdyn_checkpoint":
        raise ValueError(f"{path}: not a training checkpoint")
    grid = feature_grid.HexPlaneGrid(
        planes=[arrays[f"plane_{n}"] for n in feature_grid.PLANE_ORDER],
        bounds_lo=arrays["bounds_lo"],
        bounds_hi=arrays["bounds_hi"],
        t0=float(meta["grid"]["t0"]),
        t1=float(meta["grid"]["t1"]),
    )
    field = NeuralVelocityField(
        grid, hidden=tuple(meta["hidden"]), time_frequencies=int(meta["time_frequencies"])
    )
    field.weights = [arrays[f"mlp_w{i}"] for i in range(meta["n_layers"])]
    field.biases = [arrays[f"mlp_b{i}"] for i in range(meta["n_layers"])]
    anchor_set = None
    if meta.get("n_anchors", 0) > 0:
        anchor_set = AnchorSet()
        template = GaussianCloud(
            positions=arrays["anchor_positions"][0],
            rotations=arrays["anchor_rotations"][0],
            log_scales=arrays["anchor_log_scales"][0],
            colors=arrays["anchor_colors"],
            opacities=arrays["anchor_opacities"],
        )
        for i, t_a in enumerate(meta["anchor_times"]):
            cloud = template.evolved(
                positions=arrays["anchor_positions"][i],
                rotations=arrays["anchor_rotations"][i],
                log_scales=arrays["anchor_log_scales"][i],
                time=min(max(t_a, 0.0), 1.0),
            )
            anchor_set.insert(cloud, t_a)
    return field, anchor_set, meta
