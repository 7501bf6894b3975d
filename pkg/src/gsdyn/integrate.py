"""Fixed-step ODE solvers and rollouts for Gaussian clouds.

Euler and classical RK4 steps advance position, rotation (in the
angular-velocity tangent parameterization, composed via the quaternion
exponential after the combined step), and log-scale.  Second-order fields
additionally carry a per-Gaussian auxiliary velocity.  Post-step events
(e.g. floor bounce) are applied once per accepted step, never per stage.

Negative step sizes integrate backward; forward-then-backward round trips on
smooth fields cancel to solver accuracy, which is what makes learned
dynamics reversible in practice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import quaternions
from .anchors import AnchorSet, nearest_future_anchor, nearest_past_anchor
from .fields import VelocityField
from .scene import GaussianCloud, GaussianState


class IntegrationError(Exception):
    """Raised when a step produces non-finite state.

    Carries enough context to locate the failure: step index, stage name,
    and the first offending Gaussian index.
    """

    def __init__(self, message, step_index=None, stage=None, gaussian_index=None):
        super().__init__(message)
        self.step_index = step_index
        self.stage = stage
        self.gaussian_index = gaussian_index


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"  # "euler" or "rk4"
    step_count: int = 100  # steps per unit time interval
    record_stride: int = 1

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.step_count < 1:
            raise ValueError("step_count must be >= 1")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")


@dataclass
class Trajectory:
    """Recorded snapshots of an integrated cloud.

    times are strictly monotone (increasing forward, decreasing backward).
    positions are always recorded; rotations/log-scales and auxiliary
    velocities optionally.  ``template`` keeps the constant attributes
    (color, opacity) so snapshots can be rebuilt as clouds.
    """

    times: np.ndarray  # (F,)
    positions: np.ndarray  # (F, N, 3)
    rotations: Optional[np.ndarray] = None  # (F, N, 4)
    log_scales: Optional[np.ndarray] = None  # (F, N, 3)
    aux_velocities: Optional[np.ndarray] = None  # (F, N, 3)
    template: Optional[GaussianCloud] = None

    def __len__(self):
        return len(self.times)

    def cloud_at(self, index: int) -> GaussianCloud:
        if self.template is None:
            raise ValueError("trajectory has no template cloud")
        return self.template.evolved(
            positions=self.positions[index],
            rotations=None if self.rotations is None else self.rotations[index],
            log_scales=None if self.log_scales is None else self.log_scales[index],
            time=float(self.times[index]),
        )


def _check_finite(arrs, step_index, stage):
    for a in arrs:
        if a is None:
            continue
        bad = ~np.isfinite(a)
        if np.any(bad):
            gi = int(np.argwhere(bad.any(axis=tuple(range(1, a.ndim))))[0, 0]) if a.ndim > 1 else None
            raise IntegrationError(
                f"non-finite state at step {step_index}, stage {stage}, gaussian {gi}",
                step_index=step_index,
                stage=stage,
                gaussian_index=gi,
            )


def _eval(field, p, v, t, step_index, stage):
    d = field.evaluate_batch(p, v, t, step_index=step_index)
    _check_finite([d.d_position, d.d_rotation, d.d_log_scale, d.d_velocity], step_index, stage)
    return d


def euler_step_arrays(field, p, q, ls, v, t, h, step_index=0):
    """One explicit Euler step on the batch arrays; returns (p, q, ls, v)."""
    if h == 0:
        raise ValueError("step size must be nonzero")
    d = _eval(field, p, v, t, step_index, "euler")
    p2 = p + h * d.d_position
    q2 = quaternions.apply_increment(q, h * d.d_rotation)
    ls2 = ls + h * d.d_log_scale
    v2 = v + h * d.d_velocity if d.d_velocity is not None else v
    p2, v2 = field.apply_events(p2, v2, t + h, step_index=step_index)
    _check_finite([p2, q2, ls2, v2], step_index, "post-euler")
    return p2, q2, ls2, v2


def rk4_step_arrays(field, p, q, ls, v, t, h, step_index=0):
    """One classical RK4 step: x + (h/6)(k1 + 2 k2 + 2 k3 + k4).

    Rotation and log-scale derivatives are combined with the same stage
    weights; the rotation tangent increment is applied once via the
    quaternion exponential after the combination (angular velocity treated
    as constant within the step).
    """
    if h == 0:
        raise ValueError("step size must be nonzero")
    k1 = _eval(field, p, v, t, step_index, "k1")
    v1 = v if k1.d_velocity is None else v + 0.5 * h * k1.d_velocity
    k2 = _eval(field, p + 0.5 * h * k1.d_position, v1, t + 0.5 * h, step_index, "k2")
    v2 = v if k2.d_velocity is None else v + 0.5 * h * k2.d_velocity
    k3 = _eval(field, p + 0.5 * h * k2.d_position, v2, t + 0.5 * h, step_index, "k3")
    v3 = v if k3.d_velocity is None else v + h * k3.d_velocity
    k4 = _eval(field, p + h * k3.d_position, v3, t + h, step_index, "k4")

    w = h / 6.0
    p2 = p + w * (k1.d_position + 2 * k2.d_position + 2 * k3.d_position + k4.d_position)
    dtheta = w * (k1.d_rotation + 2 * k2.d_rotation + 2 * k3.d_rotation + k4.d_rotation)
    q2 = quaternions.apply_increment(q, dtheta)
    ls2 = ls + w * (k1.d_log_scale + 2 * k2.d_log_scale + 2 * k3.d_log_scale + k4.d_log_scale)
    if k1.d_velocity is not None:
        v2 = v + w * (k1.d_velocity + 2 * k2.d_velocity + 2 * k3.d_velocity + k4.d_velocity)
    else:
        v2 = v
    p2, v2 = field.apply_events(p2, v2, t + h, step_index=step_index)
    _check_finite([p2, q2, ls2, v2], step_index, "post-rk4")
    return p2, q2, ls2, v2


_STEPPERS = {"euler": euler_step_arrays, "rk4": rk4_step_arrays}


def euler_step(state: GaussianState, velocity, t: float, h: float, field: VelocityField):
    """Single-state Euler step; returns (next state, next aux velocity)."""
    return _single_step(euler_step_arrays, state, velocity, t, h, field)


def rk4_step(state: GaussianState, velocity, t: float, h: float, field: VelocityField):
    """Single-state RK4 step; returns (next state, next aux velocity)."""
    return _single_step(rk4_step_arrays, state, velocity, t, h, field)


def _single_step(stepper, state, velocity, t, h, field):
    v = np.zeros(3) if velocity is None else np.asarray(velocity, dtype=float)
    p, q, ls, v2 = stepper(
        field,
        state.position[None, :],
        state.rotation[None, :],
        state.log_scale[None, :],
        v[None, :],
        t,
        h,
    )
    next_state = GaussianState(
        position=p[0], rotation=q[0], log_scale=ls[0], color=state.color, opacity=state.opacity
    )
    return next_state, v2[0]


def rollout(
    cloud: GaussianCloud,
    t0: float,
    t1: float,
    config: IntegratorConfig,
    field: VelocityField,
    velocities: Optional[np.ndarray] = None,
) -> Trajectory:
    """Integrate the whole cloud from t0 to t1 with uniform steps.

    h = (t1 - t0) / step_count; t1 < t0 integrates backward.  Snapshots are
    recorded every record_stride steps plus both endpoints.
    """
    if t0 == t1:
        raise ValueError("rollout needs t0 != t1")
    n = len(cloud)
    h = (t1 - t0) / config.step_count
    stepper = _STEPPERS[config.method]

    p = cloud.positions.copy()
    q = cloud.rotations.copy()
    ls = cloud.log_scales.copy()
    v = np.zeros((n, 3)) if velocities is None else np.asarray(velocities, dtype=float).copy()

    times = [t0]
    rec_p, rec_q, rec_ls, rec_v = [p.copy()], [q.copy()], [ls.copy()], [v.copy()]
    for s in range(config.step_count):
        t = t0 + s * h
        p, q, ls, v = stepper(field, p, q, ls, v, t, h, step_index=s)
        if (s + 1) % config.record_stride == 0 or s + 1 == config.step_count:
            times.append(t0 + (s + 1) * h)
            rec_p.append(p.copy())
            rec_q.append(q.copy())
            rec_ls.append(ls.copy())
            rec_v.append(v.copy())
    return Trajectory(
        times=np.array(times),
        positions=np.array(rec_p),
        rotations=np.array(rec_q),
        log_scales=np.array(rec_ls),
        aux_velocities=np.array(rec_v) if field.second_order else None,
        template=cloud,
    )


def anchor_aware_rollout(
    anchor_set: AnchorSet,
    t: float,
    config: IntegratorConfig,
    field: VelocityField,
) -> GaussianCloud:
    """State at time t, integrating only from the nearest admissible anchor.

    Forward queries start from the nearest past anchor; queries before the
    first anchor integrate backward from the nearest future one.  The span
    never crosses an intervening anchor, so the effective integration
    horizon stays short.
    """
    if len(anchor_set) == 0:
        raise ValueError("anchor set is empty")
    try:
        anchor = nearest_past_anchor(anchor_set, t)
    except ValueError:
        anchor = nearest_future_anchor(anchor_set, t)
    if anchor.time == t:
        return anchor.cloud
    span = t - anchor.time
    steps = max(1, round(abs(span) * config.step_count))
    cfg = IntegratorConfig(method=config.method, step_count=steps, record_stride=steps)
    traj = rollout(anchor.cloud, anchor.time, t, cfg, field, velocities=anchor.velocities)
    return traj.cloud_at(len(traj) - 1)
