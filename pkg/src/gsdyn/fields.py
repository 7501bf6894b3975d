"""Velocity fields: the dynamical law driving Gaussian evolution.

A field maps (state, auxiliary velocity, time) to a state time-derivative.
Three families live here: the neural field (an MLP conditioned on factorized
space-time features), ten analytic fields, and composition wrappers that add
or spatially blend fields into new ones.  Evaluation is pure; per-Gaussian
auxiliary velocity for second-order fields is owned by the rollout, not the
field.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import feature_grid
from .scene import GaussianState


class FieldError(Exception):
    """Raised for invalid field parameters or evaluation failures."""


@dataclass
class StateDerivative:
    """Time-derivative of one Gaussian state.

    d_rotation is an angular-velocity 3-vector (applied via the exponential
    map by the integrator).  d_velocity is present only for second-order
    fields, where d_position is the auxiliary velocity itself.  Color and
    opacity never change under the dynamics.
    """

    d_position: np.ndarray
    d_rotation: np.ndarray
    d_log_scale: np.ndarray
    d_velocity: Optional[np.ndarray] = None


@dataclass
class BatchDerivative:
    d_position: np.ndarray  # (N, 3)
    d_rotation: np.ndarray  # (N, 3)
    d_log_scale: np.ndarray  # (N, 3)
    d_velocity: Optional[np.ndarray] = None  # (N, 3) for second-order fields

    def __getitem__(self, i: int) -> StateDerivative:
        return StateDerivative(
            d_position=self.d_position[i],
            d_rotation=self.d_rotation[i],
            d_log_scale=self.d_log_scale[i],
            d_velocity=None if self.d_velocity is None else self.d_velocity[i],
        )


def _zeros(n):
    return np.zeros((n, 3))


class VelocityField:
    """Abstract evaluator producing state time-derivatives.

    Subclasses implement :meth:`evaluate_batch`; everything else builds on
    it.  ``second_order`` marks fields whose dynamics read and write an
    auxiliary per-Gaussian velocity.
    """

    second_order: bool = False

    def evaluate_batch(self, positions, velocities, t, step_index=0) -> BatchDerivative:
        raise NotImplementedError

    def evaluate(self, state, velocity=None, t: float = 0.0, step_index: int = 0) -> StateDerivative:
        """Single-state convenience wrapper around :meth:`evaluate_batch`."""
        position = state.position if isinstance(state, GaussianState) else np.asarray(state, dtype=float)
        v = np.zeros(3) if velocity is None else np.asarray(velocity, dtype=float)
        batch = self.evaluate_batch(position[None, :], v[None, :], t, step_index=step_index)
        return batch[0]

    def apply_events(self, positions, velocities, t: float = 0.0, step_index: int = 0):
        """Post-step event handler (e.g. floor bounce); identity by default.

        Called once after each accepted integration step, never per stage.
        """
        return positions, velocities

    def apply_events_state(self, state, velocity, t: float = 0.0):
        """Single-state wrapper for :meth:`apply_events`."""
        position = state.position if isinstance(state, GaussianState) else np.asarray(state, dtype=float)
        p, v = self.apply_events(position[None, :].copy(), np.asarray(velocity, dtype=float)[None, :].copy(), t)
        return p[0], v[0]


class ZeroField(VelocityField):
    def evaluate_batch(self, positions, velocities, t, step_index=0):
        n = positions.shape[0]
        return BatchDerivative(_zeros(n), _zeros(n), _zeros(n))


# ---------------------------------------------------------------------------
# Analytic fields


ANALYTIC_KINDS = (
    "gravity_bounce",
    "drift",
    "spin",
    "swirl",
    "diffusion_gas",
    "vortex",
    "wave",
    "wind_curl",
    "orbital",
    "reaction_diffusion",
)

_SECOND_ORDER_KINDS = {"gravity_bounce", "orbital", "diffusion_gas", "reaction_diffusion"}
_STOCHASTIC_KINDS = {"swirl", "diffusion_gas", "wind_curl", "reaction_diffusion"}

_DEFAULT_PARAMS = {
    "gravity_bounce": {"g": -9.8, "z0": 0.0, "gamma": 0.8},
    "drift": {"delta": 1.0},
    "spin": {"center": (0.0, 0.0, 0.0), "omega": 1.0},
    "swirl": {"s0": 1.0, "s1": 1.0, "eta": 0.0},
    "diffusion_gas": {"sigma": 0.1, "d": (0.0, 0.0, 0.0)},
    "vortex": {"omega": 1.0, "k": 0.1, "u0": 0.5},
    "wave": {"A": 1.0, "f": 1.0, "c": 1.0},
    "wind_curl": {"w": 1.0, "c": 0.5, "eta": 0.0},
    "orbital": {"center": (0.0, 0.0, 0.0), "G": 1.0, "mu": 0.0},
    "reaction_diffusion": {"noise_scale": 1.0},
}


class AnalyticField(VelocityField):
    """One of the ten closed-form fields, selected by ``kind``.

    Stochastic kinds draw their noise from a counter-based generator keyed
    by (seed, step index), so evaluation is deterministic and independent of
    how the cloud is partitioned across workers.  Noise is held constant
    across the stages of a single integration step.
    """

    def __init__(self, kind: str, seed: int = 0, **params):
        if kind not in ANALYTIC_KINDS:
            raise FieldError(f"unknown analytic field kind {kind!r}")
        self.kind = kind
        self.seed = int(seed)
        self.params = dict(_DEFAULT_PARAMS[kind])
        unknown = set(params) - set(self.params)
        if unknown:
            raise FieldError(f"{kind}: unknown parameters {sorted(unknown)}")
        self.params.update(params)
        self.second_order = kind in _SECOND_ORDER_KINDS
        if kind == "gravity_bounce" and not (0.0 < self.params["gamma"] < 1.0):
            raise FieldError("gravity_bounce: gamma must be in (0, 1)")

    def _noise(self, n: int, step_index: int, scale: float = 1.0) -> np.ndarray:
        """(N, 3) standard-normal draw keyed by (seed, step_index)."""
        bits = np.random.Philox(key=(np.uint64(self.seed) << np.uint64(20)) + np.uint64(step_index & 0xFFFFF))
        return scale * np.random.Generator(bits).standard_normal((n, 3))

    def evaluate_batch(self, positions, velocities, t, step_index=0):
        p = np.asarray(positions, dtype=float)
        n = p.shape[0]
        v = _zeros(n) if velocities is None else np.asarray(velocities, dtype=float)
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        prm = self.params
        d_pos = _zeros(n)
        d_vel = None

        if self.kind == "gravity_bounce":
            d_pos = v.copy()
            d_vel = np.zeros((n, 3))
            d_vel[:, 2] = prm["g"]
        elif self.kind == "drift":
            delta = prm["delta"]
            delta = np.array([delta, 0.0, 0.0]) if np.isscalar(delta) else np.asarray(delta, dtype=float)
            d_pos = np.broadcast_to(delta, (n, 3)).copy()
        elif self.kind == "spin":
            cx, cy, _ = np.asarray(prm["center"], dtype=float)
            w = prm["omega"]
            d_pos = np.stack([-w * (y - cy), w * (x - cx), np.zeros(n)], axis=1)
        elif self.kind == "swirl":
            s0, s1 = prm["s0"], prm["s1"]
            eta = self._noise(n, step_index, prm["eta"])
            d_pos = np.stack(
                [
                    s0 * np.cos(2.5 * y + 1.5 * t),
                    s1 * np.sin(3 * x + 2 * t) * np.cos(2.5 * z - 1.5 * t) + eta[:, 1],
                    s1 * np.cos(3 * x - 2.5 * t) * np.sin(3 * y + 2.5 * t) + eta[:, 2],
                ],
                axis=1,
            )
        elif self.kind == "diffusion_gas":
            # velocity relaxation happens in the post-step event; here the
            # state just drifts with its auxiliary velocity
            d_pos = v.copy()
            d_vel = np.zeros((n, 3))
        elif self.kind == "vortex":
            w, k, u0 = prm["omega"], prm["k"], prm["u0"]
            r = np.sqrt(x**2 + y**2)
            theta = np.arctan2(y, x)
            d_pos = np.stack(
                [
                    -w * r * np.sin(theta) - k * x,
                    w * r * np.cos(theta) - k * y,
                    u0 * np.exp(-(r**2)),
                ],
                axis=1,
            )
        elif self.kind == "wave":
            a, f, c = prm["A"], prm["f"], prm["c"]
            d_pos = np.stack(
                [
                    np.zeros(n),
                    a * np.sin(2 * np.pi * f * (x - c * t)),
                    a * np.cos(2 * np.pi * f * (y - c * t)),
                ],
                axis=1,
            )
        elif self.kind == "wind_curl":
            w, c = prm["w"], prm["c"]
            eta = self._noise(n, step_index, prm["eta"])
            d_pos = np.stack(
                [
                    w + c * np.sin(2 * y + t),
                    c * np.cos(2 * x - 0.5 * t),
                    eta[:, 2] * np.sin(3 * z + 2 * t),
                ],
                axis=1,
            )
        elif self.kind == "orbital":
            center = np.asarray(prm["center"], dtype=float)
            r = p - center
            rn = np.linalg.norm(r, axis=1)
            if np.any(rn < 1e-12):
                raise FieldError("orbital field evaluated at its center (singularity); offset the query")
            d_pos = v.copy()
            d_vel = -prm["G"] * r / rn[:, None] ** 3 - prm["mu"] * v
        elif self.kind == "reaction_diffusion":
            # stochastic velocity kicks happen in the post-step event
            d_pos = v.copy()
            d_vel = np.zeros((n, 3))

        return BatchDerivative(d_pos, _zeros(n), _zeros(n), d_vel)

    def apply_events(self, positions, velocities, t=0.0, step_index=0):
        p = np.asarray(positions, dtype=float).copy()
        v = np.asarray(velocities, dtype=float).copy()
        prm = self.params
        if self.kind == "gravity_bounce":
            below = p[:, 2] < prm["z0"]
            p[below, 2] = prm["z0"]
            v[below, 2] = -prm["gamma"] * v[below, 2]
        elif self.kind == "diffusion_gas":
            drift = np.asarray(prm["d"], dtype=float)
            v[:] = 0.97 * v + 0.03 * self._noise(len(p), step_index, prm["sigma"]) + drift
        elif self.kind == "reaction_diffusion":
            v[:] = 0.9 * v + 0.1 * self._noise(len(p), step_index, prm["noise_scale"])
            v[:, 0] += 0.2 * np.sin(3 * p[:, 1] + t)
            v[:, 1] += 0.2 * np.sin(3 * p[:, 2] - t)
            v[:, 2] += 0.2 * np.sin(3 * p[:, 0] + t)
        return p, v


# ---------------------------------------------------------------------------
# Neural field


def time_encoding(t: float, frequencies: int = 4) -> np.ndarray:
    """Sinusoidal encoding [sin(2^j pi t), cos(2^j pi t)] for j < frequencies."""
    freqs = (2.0 ** np.arange(frequencies)) * np.pi
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])


class NeuralVelocityField(VelocityField):
    """MLP dynamical law conditioned on grid features.

    Input is feature vector + position + sinusoidal time encoding; output is
    a 9-vector (d_position, d_rotation, d_log_scale).  Strictly first-order:
    no acceleration channel.  The field owns its feature grid; grid planes
    are part of the trainable parameters.
    """

    def __init__(
        self,
        grid: feature_grid.HexPlaneGrid,
        hidden=(64, 64),
        time_frequencies: int = 4,
        seed: int = 0,
        output_scale: float = 0.0,
    ):
        self.grid = grid
        self.time_frequencies = time_frequencies
        self.input_size = grid.feature_size + 3 + 2 * time_frequencies
        sizes = [self.input_size, *hidden, 9]
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for i, (nin, nout) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = output_scale if i == len(sizes) - 2 else 1.0
            self.weights.append(rng.standard_normal((nin, nout)) * scale / np.sqrt(nin))
            self.biases.append(np.zeros(nout))

    # parameter group order: W0, b0, W1, b1, ..., then the six grid planes
    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        out.extend(self.grid.planes)
        return out

    def parameter_names(self):
        names = []
        for i in range(len(self.weights)):
            names.extend([f"mlp_w{i}", f"mlp_b{i}"])
        names.extend(f"plane_{n}" for n in feature_grid.PLANE_ORDER)
        return names

    def zero_grads(self):
        return [np.zeros_like(p) for p in self.parameters()]

    def _inputs(self, positions, t):
        feats = feature_grid.lookup(self.grid, positions, t)
        enc = np.broadcast_to(time_encoding(t, self.time_frequencies), (positions.shape[0], 2 * self.time_frequencies))
        return np.concatenate([feats, positions, enc], axis=1)

    def forward(self, positions, t, want_cache: bool = False):
        """MLP output (N, 9); optionally returns the cache needed by :meth:`backward`."""
        positions = np.asarray(positions, dtype=float)
        x = self._inputs(positions, t)
        activations = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if not np.all(np.isfinite(z)):
                raise FieldError(f"non-finite activation in mlp layer {i}")
            h = z if i == last else np.tanh(z)
            activations.append(h)
        if want_cache:
            return h, (positions, t, activations)
        return h

    def backward(self, cache, upstream):
        """Reverse-mode gradients of :meth:`forward`.

        upstream: (N, 9) gradient on the output.  Returns (param_grads,
        g_positions) with param_grads aligned with :meth:`parameters`.
        param grads are summed over the batch, so the gradient of a batch sum
        equals the sum of per-item gradients.
        """
        positions, t, activations = cache
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != activations[-1].shape:
            raise FieldError(
                f"backward: upstream shape {upstream.shape} does not match cached batch {activations[-1].shape}"
            )
        grads = self.zero_grads()
        g = upstream
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h_in = activations[i]
            if i != last:
                g = g * (1.0 - activations[i + 1] ** 2)  # tanh'
            grads[2 * i] += h_in.T @ g
            grads[2 * i + 1] += g.sum(axis=0)
            g = g @ self.weights[i].T
        # split the input gradient: grid features, raw position, time encoding
        c = self.grid.feature_size
        g_feat = g[:, :c]
        g_pos_direct = g[:, c : c + 3]
        plane_grads, g_pos_grid, _ = feature_grid.lookup_grad(self.grid, positions, t, g_feat)
        for k in range(6):
            grads[2 * len(self.weights) + k] += plane_grads[k]
        return grads, g_pos_direct + g_pos_grid

    def evaluate_batch(self, positions, velocities, t, step_index=0):
        out = self.forward(np.asarray(positions, dtype=float), t)
        return BatchDerivative(out[:, 0:3], out[:, 3:6], out[:, 6:9], None)


# ---------------------------------------------------------------------------
# Composition algebra


def _combine_dvel(a: BatchDerivative, b: BatchDerivative, wa, wb, n):
    if a.d_velocity is None and b.d_velocity is None:
        return None
    va = _zeros(n) if a.d_velocity is None else a.d_velocity
    vb = _zeros(n) if b.d_velocity is None else b.d_velocity
    return wa * va + wb * vb


class SummedField(VelocityField):
    """base + lam * ext, componentwise on derivatives."""

    def __init__(self, base: VelocityField, ext: VelocityField, lam: float):
        self.base = base
        self.ext = ext
        self.lam = float(lam)
        self.second_order = base.second_order or ext.second_order

    def evaluate_batch(self, positions, velocities, t, step_index=0):
        n = np.asarray(positions).shape[0]
        a = self.base.evaluate_batch(positions, velocities, t, step_index)
        b = self.ext.evaluate_batch(positions, velocities, t, step_index)
        return BatchDerivative(
            a.d_position + self.lam * b.d_position,
            a.d_rotation + self.lam * b.d_rotation,
            a.d_log_scale + self.lam * b.d_log_scale,
            _combine_dvel(a, b, 1.0, self.lam, n),
        )

    def apply_events(self, positions, velocities, t=0.0, step_index=0):
        p, v = self.base.apply_events(positions, velocities, t, step_index)
        return self.ext.apply_events(p, v, t, step_index)


class MaskedBlendField(VelocityField):
    """mask(x) * injected + (1 - mask(x)) * base.

    The mask selects the injected field; a hard {0, 1} mask partitions the
    cloud exactly (bitwise) between the two children.  Post-step events run
    through the child that dominates each Gaussian's mask value.
    """

    def __init__(self, base: VelocityField, injected: VelocityField, mask: Callable):
        self.base = base
        self.injected = injected
        self.mask = mask
        self.second_order = base.second_order or injected.second_order

    def _mask_values(self, positions):
        w = np.asarray(self.mask(positions), dtype=float).reshape(-1)
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise FieldError("mask returned a value outside [0, 1]")
        return w

    def evaluate_batch(self, positions, velocities, t, step_index=0):
        positions = np.asarray(positions, dtype=float)
        n = positions.shape[0]
        w = self._mask_values(positions)[:, None]
        a = self.base.evaluate_batch(positions, velocities, t, step_index)
        b = self.injected.evaluate_batch(positions, velocities, t, step_index)

        def mix(xa, xb):
            out = (1.0 - w) * xa + w * xb
            # exact limits: a {0,1} mask reproduces the child field bitwise
            hard0 = (w == 0.0)[:, 0]
            hard1 = (w == 1.0)[:, 0]
            out[hard0] = xa[hard0]
            out[hard1] = xb[hard1]
            return out

        if a.d_velocity is None and b.d_velocity is None:
            dvel = None
        else:
            va = _zeros(n) if a.d_velocity is None else a.d_velocity
            vb = _zeros(n) if b.d_velocity is None else b.d_velocity
            dvel = mix(va, vb)
        return BatchDerivative(
            mix(a.d_position, b.d_position),
            mix(a.d_rotation, b.d_rotation),
            mix(a.d_log_scale, b.d_log_scale),
            dvel,
        )

    def apply_events(self, positions, velocities, t=0.0, step_index=0):
        w = self._mask_values(positions)
        pa, va = self.base.apply_events(positions, velocities, t, step_index)
        pb, vb = self.injected.apply_events(positions, velocities, t, step_index)
        sel = (w > 0.5)[:, None]
        return np.where(sel, pb, pa), np.where(sel, vb, va)


def compose_add(base: VelocityField, ext: VelocityField, lam: float) -> VelocityField:
    """The additive injection v_base + lam * v_ext."""
    return SummedField(base, ext, lam)


def blend_masked(base: VelocityField, injected: VelocityField, mask: Callable) -> VelocityField:
    """Spatially mixed field: the mask selects the injected dynamics.

    The opposite convention (mask selecting the base field) is obtained by
    inverting the mask.
    """
    return MaskedBlendField(base, injected, mask)


# ---------------------------------------------------------------------------
# Geometric masks


def smoothstep(edge0: float, edge1: float, x):
    u = np.clip((x - edge0) / (edge1 - edge0), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def sphere_mask(center, radius: float, edge_width: float = 0.0) -> Callable:
    """1 inside the sphere, 0 outside, smoothstep falloff over edge_width."""
    center = np.asarray(center, dtype=float)

    def mask(positions):
        d = np.linalg.norm(np.asarray(positions, dtype=float) - center, axis=-1)
        if edge_width <= 0.0:
            return (d <= radius).astype(float)
        return 1.0 - smoothstep(radius - edge_width, radius, d)

    return mask


def box_mask(lo, hi, edge_width: float = 0.0) -> Callable:
    """1 inside the axis-aligned box, 0 outside, smoothstep edge per axis."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def mask(positions):
        p = np.asarray(positions, dtype=float)
        if edge_width <= 0.0:
            inside = np.all((p >= lo) & (p <= hi), axis=-1)
            return inside.astype(float)
        a = smoothstep(lo - edge_width, lo, p)
        b = 1.0 - smoothstep(hi, hi + edge_width, p)
        return np.prod(a * b, axis=-1)

    return mask


# ---------------------------------------------------------------------------
# Composition-tree parsing (scene/config file blocks)


def build_mask(spec: dict) -> Callable:
    shape = spec.get("shape")
    if shape == "sphere":
        return sphere_mask(spec["center"], spec["radius"], spec.get("edge_width", 0.0))
    if shape == "box":
        return box_mask(spec["lo"], spec["hi"], spec.get("edge_width", 0.0))
    raise FieldError(f"unknown mask shape {spec.get('shape')!r}")


def build_field(spec: dict, neural_loader: Callable = None) -> VelocityField:
    """Build a field from its JSON composition tree.

    Leaves: {"kind": <analytic kind>, "params": {...}, "seed": n},
    {"kind": "zero"}, or {"kind": "neural", "checkpoint": path} (resolved via
    neural_loader).  Interior nodes: {"op": "add", "lam": x, "children":
    [base, ext]} or {"op": "blend", "mask": {...}, "children": [base,
    injected]}.
    """
    if "op" in spec:
        children = spec.get("children", [])
        if len(children) != 2:
            raise FieldError(f"composition op {spec['op']!r} needs exactly two children")
        a = build_field(children[0], neural_loader)
        b = build_field(children[1], neural_loader)
        if spec["op"] == "add":
            return compose_add(a, b, spec.get("lam", 1.0))
        if spec["op"] == "blend":
            return blend_masked(a, b, build_mask(spec["mask"]))
        raise FieldError(f"unknown composition op {spec['op']!r}")
    kind = spec.get("kind")
    if kind == "zero":
        return ZeroField()
    if kind == "neural":
        if neural_loader is None:
            raise FieldError("neural leaf present but no checkpoint loader provided")
        return neural_loader(spec["checkpoint"])
    return AnalyticField(kind, seed=spec.get("seed", 0), **spec.get("params", {}))
