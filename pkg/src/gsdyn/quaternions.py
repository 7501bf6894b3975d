"""Unit-quaternion helpers for rotation integration.

Quaternions are stored as (w, x, y, z) numpy arrays.  Rotational motion is
parameterized by angular-velocity 3-vectors applied through the exponential
map, which keeps the representation drift-free under repeated updates.
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def multiply(a, b):
    """Hamilton product a*b, broadcasting over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def conjugate(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def exp_map(v):
    """Map a rotation 3-vector (axis * angle) to a unit quaternion.

    Uses the sinc-stable small-angle expansion so gradients and values are
    finite at v = 0.
    """
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    # sin(half)/theta with series fallback near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(theta == 0, 1.0, theta))
    w = np.cos(half)
    xyz = k * v
    return np.concatenate([w, xyz], axis=-1)


def log_map(q):
    """Map a unit quaternion to its rotation 3-vector (inverse of exp_map)."""
    q = np.asarray(q, dtype=float)
    # canonicalize sign so the returned angle is in [0, pi]
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    q = q * sign
    w = np.clip(q[..., :1], -1.0, 1.0)
    s = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 2.0, angle / np.where(s == 0, 1.0, s))
    return k * q[..., 1:]


def relative_tangent(q, q_ref):
    """Rotation vector of q relative to q_ref, log(q * q_ref^-1)."""
    return log_map(multiply(q, conjugate(q_ref)))


def apply_increment(q, delta_v):
    """Left-multiply q by the exponential of tangent increment delta_v, renormalized."""
    return normalize(multiply(exp_map(delta_v), q))
