"""Core scene types: Gaussian primitives, clouds, cameras, neighbor queries, file I/O.

A cloud stores its primitives struct-of-arrays for fast vectorized math, but
exposes per-primitive :class:`GaussianState` views.  All types are immutable
values: evolving a scene means constructing a new cloud, so clouds are safe
to share read-only across threads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import quaternions

QUAT_NORM_TOL = 1e-6


class SceneError(Exception):
    """Base class for scene file problems."""


class SceneParseError(SceneError):
    """Raised when a scene file cannot be parsed against the schema."""


class SceneValidationError(SceneError):
    """Raised when a parsed scene violates a state invariant.

    The message names the offending field and index.
    """


def _vec(x, n, name):
    a = np.asarray(x, dtype=float)
    if a.shape != (n,):
        raise SceneValidationError(f"{name}: expected {n}-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SceneValidationError(f"{name}: non-finite value")
    return a


@dataclass(frozen=True)
class GaussianState:
    """One anisotropic Gaussian primitive.

    position: 3-vector in scene units.
    rotation: unit quaternion (w, x, y, z).
    log_scale: log of the per-axis scale, so exp(log_scale) is always positive.
    color: RGB in [0, 1].
    opacity: scalar in [0, 1].
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    color: np.ndarray
    opacity: float

    def validate(self, name: str = "gaussian") -> "GaussianState":
        _vec(self.position, 3, f"{name}.position")
        q = _vec(self.rotation, 4, f"{name}.rotation")
        if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
            raise SceneValidationError(f"{name}.rotation: quaternion norm not within {QUAT_NORM_TOL} of 1")
        ls = _vec(self.log_scale, 3, f"{name}.log_scale")
        if not np.all(np.isfinite(np.exp(ls))):
            raise SceneValidationError(f"{name}.log_scale: exp overflows")
        c = _vec(self.color, 3, f"{name}.color")
        if np.any(c < 0) or np.any(c > 1):
            raise SceneValidationError(f"{name}.color: component outside [0, 1]")
        if not (0.0 <= self.opacity <= 1.0):
            raise SceneValidationError(f"{name}.opacity: value {self.opacity} outside [0, 1]")
        return self


@dataclass(frozen=True)
class Bounds:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, positions: np.ndarray) -> bool:
        return bool(np.all(positions >= self.lo) and np.all(positions <= self.hi))

    @staticmethod
    def of(positions: np.ndarray, pad: float = 0.0) -> "Bounds":
        if len(positions) == 0:
            return Bounds(lo=np.zeros(3), hi=np.zeros(3))
        lo = positions.min(axis=0) - pad
        hi = positions.max(axis=0) + pad
        return Bounds(lo=lo, hi=hi)


@dataclass(frozen=True)
class GaussianCloud:
    """An ordered set of Gaussian primitives at one normalized time in [0, 1].

    Index i refers to the same primitive across all times; every evolution
    operation preserves length and ordering.
    """

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    log_scales: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    time: float = 0.0
    bounds: Bounds = None

    def __post_init__(self):
        if self.bounds is None or not self.bounds.contains(self.positions):
            # bounds are recomputed when violated, never silently clipped
            object.__setattr__(self, "bounds", Bounds.of(self.positions))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> GaussianState:
        return GaussianState(
            position=self.positions[i],
            rotation=self.rotations[i],
            log_scale=self.log_scales[i],
            color=self.colors[i],
            opacity=float(self.opacities[i]),
        )

    @property
    def gaussians(self):
        return [self[i] for i in range(len(self))]

    @staticmethod
    def from_gaussians(states, time: float = 0.0, bounds: Bounds = None) -> "GaussianCloud":
        return GaussianCloud(
            positions=np.array([s.position for s in states], dtype=float).reshape(-1, 3),
            rotations=np.array([s.rotation for s in states], dtype=float).reshape(-1, 4),
            log_scales=np.array([s.log_scale for s in states], dtype=float).reshape(-1, 3),
            colors=np.array([s.color for s in states], dtype=float).reshape(-1, 3),
            opacities=np.array([s.opacity for s in states], dtype=float),
            time=time,
            bounds=bounds,
        )

    def validate(self) -> "GaussianCloud":
        for i in range(len(self)):
            self[i].validate(name=f"gaussians[{i}]")
        if not (0.0 <= self.time <= 1.0):
            raise SceneValidationError(f"time: value {self.time} outside [0, 1]")
        return self

    def with_positions(self, positions: np.ndarray, time: float = None) -> "GaussianCloud":
        return replace(
            self,
            positions=np.asarray(positions, dtype=float),
            time=self.time if time is None else time,
            bounds=self.bounds,
        )

    def evolved(self, positions, rotations=None, log_scales=None, time=None) -> "GaussianCloud":
        return replace(
            self,
            positions=np.asarray(positions, dtype=float),
            rotations=self.rotations if rotations is None else np.asarray(rotations, dtype=float),
            log_scales=self.log_scales if log_scales is None else np.asarray(log_scales, dtype=float),
            time=self.time if time is None else time,
            bounds=self.bounds,
        )


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera for evaluation rendering."""

    eye: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float  # radians
    width: int
    height: int
    near: float = 1e-3

    def validate(self, name: str = "camera") -> "CameraSpec":
        eye = _vec(self.eye, 3, f"{name}.eye")
        at = _vec(self.look_at, 3, f"{name}.look_at")
        up = _vec(self.up, 3, f"{name}.up")
        fwd = at - eye
        if np.linalg.norm(fwd) == 0:
            raise SceneValidationError(f"{name}.look_at: coincides with eye")
        if np.linalg.norm(np.cross(fwd, up)) < 1e-12:
            raise SceneValidationError(f"{name}.up: parallel to viewing direction")
        if not (0.0 < self.vertical_fov < np.pi):
            raise SceneValidationError(f"{name}.vertical_fov: outside (0, pi)")
        if self.width <= 0 or self.height <= 0:
            raise SceneValidationError(f"{name}: non-positive image dimensions")
        if self.near <= 0:
            raise SceneValidationError(f"{name}.near: must be > 0")
        return self


@dataclass(frozen=True)
class SceneData:
    """A loaded scene file: cloud plus optional supervision and cameras."""

    cloud: GaussianCloud
    cameras: list = field(default_factory=list)
    trajectory_times: np.ndarray = None  # (F,)
    trajectory_positions: np.ndarray = None  # (F, N, 3)
    knn_k: int = 8  # neighbor count; schema config value, default 8

    @property
    def has_trajectories(self) -> bool:
        return self.trajectory_times is not None


def load_scene(path) -> SceneData:
    """Load and validate a JSON scene file.

    Raises :class:`SceneParseError` on malformed files and
    :class:`SceneValidationError` on invariant violations; both name the
    offending field and index.
    """
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SceneParseError(f"cannot parse scene file {path}: {e}") from e
    if not isinstance(doc, dict) or "gaussians" not in doc:
        raise SceneParseError("scene file must be an object with a 'gaussians' list")

    states = []
    for i, g in enumerate(doc["gaussians"]):
        try:
            state = GaussianState(
                position=np.asarray(g["position"], dtype=float),
                rotation=np.asarray(g["rotation"], dtype=float),
                log_scale=np.asarray(g["log_scale"], dtype=float),
                color=np.asarray(g["color"], dtype=float),
                opacity=float(g["opacity"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SceneParseError(f"gaussians[{i}]: {e}") from e
        states.append(state.validate(name=f"gaussians[{i}]"))

    bounds = None
    if "bounds" in doc:
        try:
            bounds = Bounds(
                lo=np.asarray(doc["bounds"]["lo"], dtype=float),
                hi=np.asarray(doc["bounds"]["hi"], dtype=float),
            )
        except (KeyError, TypeError) as e:
            raise SceneParseError(f"bounds: {e}") from e

    cloud = GaussianCloud.from_gaussians(states, time=float(doc.get("time", 0.0)), bounds=bounds)
    cloud.validate()

    cameras = []
    for i, c in enumerate(doc.get("cameras", [])):
        try:
            cam = CameraSpec(
                eye=np.asarray(c["eye"], dtype=float),
                look_at=np.asarray(c["look_at"], dtype=float),
                up=np.asarray(c["up"], dtype=float),
                vertical_fov=float(c["vertical_fov"]),
                width=int(c["width"]),
                height=int(c["height"]),
                near=float(c.get("near", 1e-3)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SceneParseError(f"cameras[{i}]: {e}") from e
        cameras.append(cam.validate(name=f"cameras[{i}]"))

    times = positions = None
    if "trajectories" in doc and doc["trajectories"] is not None:
        traj = doc["trajectories"]
        try:
            times = np.asarray(traj["times"], dtype=float)
            positions = np.asarray(traj["positions"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise SceneParseError(f"trajectories: {e}") from e
        if positions.ndim != 3 or positions.shape[0] != times.shape[0] or positions.shape[1] != len(cloud) or positions.shape[2] != 3:
            raise SceneValidationError(
                f"trajectories.positions: shape {positions.shape} does not match "
                f"{times.shape[0]} frames x {len(cloud)} gaussians x 3"
            )

    return SceneData(
        cloud=cloud,
        cameras=cameras,
        trajectory_times=times,
        trajectory_positions=positions,
        knn_k=int(doc.get("knn_k", 8)),
    )


def save_scene(scene: SceneData, path) -> None:
    """Write a SceneData back to the JSON schema read by :func:`load_scene`.

    Floats are serialized at full repr precision so a round trip reproduces
    the cloud to better than 1e-12 (bitwise, in practice).
    """
    cloud = scene.cloud
    doc = {
        "bounds": {"lo": cloud.bounds.lo.tolist(), "hi": cloud.bounds.hi.tolist()},
        "time": cloud.time,
        "knn_k": scene.knn_k,
        "gaussians": [
            {
                "position": cloud.positions[i].tolist(),
                "rotation": cloud.rotations[i].tolist(),
                "log_scale": cloud.log_scales[i].tolist(),
                "color": cloud.colors[i].tolist(),
                "opacity": float(cloud.opacities[i]),
            }
            for i in range(len(cloud))
        ],
        "cameras": [
            {
                "eye": c.eye.tolist(),
                "look_at": c.look_at.tolist(),
                "up": c.up.tolist(),
                "vertical_fov": c.vertical_fov,
                "width": c.width,
                "height": c.height,
                "near": c.near,
            }
            for c in scene.cameras
        ],
    }
    if scene.has_trajectories:
        doc["trajectories"] = {
            "times": scene.trajectory_times.tolist(),
            "positions": scene.trajectory_positions.tolist(),
        }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def knn(cloud: GaussianCloud, k: int) -> np.ndarray:
    """K nearest neighbors of every Gaussian by squared position distance.

    Returns an (N, k) int array.  Self is excluded; ties break toward the
    lower index (stable sort on distance).
    """
    n = len(cloud)
    if k <= 0:
        raise ValueError("k must be positive")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than cloud size {n}")
    p = cloud.positions
    d2 = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def mean_neighbor_distance(cloud: GaussianCloud, neighbors: np.ndarray) -> float:
    """Arithmetic mean of ||p_i - p_j|| over all (i, j in N(i)) pairs."""
    neighbors = np.asarray(neighbors)
    if neighbors.size == 0:
        raise ValueError("neighbor lists are empty")
    p = cloud.positions
    d = np.linalg.norm(p[:, None, :] - p[neighbors], axis=-1)
    return float(d.mean())


def export_trajectory_csv(times, positions, path) -> None:
    """Write a trajectory as CSV rows (frame_index, time, gaussian_index, x, y, z)."""
    times = np.asarray(times, dtype=float)
    positions = np.asarray(positions, dtype=float)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame_index", "time", "gaussian_index", "x", "y", "z"])
        for fi in range(positions.shape[0]):
            for gi in range(positions.shape[1]):
                x, y, z = positions[fi, gi]
                w.writerow([fi, repr(float(times[fi])), gi, repr(float(x)), repr(float(y)), repr(float(z))])


def import_trajectory_csv(path):
    """Read a trajectory CSV written by :func:`export_trajectory_csv`.

    Returns (times (F,), positions (F, N, 3)).
    """
    rows = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header[:3] != ["frame_index", "time", "gaussian_index"]:
            raise SceneParseError(f"unexpected trajectory CSV header in {path}")
        for row in r:
            rows.append((int(row[0]), float(row[1]), int(row[2]), float(row[3]), float(row[4]), float(row[5])))
    if not rows:
        raise SceneParseError(f"empty trajectory CSV {path}")
    n_frames = max(r[0] for r in rows) + 1
    n_gauss = max(r[2] for r in rows) + 1
    times = np.zeros(n_frames)
    positions = np.zeros((n_frames, n_gauss, 3))
    for fi, t, gi, x, y, z in rows:
        times[fi] = t
        positions[fi, gi] = (x, y, z)
    return times, positions
