"""Evaluation-only CPU splat rasterizer and image metrics.

Gaussians are projected through a pinhole camera with the affine (Jacobian)
approximation for covariance transport, depth-sorted front to back, and
alpha-composited within a 3-sigma pixel footprint.  Forward pass only: no
gradients flow through rendering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import convolve2d

from . import quaternions
from .scene import CameraSpec, GaussianCloud

PSNR_CAP_DB = 99.0
ALPHA_MAX = 0.999
FOOTPRINT_SIGMAS = 3.0


@dataclass(frozen=True)
class Image:
    """Row-major RGB image with channels in [0, 1]."""

    pixels: np.ndarray  # (H, W, 3)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray  # (2,) pixel coordinates
    cov2d: np.ndarray  # (2, 2)
    depth: float


@dataclass
class RenderStats:
    discarded: int = 0


def _view_basis(camera: CameraSpec):
    forward = camera.look_at - camera.eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, camera.up)
    right = right / np.linalg.norm(right)
    up = np.cross(right, forward)
    # rows: camera axes; depth grows along the viewing direction
    return np.stack([right, up, forward])


def _rotation_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def project(gaussian, camera: CameraSpec) -> Optional[ProjectedGaussian]:
    """Project one Gaussian to a 2D mean, 2x2 covariance, and depth.

    Returns None (discard) behind the near plane or when the projected
    covariance degenerates.
    """
    basis = _view_basis(camera)
    pc = basis @ (gaussian.position - camera.eye)
    depth = pc[2]
    if depth <= camera.near:
        return None
    focal = camera.height / (2.0 * np.tan(camera.vertical_fov / 2.0))
    cx = camera.width / 2.0
    cy = camera.height / 2.0
    mean2d = np.array([cx + focal * pc[0] / depth, cy - focal * pc[1] / depth])

    rot = _rotation_matrix(quaternions.normalize(gaussian.rotation))
    s = np.exp(gaussian.log_scale)
    cov_world = rot @ np.diag(s**2) @ rot.T
    cov_cam = basis @ cov_world @ basis.T
    # pinhole Jacobian, image y pointing down
    jac = np.array(
        [
            [focal / depth, 0.0, -focal * pc[0] / depth**2],
            [0.0, -focal / depth, focal * pc[1] / depth**2],
        ]
    )
    cov2d = jac @ cov_cam @ jac.T
    if np.linalg.det(cov2d) < 1e-24:
        return None
    return ProjectedGaussian(mean2d=mean2d, cov2d=cov2d, depth=float(depth))


def rasterize(cloud: GaussianCloud, camera: CameraSpec, stats: RenderStats = None) -> Image:
    """Front-to-back alpha compositing of the whole cloud over black.

    Depth sort is by view-space center depth with index tie-breaking, so
    rendering is invariant to the input Gaussian order.
    """
    if len(cloud) == 0:
        raise ValueError("cannot rasterize an empty cloud")
    h, w = camera.height, camera.width
    image = np.zeros((h, w, 3))
    transmittance = np.ones((h, w))

    projected = []
    for i in range(len(cloud)):
        pg = project(cloud[i], camera)
        if pg is None:
            if stats is not None:
                stats.discarded += 1
            continue
        projected.append((pg.depth, i, pg))
    projected.sort(key=lambda item: (item[0], item[1]))

    ys = np.arange(h)
    xs = np.arange(w)
    for _, i, pg in projected:
        opacity = float(cloud.opacities[i])
        if opacity <= 0.0:
            continue
        radius = FOOTPRINT_SIGMAS * np.sqrt(max(np.linalg.eigvalsh(pg.cov2d).max(), 0.0))
        x0 = max(int(np.floor(pg.mean2d[0] - radius)), 0)
        x1 = min(int(np.ceil(pg.mean2d[0] + radius)) + 1, w)
        y0 = max(int(np.floor(pg.mean2d[1] - radius)), 0)
        y1 = min(int(np.ceil(pg.mean2d[1] + radius)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        inv = np.linalg.inv(pg.cov2d)
        dx = xs[x0:x1] + 0.5 - pg.mean2d[0]
        dy = ys[y0:y1] + 0.5 - pg.mean2d[1]
        qform = (
            inv[0, 0] * dx[None, :] ** 2
            + 2.0 * inv[0, 1] * dy[:, None] * dx[None, :]
            + inv[1, 1] * dy[:, None] ** 2
        )
        alpha = np.minimum(opacity * np.exp(-0.5 * qform), ALPHA_MAX)
        t_patch = transmittance[y0:y1, x0:x1]
        weight = t_patch * alpha
        image[y0:y1, x0:x1] += weight[:, :, None] * cloud.colors[i]
        transmittance[y0:y1, x0:x1] = t_patch * (1.0 - alpha)
    return Image(pixels=np.clip(image, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Metrics


def _check_dims(a: Image, b: Image):
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image dimension mismatch: {a.pixels.shape} vs {b.pixels.shape}")


def psnr(a: Image, b: Image) -> float:
    """10 * log10(1 / MSE) over all channels, capped at 99 dB."""
    _check_dims(a, b)
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _ssim_kernel():
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: Image, b: Image) -> float:
    """Windowed SSIM (11x11 Gaussian window, sigma 1.5), mean over windows
    and channels; valid windows only."""
    _check_dims(a, b)
    h, w = a.pixels.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}-pixel SSIM window")
    kernel = _ssim_kernel()
    vals = []
    for c in range(3):
        x = a.pixels[:, :, c]
        y = b.pixels[:, :, c]
        mu_x = convolve2d(x, kernel, mode="valid")
        mu_y = convolve2d(y, kernel, mode="valid")
        mu_xx = convolve2d(x * x, kernel, mode="valid")
        mu_yy = convolve2d(y * y, kernel, mode="valid")
        mu_xy = convolve2d(x * y, kernel, mode="valid")
        var_x = mu_xx - mu_x**2
        var_y = mu_yy - mu_y**2
        cov = mu_xy - mu_x * mu_y
        s = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / (
            (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        )
        vals.append(s.mean())
    return float(np.mean(vals))


def dssim(a: Image, b: Image) -> float:
    return (1.0 - ssim(a, b)) / 2.0


# ---------------------------------------------------------------------------
# PPM (P6) I/O — bit-exact: max value 255, round half up from [0, 1]


def write_ppm(image: Image, path) -> None:
    data = np.floor(image.pixels * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> Image:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM (P6) file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        if maxval != 255:
            raise ValueError(f"{path}: unsupported max value {maxval}")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8).reshape(h, w, 3)
    return Image(pixels=data.astype(float) / 255.0)
