"""Continuous-time dynamics engine for explicit Gaussian scene primitives.

Gaussian states evolve by numerically integrating a learned or analytic
velocity field; anchor waypoints keep long rollouts stable; fields compose
through a small vector-field algebra; a CPU rasterizer and PSNR/SSIM metrics
support evaluation.
"""

from .anchors import Anchor, AnchorSet, anchor_loss, nearest_past_anchor, snapshot
from .feature_grid import HexPlaneGrid, create_grid, lookup, lookup_grad, tv_loss
from .fields import (
    AnalyticField,
    NeuralVelocityField,
    StateDerivative,
    VelocityField,
    ZeroField,
    blend_masked,
    box_mask,
    compose_add,
    sphere_mask,
)
from .integrate import IntegratorConfig, Trajectory, anchor_aware_rollout, euler_step, rk4_step, rollout
from .render import Image, dssim, project, psnr, rasterize, ssim, write_ppm
from .scene import (
    Bounds,
    CameraSpec,
    GaussianCloud,
    GaussianState,
    SceneData,
    knn,
    load_scene,
    mean_neighbor_distance,
    save_scene,
)
from .train import FitResult, LossReport, TrainingConfig, coherence_loss, fit, total_loss, trajectory_data_loss

__version__ = "0.1.0"
