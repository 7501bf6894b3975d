"""Convergence study: forward Euler against classical RK4.

Integrates a rigid rotation (whose exact solution is known) at several
step counts and tabulates the endpoint error, the observed convergence
order, and a forward/backward round trip.

Run with:  python3 demos/solver_convergence.py
"""

import numpy as np

from gsdyn.fields import AnalyticField
from gsdyn.integrate import IntegratorConfig, rollout
from gsdyn.scene import GaussianCloud


def cloud_on_circle(n=12, radius=0.7):
    a = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    positions = np.stack([radius * np.cos(a), radius * np.sin(a), np.zeros(n)], axis=1)
    return GaussianCloud(
        positions=positions,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), -3.0),
        colors=np.full((n, 3), 0.5),
        opacities=np.full(n, 0.8),
    )


def main():
    # one full revolution per unit time: after t=1 every point is back home
    field = AnalyticField("spin", omega=2 * np.pi)
    cloud = cloud_on_circle()
    counts = [50, 100, 200, 400]

    print(f"{'steps':>6}  {'euler error':>12}  {'rk4 error':>12}")
    errors = {"euler": [], "rk4": []}
    for n in counts:
        row = [n]
        for method in ("euler", "rk4"):
            cfg = IntegratorConfig(method=method, step_count=n, record_stride=n)
            traj = rollout(cloud, 0.0, 1.0, cfg, field)
            err = np.max(np.linalg.norm(traj.positions[-1] - cloud.positions, axis=-1))
            errors[method].append(err)
            row.append(err)
        print(f"{row[0]:>6}  {row[1]:>12.3e}  {row[2]:>12.3e}")

    for method in ("euler", "rk4"):
        order = -np.polyfit(np.log(counts), np.log(errors[method]), 1)[0]
        print(f"{method} observed order: {order:.2f}")

    # reversibility: integrate forward then backward and compare to the start
    cfg = IntegratorConfig(method="rk4", step_count=100, record_stride=100)
    fwd = rollout(cloud, 0.0, 1.0, cfg, field)
    back = rollout(fwd.cloud_at(-1), 1.0, 0.0, cfg, field)
    round_trip = np.max(np.linalg.norm(back.positions[-1] - cloud.positions, axis=-1))
    print(f"forward+backward round trip error: {round_trip:.2e}")


if __name__ == "__main__":
    main()
