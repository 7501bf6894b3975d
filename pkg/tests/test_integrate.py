"""Fixed-step solvers, rollouts, and anchor-aware reinitialization."""

import numpy as np
import pytest

from gsdyn import anchors as anc
from gsdyn import integrate as itg
from gsdyn.fields import AnalyticField, BatchDerivative, VelocityField, ZeroField
from gsdyn.scene import GaussianCloud, GaussianState


def make_cloud(positions, time=0.0):
    n = len(positions)
    return GaussianCloud(
        positions=np.asarray(positions, dtype=float),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), -3.0),
        colors=np.full((n, 3), 0.5),
        opacities=np.full(n, 0.8),
        time=time,
    )


def state_at(p):
    return GaussianState(
        position=np.asarray(p, dtype=float),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        log_scale=np.full(3, -3.0),
        color=np.full(3, 0.5),
        opacity=1.0,
    )


class ScalarExponential(VelocityField):
    """dx/dt = x on the x coordinate; scalar test analogue."""

    def evaluate_batch(self, positions, velocities, t, step_index=0):
        n = positions.shape[0]
        d = np.zeros((n, 3))
        d[:, 0] = positions[:, 0]
        return BatchDerivative(d, np.zeros((n, 3)), np.zeros((n, 3)))


class RotatingField(VelocityField):
    """Constant angular velocity about z, no translation."""

    def __init__(self, omega):
        self.omega = np.asarray(omega, dtype=float)

    def evaluate_batch(self, positions, velocities, t, step_index=0):
        n = positions.shape[0]
        return BatchDerivative(
            np.zeros((n, 3)),
            np.broadcast_to(self.omega, (n, 3)).copy(),
            np.zeros((n, 3)),
        )


class TestEulerStep:
    def test_scalar_exponential(self):
        s, _ = itg.euler_step(state_at([1.0, 0.0, 0.0]), None, 0.0, 0.1, ScalarExponential())
        assert s.position[0] == pytest.approx(1.1)

    def test_zero_field_unchanged(self):
        start = state_at([0.4, 0.5, 0.6])
        s, _ = itg.euler_step(start, None, 0.0, 0.25, ZeroField())
        np.testing.assert_array_equal(s.position, start.position)
        np.testing.assert_array_equal(s.rotation, start.rotation)

    def test_constant_drift(self):
        f = AnalyticField("drift", delta=(0.3, 0.0, 0.0))
        s, _ = itg.euler_step(state_at([0.0, 0.0, 0.0]), None, 0.0, 0.5, f)
        np.testing.assert_allclose(s.position, [0.15, 0.0, 0.0])

    def test_zero_step_rejected(self):
        with pytest.raises(ValueError):
            itg.euler_step(state_at([0, 0, 0]), None, 0.0, 0.0, ZeroField())


class TestRk4Step:
    def test_constant_field_exact(self):
        f = AnalyticField("drift", delta=(0.2, -0.1, 0.4))
        s, _ = itg.rk4_step(state_at([1.0, 2.0, 3.0]), None, 0.0, 0.5, f)
        np.testing.assert_allclose(s.position, [1.1, 1.95, 3.2], atol=1e-15)

    def test_scalar_exponential_accuracy(self):
        s, _ = itg.rk4_step(state_at([1.0, 0.0, 0.0]), None, 0.0, 0.1, ScalarExponential())
        assert abs(s.position[0] - np.exp(0.1)) < 1e-7

    def test_spin_radius_preserved_per_step(self):
        f = AnalyticField("spin", omega=1.0)
        s, _ = itg.rk4_step(state_at([1.0, 0.0, 0.0]), None, 0.0, 0.01, f)
        r = np.linalg.norm(s.position[:2])
        assert abs(r - 1.0) < 1e-9

    def test_rotation_quaternion_stays_unit(self):
        f = RotatingField([0.0, 0.0, 2.0])
        s = state_at([0.0, 0.0, 0.0])
        for _ in range(50):
            s, _ = itg.rk4_step(s, None, 0.0, 0.05, f)
        assert abs(np.linalg.norm(s.rotation) - 1.0) < 1e-12
        # 50 steps of h=0.05 at omega_z=2 -> total angle 5 rad about z
        w = s.rotation[0]
        assert w == pytest.approx(np.cos(2.5), abs=1e-9)

    def test_nonfinite_stage_named(self):
        class Exploding(VelocityField):
            def evaluate_batch(self, positions, velocities, t, step_index=0):
                n = positions.shape[0]
                d = np.zeros((n, 3))
                # blow up only at the midpoint stage time
                if abs(t - 0.05) < 1e-12:
                    d[:] = np.nan
                return BatchDerivative(d, np.zeros((n, 3)), np.zeros((n, 3)))

        with pytest.raises(itg.IntegrationError, match="k2") as err:
            itg.rk4_step(state_at([0, 0, 0]), None, 0.0, 0.1, Exploding())
        assert err.value.stage == "k2"


class TestRollout:
    def test_zero_field_snapshots_identical(self):
        cloud = make_cloud([[0.1, 0.2, 0.3], [0.7, 0.8, 0.9]])
        traj = itg.rollout(cloud, 0.0, 1.0, itg.IntegratorConfig(step_count=10), ZeroField())
        for i in range(len(traj)):
            np.testing.assert_array_equal(traj.positions[i], cloud.positions)

    def test_spin_full_period_returns(self):
        omega = 2.0
        f = AnalyticField("spin", omega=omega)
        cloud = make_cloud([[1.0, 0.0, 0.0], [0.0, 0.5, 0.2]])
        period = 2 * np.pi / omega
        cfg = itg.IntegratorConfig(step_count=1000, record_stride=1000)
        traj = itg.rollout(cloud, 0.0, period, cfg, f)
        np.testing.assert_allclose(traj.positions[-1], cloud.positions, atol=1e-6)

    def test_forward_backward_round_trip(self):
        f = AnalyticField("swirl", s0=0.5, s1=0.5)
        cloud = make_cloud(np.random.default_rng(0).uniform(0, 1, (5, 3)))
        cfg = itg.IntegratorConfig(step_count=100, record_stride=100)
        fwd = itg.rollout(cloud, 0.0, 1.0, cfg, f)
        end = fwd.cloud_at(len(fwd) - 1)
        back = itg.rollout(end, 1.0, 0.0, cfg, f)
        np.testing.assert_allclose(back.positions[-1], cloud.positions, atol=1e-6)

    def test_backward_times_decrease(self):
        traj = itg.rollout(make_cloud([[0.5, 0.5, 0.5]]), 1.0, 0.0,
                           itg.IntegratorConfig(step_count=4), ZeroField())
        assert np.all(np.diff(traj.times) < 0)

    def test_record_stride_plus_endpoints(self):
        traj = itg.rollout(make_cloud([[0, 0, 0]]), 0.0, 1.0,
                           itg.IntegratorConfig(step_count=10, record_stride=3), ZeroField())
        np.testing.assert_allclose(traj.times, [0.0, 0.3, 0.6, 0.9, 1.0])

    def test_stride_one_equals_composed_single_steps(self):
        f = AnalyticField("vortex", omega=1.0, k=0.05, u0=0.3)
        cloud = make_cloud(np.random.default_rng(1).uniform(0.2, 0.8, (3, 3)))
        cfg = itg.IntegratorConfig(step_count=5, record_stride=1)
        traj = itg.rollout(cloud, 0.0, 0.5, cfg, f)
        p = cloud.positions.copy()
        q = cloud.rotations.copy()
        ls = cloud.log_scales.copy()
        v = np.zeros_like(p)
        h = 0.1
        for s in range(5):
            p, q, ls, v = itg.rk4_step_arrays(f, p, q, ls, v, s * h, h, step_index=s)
            np.testing.assert_array_equal(traj.positions[s + 1], p)

    def test_determinism(self):
        f = AnalyticField("diffusion_gas", seed=3, sigma=0.2)
        cloud = make_cloud(np.random.default_rng(2).uniform(0, 1, (4, 3)))
        cfg = itg.IntegratorConfig(step_count=20)
        a = itg.rollout(cloud, 0.0, 1.0, cfg, f)
        b = itg.rollout(cloud, 0.0, 1.0, cfg, f)
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_t0_equals_t1_rejected(self):
        with pytest.raises(ValueError):
            itg.rollout(make_cloud([[0, 0, 0]]), 0.5, 0.5, itg.IntegratorConfig(), ZeroField())

    def test_second_order_bounce_trajectory(self):
        # a dropped ball under gravity stays at or above the floor
        f = AnalyticField("gravity_bounce", g=-9.8, z0=0.0, gamma=0.8)
        cloud = make_cloud([[0.5, 0.5, 0.5]])
        cfg = itg.IntegratorConfig(step_count=200)
        traj = itg.rollout(cloud, 0.0, 1.0, cfg, f)
        assert traj.positions[:, 0, 2].min() >= 0.0
        assert traj.aux_velocities is not None


class TestConvergenceOrder:
    def fit_order(self, method):
        omega = 2.0
        f = AnalyticField("spin", omega=omega)
        period = 2 * np.pi / omega
        start = make_cloud([[1.0, 0.0, 0.0]])
        errs = []
        counts = [50, 100, 200, 400]
        for n in counts:
            cfg = itg.IntegratorConfig(method=method, step_count=n, record_stride=n)
            traj = itg.rollout(start, 0.0, period, cfg, f)
            errs.append(np.linalg.norm(traj.positions[-1, 0] - start.positions[0]))
        slope, _ = np.polyfit(np.log([period / n for n in counts]), np.log(errs), 1)
        return slope

    def test_euler_first_order(self):
        assert 0.9 <= self.fit_order("euler") <= 1.1

    def test_rk4_fourth_order(self):
        assert 3.8 <= self.fit_order("rk4") <= 4.2


class TestOrbitalEnergy:
    def test_energy_drift_small(self):
        f = AnalyticField("orbital", G=1.0, mu=0.0)
        r0 = 1.0
        v0 = 1.0  # circular orbit: v = sqrt(G/r)
        cloud = make_cloud([[r0, 0.0, 0.0]])
        velocities = np.array([[0.0, v0, 0.0]])
        period = 2 * np.pi * r0 / v0
        steps = int(period / 1e-3)
        cfg = itg.IntegratorConfig(step_count=int(steps / period), record_stride=steps)
        traj = itg.rollout(cloud, 0.0, period, cfg, f, velocities=velocities)
        e0 = 0.5 * v0**2 - 1.0 / r0
        p_end = traj.positions[-1, 0]
        v_end = traj.aux_velocities[-1, 0]
        e1 = 0.5 * float(v_end @ v_end) - 1.0 / np.linalg.norm(p_end)
        assert abs(e1 - e0) / abs(e0) < 1e-5


class TestAnchorAwareRollout:
    def build_anchors(self, f, times, start):
        aset = anc.AnchorSet()
        cfg = itg.IntegratorConfig(step_count=1000, record_stride=1000)
        cloud = start
        prev_t = times[0]
        aset.insert(cloud, prev_t)
        for t in times[1:]:
            traj = itg.rollout(cloud, prev_t, t, cfg, f)
            cloud = traj.cloud_at(len(traj) - 1)
            aset.insert(cloud, t)
            prev_t = t
        return aset

    def test_exact_anchor_time_returned_verbatim(self):
        f = AnalyticField("drift", delta=(0.3, 0.0, 0.0))
        aset = self.build_anchors(f, [0.0, 0.5, 1.0], make_cloud([[0.1, 0.1, 0.1]]))
        out = itg.anchor_aware_rollout(aset, 0.5, itg.IntegratorConfig(step_count=10), f)
        np.testing.assert_array_equal(out.positions, aset[1].cloud.positions)

    def test_nearest_past_selection(self):
        # query at 0.7 must start from the 0.5 anchor, not 0.0
        f = AnalyticField("drift", delta=(1.0, 0.0, 0.0))
        aset = anc.AnchorSet()
        aset.insert(make_cloud([[0.0, 0.0, 0.0]]), 0.0)
        # deliberately inconsistent anchor so provenance is observable
        aset.insert(make_cloud([[10.0, 0.0, 0.0]]), 0.5)
        aset.insert(make_cloud([[20.0, 0.0, 0.0]]), 1.0)
        out = itg.anchor_aware_rollout(aset, 0.7, itg.IntegratorConfig(step_count=10), f)
        assert out.positions[0, 0] == pytest.approx(10.2)

    def test_anchored_beats_single_origin(self):
        f_true = AnalyticField("spin", omega=3.0)
        f_biased = AnalyticField("spin", omega=3.1)  # imperfect model field
        start = make_cloud(np.random.default_rng(3).uniform(0.2, 0.8, (6, 3)))
        aset = self.build_anchors(f_true, [0.0, 0.5, 1.0], start)
        cfg = itg.IntegratorConfig(step_count=100)
        t = 0.9
        truth = itg.anchor_aware_rollout(aset, t, cfg, f_true)
        anchored = itg.anchor_aware_rollout(aset, t, cfg, f_biased)
        single = itg.rollout(start, 0.0, t, itg.IntegratorConfig(step_count=90, record_stride=90), f_biased)
        err_anchored = np.abs(anchored.positions - truth.positions).max()
        err_single = np.abs(single.positions[-1] - truth.positions).max()
        assert err_anchored <= err_single

    def test_backward_query_uses_future_anchor(self):
        f = AnalyticField("drift", delta=(1.0, 0.0, 0.0))
        aset = anc.AnchorSet()
        aset.insert(make_cloud([[5.0, 0.0, 0.0]]), 0.5)
        out = itg.anchor_aware_rollout(aset, 0.3, itg.IntegratorConfig(step_count=10), f)
        assert out.positions[0, 0] == pytest.approx(4.8)

    def test_empty_anchor_set_rejected(self):
        with pytest.raises(ValueError):
            itg.anchor_aware_rollout(anc.AnchorSet(), 0.5, itg.IntegratorConfig(), ZeroField())
