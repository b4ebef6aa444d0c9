"""Cascade controller: loop algebra, derivative acquisition, composition, decay rates."""

import numpy as np
import pytest

from tiltalloc.alloc import Backend, LcaAllocator, NlpAllocator, compute_mu_des
from tiltalloc.control import (
    Command,
    Controller,
    ControllerConfig,
    XdotSource,
    acquire_xdot0,
    angle_loop,
    control_step,
    virtual_control,
)
from tiltalloc.sim import integrate_step
from tiltalloc.vehicle import InputBounds, VehicleParams, trim_point

P = VehicleParams()
BOUNDS = InputBounds.default(P)
CFG = ControllerConfig()
X_TRIM, U_TRIM = trim_point(P)


class TestLoops:
    def test_angle_loop_zero_error(self):
        assert angle_loop(0.25, 0.25, CFG) == 0.0

    def test_angle_loop_gain(self):
        # 0.3 rad error through the 1/0.3 gain
        assert angle_loop(0.0, 0.3, CFG) == pytest.approx(1.0, abs=1e-12)

    def test_angle_loop_linearity(self):
        one = angle_loop(0.1, 0.0, CFG)
        two = angle_loop(0.2, 0.0, CFG)
        assert two == pytest.approx(2.0 * one, abs=1e-12)

    def test_virtual_control_zero_error(self):
        x = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(virtual_control(x, x, CFG), 0.0)

    def test_virtual_control_step_demand(self):
        # -3 m/s error in v_x with a 1/0.3 gain demands +10 m/s^2
        nu = virtual_control(np.zeros(3), np.array([3.0, 0.0, 0.0]), CFG)
        assert nu[0] == pytest.approx(10.0, abs=1e-9)
        assert nu[1] == nu[2] == 0.0

    def test_channel_independence(self):
        base = virtual_control(np.array([0.5, 0.0, 0.1]), np.zeros(3), CFG)
        bumped = virtual_control(np.array([0.5, 0.7, 0.1]), np.zeros(3), CFG)
        assert bumped[0] == base[0] and bumped[2] == base[2]
        assert bumped[1] != base[1]

    def test_gain_bandwidth_separation(self):
        assert CFG.K[2] / CFG.K_theta == pytest.approx(10.0, abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ControllerConfig(K_theta=-1.0)
        with pytest.raises(ValueError):
            ControllerConfig(dt=0.0)


class TestXdotAcquisition:
    def test_trim_model_eval(self):
        np.testing.assert_allclose(acquire_xdot0(X_TRIM, U_TRIM, P), 0.0, atol=0.0)

    def test_disturbance_additive(self):
        d = np.array([0.5, 0.0, 0.0])
        np.testing.assert_allclose(acquire_xdot0(X_TRIM, U_TRIM, P, disturbance=d), d, atol=0.0)

    def test_finite_difference_exact_on_linear_state(self):
        dt = 0.01
        prev = np.array([1.0, 2.0, 3.0])
        now = np.array([1.5, 2.0, 2.9, 0.0])
        xdot = acquire_xdot0(now, U_TRIM, P, mode=XdotSource.FINITE_DIFFERENCE, prev_xr=prev, dt=dt)
        np.testing.assert_allclose(xdot, (now[:3] - prev) / dt, atol=1e-12)

    def test_finite_difference_requires_history(self):
        with pytest.raises(ValueError):
            acquire_xdot0(X_TRIM, U_TRIM, P, mode=XdotSource.FINITE_DIFFERENCE)


class TestControlStep:
    def test_trim_fixed_point(self):
        for alloc in (LcaAllocator(P), NlpAllocator(P)):
            u, telem = control_step(X_TRIM, Command(), U_TRIM, CFG, alloc, P, BOUNDS)
            tol = 1e-9 if alloc.backend is Backend.LCA else 1e-5
            np.testing.assert_allclose(u, U_TRIM, atol=tol)
            np.testing.assert_allclose(telem.mu_des, [0.0, P.g, 0.0], atol=1e-12)

    def test_step_command_demand(self):
        u, telem = control_step(X_TRIM, Command(v_x=3.0), U_TRIM, CFG, NlpAllocator(P), P, BOUNDS)
        np.testing.assert_allclose(telem.nu, [10.0, 0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(telem.mu_des, [10.0, P.g, 0.0], atol=1e-9)

    def test_backend_swap_changes_only_allocation(self):
        cmd = Command(v_x=1.0, theta=0.1)
        x = np.array([0.2, -0.1, 0.05, 0.02])
        results = []
        for alloc in (LcaAllocator(P), NlpAllocator(P)):
            _, telem = control_step(x, cmd, U_TRIM, CFG, alloc, P, BOUNDS)
            results.append(telem)
        np.testing.assert_array_equal(results[0].nu, results[1].nu)
        np.testing.assert_array_equal(results[0].mu_des, results[1].mu_des)


class TestExactLinearizationDecay:
    def fit_decay(self, channel, x0_offset):
        """Inner loop alone, fixed reduced command at zero: fit log-error slope."""
        cfg = ControllerConfig()
        alloc = NlpAllocator(P)
        x = X_TRIM.copy()
        x[channel] += x0_offset
        u = U_TRIM.copy()
        dt = cfg.dt
        n = int(round(0.08 / dt))  # a few samples inside the fastest time constant
        errs = []
        for _ in range(n):
            x_r = x[:3]
            nu = virtual_control(x_r, np.zeros(3), cfg)
            xdot0 = acquire_xdot0(x, u, P)
            mu = compute_mu_des(nu, xdot0, x[3], u, P)
            from tiltalloc.alloc import AllocationRequest

            res = alloc.allocate(AllocationRequest(theta0=x[3], mu_des=mu, u0=u, bounds=BOUNDS, dt=dt))
            assert not res.relaxed
            u = res.u
            errs.append(x[channel])
            for _ in range(5):
                x = integrate_step(x, u, dt / 5, P)
        errs = np.abs(np.array(errs))
        slope = np.polyfit(dt * np.arange(n), np.log(errs), 1)[0]
        return -slope

    @pytest.mark.parametrize("channel,offset", [(0, 1.0), (1, -0.5), (2, 0.5)])
    def test_decay_matches_gain(self, channel, offset):
        rate = self.fit_decay(channel, offset)
        K = ControllerConfig().K[channel]
        assert abs(rate - K) / K <= 0.05, f"channel {channel}: fitted {rate:.3f} vs {K:.3f}"


class TestController:
    def test_finite_difference_mode_runs(self):
        cfg = ControllerConfig(xdot_source=XdotSource.FINITE_DIFFERENCE)
        ctl = Controller(cfg, NlpAllocator(P), P, BOUNDS)
        x = X_TRIM.copy()
        u = U_TRIM.copy()
        for _ in range(3):
            u, telem = ctl.step(x, Command(), u)
        assert np.all(np.isfinite(u))
