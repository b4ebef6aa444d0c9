"""Cascaded tracking controller.

Outer loop: proportional angle control producing an angular-rate command.
Inner loop: proportional virtual control on the reduced state [v_x, v_z,
theta_dot], feedback-linearized through whichever allocation backend is
selected. The measured state derivative enters the demand directly, so any
mismatch or disturbance seen at the previous sample is compensated at the
next one.

Gains follow first-order time-constant targets: 0.3 s for v_x and for the
angle loop, 0.4 s for v_z, and 0.03 s for the angular rate (a factor of 10
inside the angle loop for cascade separation).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .alloc import AllocationRequest, AllocationResult, Backend, compute_mu_des
from .vehicle import InputBounds, VehicleParams, full_dynamics, reduced_g

__all__ = [
    "XdotSource",
    "ControllerConfig",
    "Command",
    "StepTelemetry",
    "angle_loop",
    "virtual_control",
    "acquire_xdot0",
    "control_step",
    "Controller",
    "DEFAULT_CONTROL_DT",
]

# 400 Hz control: fast enough that the sampled inner loop tracks its 0.03 s
# time-constant target to within a few percent
DEFAULT_CONTROL_DT = 0.0025


class XdotSource(enum.Enum):
    MODEL_EVAL = "model-eval"
    FINITE_DIFFERENCE = "finite-difference"


@dataclass
class ControllerConfig:
    K_theta: float = 1.0 / 0.3
    K: np.ndarray = field(default_factory=lambda: np.array([1.0 / 0.3, 1.0 / 0.4, 1.0 / 0.03]))
    backend: Backend = Backend.NLP
    dt: float = DEFAULT_CONTROL_DT
    xdot_source: XdotSource = XdotSource.MODEL_EVAL

    def __post_init__(self) -> None:
        self.K = np.asarray(self.K, dtype=float)
        if self.K_theta <= 0.0 or np.any(self.K <= 0.0):
            raise ValueError("gains must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")


@dataclass
class Command:
    v_x: float = 0.0
    v_z: float = 0.0
    theta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.v_x, self.v_z, self.theta])


@dataclass
class StepTelemetry:
    nu: np.ndarray
    mu_des: np.ndarray
    xdot0: np.ndarray
    theta_dot_cmd: float
    allocation: AllocationResult


def angle_loop(theta: float, theta_cmd: float, cfg: ControllerConfig) -> float:
    """Proportional outer loop: commanded angular rate."""
    return -cfg.K_theta * (theta - theta_cmd)


def virtual_control(x_r: np.ndarray, x_rc: np.ndarray, cfg: ControllerConfig) -> np.ndarray:
    """Desired reduced-state derivative: -K (x_r - x_rc)."""
    return -cfg.K * (x_r - x_rc)


def acquire_xdot0(
    x: np.ndarray,
    u0: np.ndarray,
    params: VehicleParams,
    mode: XdotSource = XdotSource.MODEL_EVAL,
    disturbance: np.ndarray | None = None,
    prev_xr: np.ndarray | None = None,
    dt: float | None = None,
) -> np.ndarray:
    """Reduced-state derivative as the controller sees it.

    MODEL_EVAL plays a perfect derivative sensor (plus any injected
    disturbance); FINITE_DIFFERENCE differences consecutive samples and
    needs the previous reduced state.
    """
    if mode is XdotSource.MODEL_EVAL:
        xdot = full_dynamics(x, u0, params)[:3]
        if disturbance is not None:
            xdot = xdot + disturbance
        return xdot
    if prev_xr is None or dt is None:
        raise ValueError("finite-difference mode needs prev_xr and dt")
    return (x[:3] - prev_xr) / dt


def control_step(
    x: np.ndarray,
    cmd: Command,
    u0: np.ndarray,
    cfg: ControllerConfig,
    allocator,
    params: VehicleParams,
    bounds: InputBounds,
    disturbance: np.ndarray | None = None,
    prev_xr: np.ndarray | None = None,
) -> tuple[np.ndarray, StepTelemetry]:
    """One sample of the cascade: angle loop, virtual control, allocation."""
    theta = x[3]
    theta_dot_cmd = angle_loop(theta, cmd.theta, cfg)
    x_rc = np.array([cmd.v_x, cmd.v_z, theta_dot_cmd])
    nu = virtual_control(x[:3], x_rc, cfg)
    xdot0 = acquire_xdot0(x, u0, params, cfg.xdot_source, disturbance, prev_xr, cfg.dt)
    mu_des = compute_mu_des(nu, xdot0, theta, u0, params)
    req = AllocationRequest(theta0=theta, mu_des=mu_des, u0=u0, bounds=bounds, dt=cfg.dt)
    result = allocator.allocate(req)
    telemetry = StepTelemetry(
        nu=nu,
        mu_des=mu_des,
        xdot0=xdot0,
        theta_dot_cmd=theta_dot_cmd,
        allocation=result,
    )
    return result.u, telemetry


class Controller:
    """Stateful per-loop wrapper (holds the previous reduced state for the
    finite-difference derivative mode). One instance per simulation."""

    def __init__(self, cfg: ControllerConfig, allocator, params: VehicleParams, bounds: InputBounds):
        self.cfg = cfg
        self.allocator = allocator
        self.params = params
        self.bounds = bounds
        self._prev_xr: np.ndarray | None = None

    def step(
        self,
        x: np.ndarray,
        cmd: Command,
        u0: np.ndarray,
        disturbance: np.ndarray | None = None,
    ) -> tuple[np.ndarray, StepTelemetry]:
        prev = self._prev_xr if self._prev_xr is not None else x[:3].copy()
        u, telemetry = control_step(
            x, cmd, u0, self.cfg, self.allocator, self.params, self.bounds,
            disturbance=disturbance, prev_xr=prev,
        )
        self._prev_xr = x[:3].copy()
        return u, telemetry
