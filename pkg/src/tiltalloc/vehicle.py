"""Planar bi-tilt tricopter model.

State x = [v_x, v_z, theta_dot, theta] (m/s, m/s, rad/s, rad).
Input u = [T1, T2, T3, phi1, phi2] (N, N, N, rad, rad): rotors 1 and 2 sit at
the arm tips and tilt by phi1/phi2 (positive = tilt left), rotor 3 is fixed
at the center. All angles in radians; degrees are converted at the config
boundary only.

The dynamics split as xdot = f(x) + g(x, u) with a constant drift on the
first three (controlled) channels, f_r = [0, -g, 0]. Only theta enters
g through the state, so the reduced input map is written g_r(theta, u).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VehicleParams",
    "InputBounds",
    "full_dynamics",
    "reduced_f",
    "reduced_g",
    "reduced_g_jacobian",
    "reduced_g_hessian",
    "trim_point",
]

# index conventions
IX_VX, IX_VZ, IX_THETADOT, IX_THETA = 0, 1, 2, 3
IU_T1, IU_T2, IU_T3, IU_PHI1, IU_PHI2 = 0, 1, 2, 3, 4

N_STATE = 4
N_REDUCED = 3
N_INPUT = 5


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of the tricopter.

    Attributes:
        m: vehicle mass [kg]
        I_y: pitch moment of inertia [kg m^2]
        L: arm length from center to the tilting rotors [m]
        g: gravitational acceleration [m/s^2]
    """

    m: float = 1.5
    I_y: float = 0.03
    L: float = 0.25
    g: float = 9.81

    def __post_init__(self) -> None:
        for name in ("m", "I_y", "L", "g"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"VehicleParams.{name} must be positive")


@dataclass(frozen=True)
class InputBounds:
    """Box (and optional rate) limits on the input vector.

    rate_max is a per-component bound on |udot| (N/s, rad/s); None disables
    rate limiting, which is the default operating mode.
    """

    lower: np.ndarray
    upper: np.ndarray
    rate_max: np.ndarray | None = None

    def __post_init__(self) -> None:
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (N_INPUT,) or hi.shape != (N_INPUT,):
            raise ValueError("bounds must be length-5 vectors")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if self.rate_max is not None:
            rm = np.asarray(self.rate_max, dtype=float)
            if rm.shape != (N_INPUT,) or np.any(rm <= 0.0):
                raise ValueError("rate_max must be 5 positive entries")
            object.__setattr__(self, "rate_max", rm)

    @classmethod
    def default(cls, params: VehicleParams, tilt_max: float = math.pi / 3.0) -> "InputBounds":
        """Thrusts in [0, m*g], tilts in [-tilt_max, tilt_max], no rate limit."""
        t_max = params.m * params.g
        return cls(
            lower=np.array([0.0, 0.0, 0.0, -tilt_max, -tilt_max]),
            upper=np.array([t_max, t_max, t_max, tilt_max, tilt_max]),
        )

    def contains(self, u: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(u, self.lower), self.upper)

    def effective(self, u0: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Box intersected with the rate window around u0 (identity if no rate limit)."""
        if self.rate_max is None:
            return self.lower, self.upper
        du = self.rate_max * dt
        return np.maximum(self.lower, u0 - du), np.minimum(self.upper, u0 + du)


def reduced_f(params: VehicleParams) -> np.ndarray:
    """Constant drift of the controlled channels: [0, -g, 0]."""
    return np.array([0.0, -params.g, 0.0])


def reduced_g(theta: float, u: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Input contribution to [v_x dot, v_z dot, theta_ddot].

    Scalar math on purpose: this sits inside every solver iteration.
    """
    t1, t2, t3, p1, p2 = u[0], u[1], u[2], u[3], u[4]
    s0, c0 = math.sin(theta), math.cos(theta)
    s1, c1 = math.sin(theta + p1), math.cos(theta + p1)
    s2, c2 = math.sin(theta + p2), math.cos(theta + p2)
    # divide rather than scale by 1/m: keeps hover trim an exact equilibrium
    ax = -(t3 * s0 + t1 * s1 + t2 * s2) / params.m
    az = (t3 * c0 + t1 * c1 + t2 * c2) / params.m
    # moment row depends on the tilt angles only, never on theta
    alpha = (params.L / params.I_y) * (-t1 * math.cos(p1) + t2 * math.cos(p2))
    return np.array([ax, az, alpha])


def reduced_g_jacobian(theta: float, u: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Analytic effectiveness matrix d g_r / d u (3x5)."""
    t1, t2, p1, p2 = u[0], u[1], u[3], u[4]
    inv_m = 1.0 / params.m
    li = params.L / params.I_y
    s0, c0 = math.sin(theta), math.cos(theta)
    s1, c1 = math.sin(theta + p1), math.cos(theta + p1)
    s2, c2 = math.sin(theta + p2), math.cos(theta + p2)
    return np.array(
        [
            [-inv_m * s1, -inv_m * s2, -inv_m * s0, -inv_m * t1 * c1, -inv_m * t2 * c2],
            [inv_m * c1, inv_m * c2, inv_m * c0, -inv_m * t1 * s1, -inv_m * t2 * s2],
            [-li * math.cos(p1), li * math.cos(p2), 0.0, li * t1 * math.sin(p1), -li * t2 * math.sin(p2)],
        ]
    )


def reduced_g_hessian(theta: float, u: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Second derivatives of g_r w.r.t. u: shape (3, 5, 5), symmetric slices.

    Only the thrust/tilt pairs of the tilting rotors are nonzero; rotor 3
    enters linearly.
    """
    t1, t2, p1, p2 = u[0], u[1], u[3], u[4]
    inv_m = 1.0 / params.m
    li = params.L / params.I_y
    s1, c1 = math.sin(theta + p1), math.cos(theta + p1)
    s2, c2 = math.sin(theta + p2), math.cos(theta + p2)
    sp1, cp1 = math.sin(p1), math.cos(p1)
    sp2, cp2 = math.sin(p2), math.cos(p2)
    H = np.zeros((3, 5, 5))
    # lateral acceleration row
    H[0, 0, 3] = H[0, 3, 0] = -inv_m * c1
    H[0, 1, 4] = H[0, 4, 1] = -inv_m * c2
    H[0, 3, 3] = inv_m * t1 * s1
    H[0, 4, 4] = inv_m * t2 * s2
    # vertical acceleration row
    H[1, 0, 3] = H[1, 3, 0] = -inv_m * s1
    H[1, 1, 4] = H[1, 4, 1] = -inv_m * s2
    H[1, 3, 3] = -inv_m * t1 * c1
    H[1, 4, 4] = -inv_m * t2 * c2
    # angular acceleration row
    H[2, 0, 3] = H[2, 3, 0] = li * sp1
    H[2, 1, 4] = H[2, 4, 1] = -li * sp2
    H[2, 3, 3] = li * t1 * cp1
    H[2, 4, 4] = -li * t2 * cp2
    return H


def full_dynamics(x: np.ndarray, u: np.ndarray, params: VehicleParams) -> np.ndarray:
    """xdot = f(x) + g(x, u) for the full 4-state model."""
    gr = reduced_g(x[IX_THETA], u, params)
    return np.array([gr[0], gr[1] - params.g, gr[2], x[IX_THETADOT]])


def trim_point(params: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """Hover trim: zero state, each rotor carrying a third of the weight."""
    t = params.m * params.g / 3.0
    return np.zeros(N_STATE), np.array([t, t, t, 0.0, 0.0])
