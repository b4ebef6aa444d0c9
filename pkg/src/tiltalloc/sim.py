"""Sampled-data closed-loop simulator and log handling.

The plant integrates with classical RK4 between control samples (zero-order
hold on the input), several physics substeps per sample so integration error
stays far below the sampled-data effects being studied. Each control sample
logs the full state, demands, allocation telemetry, the true state
derivative under the freshly applied input, and the feedback-linearization
error e = xdot_r - nu.

Logs round-trip through a delimited text file with a fixed header (the
contract consumed by the plotting component) plus a JSON metadata sidecar.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .alloc import Backend
from .control import Command, Controller, ControllerConfig, DEFAULT_CONTROL_DT
from .vehicle import InputBounds, VehicleParams, full_dynamics, trim_point

__all__ = [
    "TrajectoryParams",
    "SimConfig",
    "SimLog",
    "rk4_step",
    "integrate_step",
    "reference",
    "run_simulation",
    "fbl_error_series",
    "timing_summary",
    "format_timing_table",
    "SIMLOG_SCHEMA",
    "SIMLOG_COLUMNS",
]

SIMLOG_SCHEMA = "tiltalloc-simlog/v1"
# column order is part of the file contract; append-only
SIMLOG_COLUMNS = [
    "t",
    "v_x", "v_z", "theta_dot", "theta",
    "cmd_v_x", "cmd_v_z", "cmd_theta",
    "nu_ax", "nu_az", "nu_alpha",
    "mu_des_ax", "mu_des_az", "mu_des_alpha",
    "T1", "T2", "T3", "phi1", "phi2",
    "xdot_v_x", "xdot_v_z", "xdot_theta_dot", "xdot_theta",
    "fbl_ax", "fbl_az", "fbl_alpha",
    "relaxed",
    "slack_ax", "slack_az", "slack_alpha",
    "solve_time",
    "lin_residual",
]

STATE_ABORT_LIMIT = 1e6


@dataclass
class TrajectoryParams:
    """Reference schedules.

    single-step: v_x steps to step_vx at step_time, everything else zero.
    triple-doublet: one doublet per controlled channel in the order
    v_x, v_z, theta; amplitudes configurable, 15 s total.
    """

    step_vx: float = 3.0
    step_time: float = 1.0
    doublet_vx: float = 2.0
    doublet_vz: float = 1.0
    doublet_theta: float = np.deg2rad(15.0)
    vx_window: tuple[float, float] = (1.0, 5.0)
    vz_window: tuple[float, float] = (6.0, 10.0)
    theta_window: tuple[float, float] = (11.0, 14.0)


def reference(t: float, trajectory: str, traj_params: TrajectoryParams | None = None,
              custom: Callable[[float], Command] | None = None) -> Command:
    """Command at time t for the named trajectory."""
    p = traj_params or TrajectoryParams()
    if trajectory == "single-step":
        return Command(v_x=p.step_vx if t >= p.step_time else 0.0)
    if trajectory == "triple-doublet":
        cmd = Command()
        for (t0, t1), amp, channel in (
            (p.vx_window, p.doublet_vx, "v_x"),
            (p.vz_window, p.doublet_vz, "v_z"),
            (p.theta_window, p.doublet_theta, "theta"),
        ):
            mid = 0.5 * (t0 + t1)
            if t0 <= t < mid:
                setattr(cmd, channel, amp)
            elif mid <= t < t1:
                setattr(cmd, channel, -amp)
        return cmd
    if trajectory == "custom":
        if custom is None:
            raise ValueError("custom trajectory needs a callable")
        return custom(t)
    raise ValueError(f"unknown trajectory {trajectory!r}")


@dataclass
class SimConfig:
    duration: float = 15.0
    control_dt: float = DEFAULT_CONTROL_DT
    physics_substeps: int = 10
    trajectory: str = "single-step"
    traj_params: TrajectoryParams = field(default_factory=TrajectoryParams)
    # piecewise-constant acceleration disturbance: list of (t_start, [ax, az, alpha])
    disturbance: list[tuple[float, list[float]]] | None = None
    rng_seed: int = 0
    initial_state: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.duration <= 0.0 or self.physics_substeps < 1:
            raise ValueError("duration must be positive, physics_substeps >= 1")

    def disturbance_at(self, t: float) -> np.ndarray | None:
        if not self.disturbance:
            return None
        active = None
        for t0, vec in self.disturbance:
            if t >= t0:
                active = vec
        return None if active is None else np.asarray(active, dtype=float)


def rk4_step(f: Callable[[np.ndarray], np.ndarray], y: np.ndarray, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of y' = f(y)."""
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_step(
    x: np.ndarray,
    u: np.ndarray,
    dt_sub: float,
    params: VehicleParams,
    disturbance: np.ndarray | None = None,
) -> np.ndarray:
    """RK4 step of the plant with the input held constant."""
    if dt_sub <= 0.0:
        raise ValueError("dt_sub must be positive")
    if disturbance is None:
        return rk4_step(lambda s: full_dynamics(s, u, params), x, dt_sub)
    d4 = np.array([disturbance[0], disturbance[1], disturbance[2], 0.0])
    return rk4_step(lambda s: full_dynamics(s, u, params) + d4, x, dt_sub)


@dataclass
class SimLog:
    t: np.ndarray
    x: np.ndarray          # (N, 4)
    cmd: np.ndarray        # (N, 3)
    nu: np.ndarray         # (N, 3)
    mu_des: np.ndarray     # (N, 3)
    u: np.ndarray          # (N, 5)
    xdot: np.ndarray       # (N, 4) true derivative under the applied input
    fbl_error: np.ndarray  # (N, 3)
    relaxed: np.ndarray    # (N,) 0/1
    slack: np.ndarray      # (N, 3)
    solve_time: np.ndarray  # (N,) seconds
    lin_residual: np.ndarray  # (N,) nan for non-LCA backends
    backend: str = "nlp"
    trajectory: str = "single-step"
    control_dt: float = DEFAULT_CONTROL_DT
    aborted: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([
            self.t, self.x, self.cmd, self.nu, self.mu_des, self.u,
            self.xdot, self.fbl_error, self.relaxed.astype(float),
            self.slack, self.solve_time, self.lin_residual,
        ])

    def save(self, directory: str, stem: str = "simlog") -> tuple[str, str]:
        """Write <stem>.csv and <stem>.meta.json; returns both paths."""
        os.makedirs(directory, exist_ok=True)
        csv_path = os.path.join(directory, f"{stem}.csv")
        meta_path = os.path.join(directory, f"{stem}.meta.json")
        header = ",".join(SIMLOG_COLUMNS)
        np.savetxt(csv_path, self.as_matrix(), fmt="%.17g", delimiter=",",
                   header=header, comments="")
        meta = {
            "schema": SIMLOG_SCHEMA,
            "backend": self.backend,
            "trajectory": self.trajectory,
            "control_dt": self.control_dt,
            "aborted": self.aborted,
            "n_samples": int(len(self.t)),
            **self.meta,
        }
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=2)
        return csv_path, meta_path

    @classmethod
    def load(cls, csv_path: str) -> "SimLog":
        with open(csv_path) as fh:
            header = fh.readline().strip().split(",")
        if header != SIMLOG_COLUMNS:
            raise ValueError(f"{csv_path} does not match the simlog schema")
        M = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        meta_path = csv_path.replace(".csv", ".meta.json")
        meta = {}
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta = json.load(fh)
        return cls(
            t=M[:, 0],
            x=M[:, 1:5],
            cmd=M[:, 5:8],
            nu=M[:, 8:11],
            mu_des=M[:, 11:14],
            u=M[:, 14:19],
            xdot=M[:, 19:23],
            fbl_error=M[:, 23:26],
            relaxed=M[:, 26].astype(bool),
            slack=M[:, 27:30],
            solve_time=M[:, 30],
            lin_residual=M[:, 31],
            backend=meta.get("backend", "unknown"),
            trajectory=meta.get("trajectory", "unknown"),
            control_dt=float(meta.get("control_dt", DEFAULT_CONTROL_DT)),
            aborted=bool(meta.get("aborted", False)),
            meta=meta,
        )


def run_simulation(
    sim_cfg: SimConfig,
    ctrl_cfg: ControllerConfig,
    allocator,
    params: VehicleParams,
    bounds: InputBounds,
) -> SimLog:
    """Closed-loop run from trim; returns the per-sample log.

    Aborts cleanly (partial log, aborted=True) if the state leaves the
    sanity box or goes non-finite, which the linearized backend can provoke.
    """
    n_steps = int(round(sim_cfg.duration / sim_cfg.control_dt))
    n_total = n_steps + 1
    x0, u_trim = trim_point(params)
    x = x0.copy() if sim_cfg.initial_state is None else np.asarray(sim_cfg.initial_state, dtype=float).copy()
    u_prev = u_trim.copy()

    controller = Controller(ctrl_cfg, allocator, params, bounds)

    cols = {
        "t": np.zeros(n_total),
        "x": np.zeros((n_total, 4)),
        "cmd": np.zeros((n_total, 3)),
        "nu": np.zeros((n_total, 3)),
        "mu_des": np.zeros((n_total, 3)),
        "u": np.zeros((n_total, 5)),
        "xdot": np.zeros((n_total, 4)),
        "fbl": np.zeros((n_total, 3)),
        "relaxed": np.zeros(n_total, dtype=bool),
        "slack": np.zeros((n_total, 3)),
        "solve_time": np.zeros(n_total),
        "lin_residual": np.full(n_total, np.nan),
    }
    aborted = False
    dt_sub = sim_cfg.control_dt / sim_cfg.physics_substeps
    n_logged = 0

    for k in range(n_total):
        t = k * sim_cfg.control_dt
        cmd = reference(t, sim_cfg.trajectory, sim_cfg.traj_params)
        dist = sim_cfg.disturbance_at(t)
        u, telem = controller.step(x, cmd, u_prev, disturbance=dist)

        xdot_true = full_dynamics(x, u, params)
        if dist is not None:
            xdot_true = xdot_true + np.array([dist[0], dist[1], dist[2], 0.0])

        cols["t"][k] = t
        cols["x"][k] = x
        cols["cmd"][k] = cmd.as_array()
        cols["nu"][k] = telem.nu
        cols["mu_des"][k] = telem.mu_des
        cols["u"][k] = u
        cols["xdot"][k] = xdot_true
        cols["fbl"][k] = xdot_true[:3] - telem.nu
        cols["relaxed"][k] = telem.allocation.relaxed
        cols["slack"][k] = telem.allocation.slack
        cols["solve_time"][k] = telem.allocation.solve_time
        if telem.allocation.lin_residual is not None:
            cols["lin_residual"][k] = telem.allocation.lin_residual
        n_logged = k + 1

        if k < n_steps:
            for _ in range(sim_cfg.physics_substeps):
                x = integrate_step(x, u, dt_sub, params, dist)
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > STATE_ABORT_LIMIT:
                aborted = True
                break
        u_prev = u

    sl = slice(0, n_logged)
    return SimLog(
        t=cols["t"][sl],
        x=cols["x"][sl],
        cmd=cols["cmd"][sl],
        nu=cols["nu"][sl],
        mu_des=cols["mu_des"][sl],
        u=cols["u"][sl],
        xdot=cols["xdot"][sl],
        fbl_error=cols["fbl"][sl],
        relaxed=cols["relaxed"][sl],
        slack=cols["slack"][sl],
        solve_time=cols["solve_time"][sl],
        lin_residual=cols["lin_residual"][sl],
        backend=getattr(allocator, "backend", Backend.NLP).value,
        trajectory=sim_cfg.trajectory,
        control_dt=sim_cfg.control_dt,
        aborted=aborted,
        meta={"duration": sim_cfg.duration, "physics_substeps": sim_cfg.physics_substeps,
              "rng_seed": sim_cfg.rng_seed},
    )


def fbl_error_series(log: SimLog, window: tuple[float, float] | None = None,
                     exclude_relaxed: bool = False):
    """Feedback-linearization error series and per-channel RMS.

    window restricts to t in [t0, t1); exclude_relaxed drops samples whose
    allocation was relaxed before computing the RMS.
    """
    mask = np.ones(len(log), dtype=bool)
    if window is not None:
        mask &= (log.t >= window[0]) & (log.t < window[1])
    if exclude_relaxed:
        mask &= ~log.relaxed
    e = log.fbl_error[mask]
    if len(e) == 0:
        rms = np.full(3, np.nan)
    else:
        rms = np.sqrt(np.mean(e * e, axis=0))
    return e, rms


def timing_summary(logs: list[SimLog]) -> dict:
    """Per-(backend, trajectory) solve-time stats in milliseconds."""
    table: dict = {}
    for log in logs:
        key = (log.backend, log.trajectory)
        times = table.setdefault(key, [])
        times.append(log.solve_time)
    out = {}
    for (backend, traj), chunks in table.items():
        times_ms = np.concatenate(chunks) * 1e3
        out[(backend, traj)] = {
            "mean_ms": float(np.mean(times_ms)),
            "sd_ms": float(np.std(times_ms)),
            "max_ms": float(np.max(times_ms)),
            "n": int(len(times_ms)),
        }
    return out


def format_timing_table(summary: dict) -> str:
    """Render the mean +/- SD [max] table, one row per backend."""
    trajs = sorted({traj for (_, traj) in summary})
    backends = sorted({b for (b, _) in summary})
    lines = ["backend | " + " | ".join(f"{t}: mean +/- SD [max] (ms)" for t in trajs)]
    for b in backends:
        cells = []
        for t in trajs:
            s = summary.get((b, t))
            cells.append("-" if s is None else f"{s['mean_ms']:.2f} +/- {s['sd_ms']:.2f} [{s['max_ms']:.2f}]")
        lines.append(f"{b:7s} | " + " | ".join(cells))
    return "\n".join(lines)
