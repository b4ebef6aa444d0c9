"""Experiment configuration: one YAML document, defaults, dotted overrides.

Angles cross this boundary in degrees and gains as time constants; inside
the package everything is radians and gains. Unknown keys are rejected with
their full dotted path so typos surface immediately.
"""

from __future__ import annotations

import copy
import math
import os
from typing import Any

import numpy as np
import yaml

from .alloc import Backend
from .control import ControllerConfig, XdotSource
from .datagen import DatagenConfig
from .mlp import TrainConfig
from .sim import SimConfig, TrajectoryParams
from .vehicle import InputBounds, VehicleParams

__all__ = ["ConfigError", "default_config", "load_config", "apply_overrides", "build_objects"]


class ConfigError(ValueError):
    """Bad configuration file or override."""


DEFAULTS: dict[str, Any] = {
    "vehicle": {
        "m": 1.5,
        "I_y": 0.03,
        "L": 0.25,
        "g": 9.81,
        "tilt_max_deg": 60.0,
        "thrust_max": None,  # null -> m*g
        "rate_max": None,    # [T1dot, T2dot, T3dot, phi1dot, phi2dot] or null
    },
    "control": {
        "tau_theta": 0.3,
        "tau_vx": 0.3,
        "tau_vz": 0.4,
        "tau_thetadot": 0.03,
        "dt": 0.0025,
        "xdot_source": "model-eval",
    },
    "sim": {
        "duration": 15.0,
        "physics_substeps": 10,
        "step_vx": 3.0,
        "step_time": 1.0,
        "doublet_vx": 2.0,
        "doublet_vz": 1.0,
        "doublet_theta_deg": 15.0,
        "vx_window": [1.0, 5.0],
        "vz_window": [6.0, 10.0],
        "theta_window": [11.0, 14.0],
        "rng_seed": 0,
    },
    "datagen": {
        "theta_range_deg": [-45.0, 45.0],
        "n_x": 25,
        "n_s": 120000,
        "rng_seed": 42,
        "nlp_tolerance": 1e-6,
        "n_starts": 8,
        "workers": 1,
    },
    "train": {
        "layer_sizes": [4, 128, 128, 128, 5],
        "batch_size": 256,
        "learning_rate": 1e-3,
        "adam_betas": [0.9, 0.999],
        "epochs": 200,
        "validation_fraction": 0.1,
        "early_stop_patience": 20,
        "rng_seed": 0,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    """Defaults, overlaid with the YAML file when given."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        return cfg
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _merge(cfg, doc)


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
    """Apply --set key.path=value pairs; values parse as YAML scalars."""
    out = copy.deepcopy(cfg)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return out


def build_objects(cfg: dict):
    """Materialize package objects from the resolved document."""
    v = cfg["vehicle"]
    try:
        params = VehicleParams(m=v["m"], I_y=v["I_y"], L=v["L"], g=v["g"])
    except ValueError as exc:
        raise ConfigError(f"vehicle: {exc}") from exc
    tilt = math.radians(v["tilt_max_deg"])
    t_max = v["thrust_max"] if v["thrust_max"] is not None else params.m * params.g
    rate = None if v["rate_max"] is None else np.asarray(v["rate_max"], dtype=float)
    try:
        bounds = InputBounds(
            lower=np.array([0.0, 0.0, 0.0, -tilt, -tilt]),
            upper=np.array([t_max, t_max, t_max, tilt, tilt]),
            rate_max=rate,
        )
    except ValueError as exc:
        raise ConfigError(f"vehicle bounds: {exc}") from exc

    c = cfg["control"]
    try:
        ctrl = ControllerConfig(
            K_theta=1.0 / c["tau_theta"],
            K=np.array([1.0 / c["tau_vx"], 1.0 / c["tau_vz"], 1.0 / c["tau_thetadot"]]),
            dt=c["dt"],
            xdot_source=XdotSource(c["xdot_source"]),
        )
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"control: {exc}") from exc

    s = cfg["sim"]
    traj_params = TrajectoryParams(
        step_vx=s["step_vx"],
        step_time=s["step_time"],
        doublet_vx=s["doublet_vx"],
        doublet_vz=s["doublet_vz"],
        doublet_theta=math.radians(s["doublet_theta_deg"]),
        vx_window=tuple(s["vx_window"]),
        vz_window=tuple(s["vz_window"]),
        theta_window=tuple(s["theta_window"]),
    )

    def sim_config(trajectory: str) -> SimConfig:
        return SimConfig(
            duration=s["duration"],
            control_dt=c["dt"],
            physics_substeps=s["physics_substeps"],
            trajectory=trajectory,
            traj_params=traj_params,
            rng_seed=s["rng_seed"],
        )

    d = cfg["datagen"]
    workers = d["workers"]
    env_workers = os.environ.get("TILTALLOC_WORKERS")
    if env_workers is not None:
        try:
            workers = int(env_workers)
        except ValueError as exc:
            raise ConfigError(f"TILTALLOC_WORKERS must be an integer: {env_workers!r}") from exc
    try:
        datagen = DatagenConfig(
            theta_range=(math.radians(d["theta_range_deg"][0]), math.radians(d["theta_range_deg"][1])),
            n_x=d["n_x"],
            n_s=d["n_s"],
            rng_seed=d["rng_seed"],
            nlp_tolerance=d["nlp_tolerance"],
            n_starts=d["n_starts"],
            workers=workers,
        )
    except ValueError as exc:
        raise ConfigError(f"datagen: {exc}") from exc

    t = cfg["train"]
    try:
        train_cfg = TrainConfig(
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            adam_betas=tuple(t["adam_betas"]),
            epochs=t["epochs"],
            validation_fraction=t["validation_fraction"],
            early_stop_patience=t["early_stop_patience"],
            rng_seed=t["rng_seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc

    return {
        "params": params,
        "bounds": bounds,
        "control": ctrl,
        "sim_config": sim_config,
        "datagen": datagen,
        "train": train_cfg,
        "layer_sizes": list(t["layer_sizes"]),
    }
