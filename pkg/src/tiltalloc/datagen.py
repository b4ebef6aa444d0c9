"""Training-data pipeline for the learned allocator.

Heuristic region construction: grid the attitude range, push every vertex of
the input box through the actuator map to get extreme generalized inputs,
and treat the convex hull of those [theta, mu] points as the candidate
region. The hull is never built explicitly: membership is decided by a small
feasibility LP over convex-combination weights, and interior samples are
drawn directly as convex combinations of generator points, so they are
members by construction.

Each candidate is labeled by multistart SQP; candidates whose allocation
problem cannot be solved (outside the truly attainable set, or solver
failure) are rejected. Labeling is parallel across points with per-point
seeds derived from (global seed, point index), so results are byte-identical
for any worker count.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .alloc import make_nca_problem
from .mlp import NormStats
from .nlp import NlpStatus, solve_nlp_multistart
from .vehicle import InputBounds, VehicleParams, reduced_g, trim_point

__all__ = [
    "DatagenConfig",
    "HullRegion",
    "Dataset",
    "DegenerateRegion",
    "EmptyDataset",
    "build_candidate_points",
    "hull_membership",
    "sample_region",
    "label_dataset",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

DATASET_SCHEMA = "tiltalloc-dataset/v1"
DATASET_COLUMNS = ["theta", "mu_ax", "mu_az", "mu_alpha", "T1", "T2", "T3", "phi1", "phi2", "residual"]


class DegenerateRegion(ValueError):
    """Generators do not span the full dimension; widen the grid."""


class EmptyDataset(RuntimeError):
    """Every candidate label failed; the region is mis-specified."""


@dataclass
class DatagenConfig:
    theta_range: tuple[float, float] = (-math.pi / 4.0, math.pi / 4.0)
    n_x: int = 25
    n_s: int = 120_000
    rng_seed: int = 42
    nlp_tolerance: float = 1e-6
    n_starts: int = 8
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_x < 2:
            raise ValueError("n_x must be >= 2")
        if self.n_s < 0:
            raise ValueError("n_s must be >= 0")
        if self.theta_range[1] <= self.theta_range[0]:
            raise ValueError("theta_range must be nonempty")

    def digest(self) -> str:
        doc = json.dumps(self.__dict__, sort_keys=True, default=float)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass
class HullRegion:
    """Implicit convex region: the hull of its generator points."""

    generators: np.ndarray  # (n_gen, dim)

    def __post_init__(self) -> None:
        self.generators = np.asarray(self.generators, dtype=float)
        if self.generators.ndim != 2:
            raise ValueError("generators must be a 2-D array")
        self._rank: int | None = None

    @property
    def dim(self) -> int:
        return self.generators.shape[1]

    def affine_rank(self) -> int:
        if self._rank is None:
            centered = self.generators - self.generators.mean(axis=0)
            self._rank = int(np.linalg.matrix_rank(centered, tol=1e-9))
        return self._rank


def build_candidate_points(
    cfg: DatagenConfig, bounds: InputBounds, params: VehicleParams
) -> np.ndarray:
    """Grid theta, map every input-box vertex: N_x * 2^5 points [theta, mu]."""
    thetas = np.linspace(cfg.theta_range[0], cfg.theta_range[1], cfg.n_x)
    vertices = np.array(list(itertools.product(*zip(bounds.lower, bounds.upper))))
    points = np.empty((cfg.n_x * len(vertices), 4))
    k = 0
    for theta in thetas:
        for v in vertices:
            points[k, 0] = theta
            points[k, 1:] = reduced_g(theta, v, params)
            k += 1
    return points


def hull_membership(
    region: HullRegion, point: np.ndarray, tol: float = 1e-9
) -> tuple[bool, np.ndarray | None]:
    """Feasibility LP: weights lam >= 0, sum 1, combining generators into point.

    Returns (inside, weights); the weights are the membership certificate.
    """
    G = region.generators
    n = len(G)
    if region.affine_rank() < region.dim:
        raise DegenerateRegion(
            f"generators span rank {region.affine_rank()} < dim {region.dim}"
        )
    A_eq = np.vstack([G.T, np.ones(n)])
    b_eq = np.concatenate([np.asarray(point, dtype=float), [1.0]])
    res = linprog(
        c=np.zeros(n),
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=[(0.0, None)] * n,
        method="highs",
    )
    if not res.success:
        return False, None
    lam = res.x
    recombined = lam @ G
    if np.max(np.abs(recombined - point)) > tol * max(1.0, float(np.max(np.abs(point)))):
        return False, None
    return True, lam


def sample_region(region: HullRegion, n_s: int, rng_seed: int) -> np.ndarray:
    """n_s interior points: convex combinations of small random generator subsets.

    Exponential weights normalized to the simplex; membership holds by
    construction, no LP needed.
    """
    rng = np.random.default_rng(rng_seed)
    G = region.generators
    n_gen = len(G)
    out = np.empty((n_s, region.dim))
    for i in range(n_s):
        k = int(rng.integers(5, 9))
        idx = rng.choice(n_gen, size=min(k, n_gen), replace=False)
        w = rng.exponential(size=len(idx))
        w /= w.sum()
        out[i] = w @ G[idx]
    return out


# per-process labeling context, set once by the pool initializer
_CTX: dict = {}


def _init_labeler(seed, n_starts, tol, lb, ub, params_tuple):
    params = VehicleParams(*params_tuple)
    _CTX.update(
        seed=seed,
        n_starts=n_starts,
        tol=tol,
        lb=np.asarray(lb),
        ub=np.asarray(ub),
        params=params,
        u_trim=trim_point(params)[1],
    )


def _label_one(job):
    """Label one candidate point; runs inside worker processes."""
    index, point = job
    theta, mu = float(point[0]), np.asarray(point[1:], dtype=float)
    prob = make_nca_problem(theta, mu, _CTX["params"], _CTX["lb"], _CTX["ub"], eq_tolerance=_CTX["tol"])
    point_seed = int(np.random.SeedSequence((_CTX["seed"], index)).generate_state(1)[0])
    sol = solve_nlp_multistart(prob, _CTX["n_starts"], rng_seed=point_seed, initial_guess=_CTX["u_trim"])
    ok = sol.status is NlpStatus.CONVERGED
    return index, ok, sol.u_star if ok else None, sol.eq_residual_norm


@dataclass
class Dataset:
    X: np.ndarray          # (N, 4): [theta, mu_des]
    Y: np.ndarray          # (N, 5): optimal inputs
    residuals: np.ndarray  # (N,): achieved label residual (inf-norm)
    norm_stats: NormStats
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.X)


def label_dataset(
    points: np.ndarray,
    cfg: DatagenConfig,
    bounds: InputBounds,
    params: VehicleParams,
) -> Dataset:
    """Multistart-label every point, keep the solvable ones, in index order."""
    if len(points) == 0:
        raise ValueError("no candidate points supplied")
    init_args = (
        cfg.rng_seed,
        cfg.n_starts,
        cfg.nlp_tolerance,
        bounds.lower,
        bounds.upper,
        (params.m, params.I_y, params.L, params.g),
    )
    jobs = list(enumerate(points))
    results: list = [None] * len(jobs)
    if cfg.workers <= 1:
        _init_labeler(*init_args)
        for job in jobs:
            idx, ok, u, rn = _label_one(job)
            results[idx] = (ok, u, rn)
    else:
        with ProcessPoolExecutor(
            max_workers=cfg.workers, initializer=_init_labeler, initargs=init_args
        ) as pool:
            for idx, ok, u, rn in pool.map(_label_one, jobs, chunksize=64):
                results[idx] = (ok, u, rn)

    kept_X, kept_Y, kept_res = [], [], []
    for point, (ok, u, rn) in zip(points, results):
        if ok:
            kept_X.append(point)
            kept_Y.append(u)
            kept_res.append(rn)
    if not kept_X:
        raise EmptyDataset("no candidate produced a solvable allocation problem")
    X = np.asarray(kept_X)
    Y = np.asarray(kept_Y)
    residuals = np.asarray(kept_res)
    provenance = {
        "config_digest": cfg.digest(),
        "rng_seed": cfg.rng_seed,
        "n_init": int(len(points)),
        "n_kept": int(len(X)),
        "acceptance_rate": float(len(X) / len(points)),
    }
    return Dataset(X=X, Y=Y, residuals=residuals, norm_stats=NormStats.from_data(X, Y), provenance=provenance)


def generate_dataset(
    cfg: DatagenConfig, bounds: InputBounds, params: VehicleParams
) -> Dataset:
    """Full pipeline: candidates, region, interior samples, labels."""
    generators = build_candidate_points(cfg, bounds, params)
    region = HullRegion(generators)
    if region.affine_rank() < region.dim:
        raise DegenerateRegion("candidate points are affinely dependent; widen theta_range")
    interior = sample_region(region, cfg.n_s, cfg.rng_seed)
    # generators are kept as candidates too: they are the extreme points
    points = np.vstack([generators, interior]) if len(interior) else generators
    return label_dataset(points, cfg, bounds, params)


def save_dataset(ds: Dataset, directory: str, stem: str = "dataset") -> tuple[str, str]:
    """CSV (header + full precision) plus JSON sidecar; returns both paths."""
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, f"{stem}.csv")
    meta_path = os.path.join(directory, f"{stem}.meta.json")
    M = np.column_stack([ds.X, ds.Y, ds.residuals])
    np.savetxt(csv_path, M, fmt="%.17g", delimiter=",",
               header=",".join(DATASET_COLUMNS), comments="")
    meta = {
        "schema": DATASET_SCHEMA,
        "n": int(len(ds)),
        "norm_stats": {
            "x_mean": ds.norm_stats.x_mean.tolist(),
            "x_std": ds.norm_stats.x_std.tolist(),
            "y_mean": ds.norm_stats.y_mean.tolist(),
            "y_std": ds.norm_stats.y_std.tolist(),
        },
        **ds.provenance,
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2)
    return csv_path, meta_path


def load_dataset(csv_path: str) -> Dataset:
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
    if header != DATASET_COLUMNS:
        raise ValueError(f"{csv_path} does not match the dataset schema")
    M = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    X, Y, residuals = M[:, :4], M[:, 4:9], M[:, 9]
    meta_path = csv_path.replace(".csv", ".meta.json")
    provenance = {}
    norm_stats = None
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        provenance = {k: v for k, v in meta.items() if k not in ("schema", "norm_stats")}
        if "norm_stats" in meta:
            norm_stats = NormStats(**meta["norm_stats"])
    if norm_stats is None:
        norm_stats = NormStats.from_data(X, Y)
    return Dataset(X=X, Y=Y, residuals=residuals, norm_stats=norm_stats, provenance=provenance)
