#!/usr/bin/env python3
"""Build the cached full-size dataset and trained allocator model.

Long-running (roughly an hour of labeling on two cores). Outputs land in
artifacts/: dataset.csv(+meta), holdout.csv (1000 rows excluded from
training), nn_model.json. Safe to re-run; everything is seeded.
"""

import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from tiltalloc.datagen import DatagenConfig, generate_dataset, save_dataset
from tiltalloc.mlp import NormStats, TrainConfig, save_model, train
from tiltalloc.vehicle import InputBounds, VehicleParams

ART = os.path.join(os.path.dirname(__file__), "..", "artifacts")
HOLDOUT_SEED = 2024
HOLDOUT_N = 1000


def main():
    os.makedirs(ART, exist_ok=True)
    params = VehicleParams()
    bounds = InputBounds.default(params)
    cfg = DatagenConfig(workers=2)

    t0 = time.time()
    print(f"[datagen] n_x={cfg.n_x} n_s={cfg.n_s} n_starts={cfg.n_starts} workers={cfg.workers}", flush=True)
    ds = generate_dataset(cfg, bounds, params)
    print(f"[datagen] N_init={ds.provenance['n_init']} kept={len(ds)} "
          f"rate={ds.provenance['acceptance_rate']:.4f} in {time.time()-t0:.0f}s", flush=True)
    save_dataset(ds, ART, "dataset")

    # carve out an untouched holdout slice for residual diagnostics
    rng = np.random.default_rng(HOLDOUT_SEED)
    idx = rng.permutation(len(ds))
    hold, rest = idx[:HOLDOUT_N], idx[HOLDOUT_N:]
    M = np.column_stack([ds.X[hold], ds.Y[hold], ds.residuals[hold]])
    np.savetxt(os.path.join(ART, "holdout.csv"), M, fmt="%.17g", delimiter=",",
               header="theta,mu_ax,mu_az,mu_alpha,T1,T2,T3,phi1,phi2,residual", comments="")

    X_train, Y_train = ds.X[rest], ds.Y[rest]
    norm = NormStats.from_data(X_train, Y_train)
    tcfg = TrainConfig()
    t0 = time.time()
    print(f"[train] N={len(X_train)} arch=[4,128,128,128,5] epochs<={tcfg.epochs}", flush=True)
    model = train(X_train, Y_train, tcfg, layer_sizes=[4, 128, 128, 128, 5], norm_stats=norm)
    meta = model.training_meta
    print(f"[train] best_val={meta['best_val_loss']:.3e} (rmse {np.sqrt(meta['best_val_loss']):.4f}) "
          f"epoch {meta['best_epoch']}/{meta['epochs_run']} in {time.time()-t0:.0f}s", flush=True)
    save_model(model, os.path.join(ART, "nn_model.json"))
    print("[done]", flush=True)


if __name__ == "__main__":
    main()
