"""Command-line entry point.

Subcommands cover the whole pipeline: dataset generation, training,
closed-loop simulation, solver benchmarking, and run comparison. Every
command resolves its configuration (defaults < --config file < --set
overrides), stages its outputs in a temporary directory, and commits them
together with a manifest listing hashes of everything read and written;
a failed command leaves nothing behind.

Exit codes: 0 success, 1 usage/config error, 2 runtime abort (non-finite
state), 3 I/O error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .alloc import Backend, make_allocator
from .config import ConfigError, apply_overrides, build_objects, load_config
from .datagen import EmptyDataset, generate_dataset, load_dataset, save_dataset
from .mlp import CorruptFile, NormStats, SchemaMismatch, TrainingDiverged, load_model, save_model, train
from .sim import SimLog, fbl_error_series, format_timing_table, run_simulation, timing_summary

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

METHODS = {"lca": Backend.LCA, "nlp": Backend.NLP, "nn": Backend.NN}
TRAJECTORIES = ("single-step", "triple-doublet")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class OutputStage:
    """Write into a scratch dir, commit everything at once (or nothing)."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.tmp = tempfile.mkdtemp(prefix=".stage-", dir=os.path.dirname(out_dir) or ".")

    def path(self, name: str) -> str:
        return os.path.join(self.tmp, name)

    def commit(self, command: str, config: dict, inputs: list[str], extra_meta: dict | None = None) -> list[str]:
        outputs = sorted(
            os.path.join(root, f)
            for root, _, files in os.walk(self.tmp)
            for f in files
        )
        manifest = {
            "tool": "tiltalloc",
            "version": __version__,
            "command": command,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "resolved_config": config,
            "inputs": [{"path": os.path.abspath(p), "sha256": _sha256(p)} for p in inputs],
            "outputs": [],
        }
        if extra_meta:
            manifest.update(extra_meta)
        rel_names = [os.path.relpath(p, self.tmp) for p in outputs]
        for p, rel in zip(outputs, rel_names):
            manifest["outputs"].append({"path": os.path.join(self.out_dir, rel), "sha256": _sha256(p)})
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, default=str)
        os.makedirs(self.out_dir, exist_ok=True)
        final = []
        for rel in rel_names + ["manifest.json"]:
            dst = os.path.join(self.out_dir, rel)
            os.makedirs(os.path.dirname(dst) or ".", exist_ok=True)
            os.replace(self.path(rel), dst)
            final.append(dst)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return final

    def abandon(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _resolve(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    return apply_overrides(cfg, getattr(args, "set", None) or [])


def cmd_datagen(args) -> int:
    cfg = _resolve(args)
    if args.workers is not None:
        cfg["datagen"]["workers"] = args.workers
    built = build_objects(cfg)
    stage = OutputStage(args.out)
    try:
        ds = generate_dataset(built["datagen"], built["bounds"], built["params"])
    except EmptyDataset as exc:
        stage.abandon()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    save_dataset(ds, stage.tmp, "dataset")
    stage.commit("datagen", cfg, inputs=[args.config] if args.config else [],
                 extra_meta={"seeds": {"datagen": built["datagen"].rng_seed}})
    print(f"N_init={ds.provenance['n_init']} N={len(ds)} "
          f"acceptance_rate={ds.provenance['acceptance_rate']:.4f}")
    print(f"wrote {os.path.join(args.out, 'dataset.csv')}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    built = build_objects(cfg)
    try:
        ds = load_dataset(args.dataset)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load dataset: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ValueError) else EXIT_IO
    stage = OutputStage(args.out)
    try:
        model = train(ds.X, ds.Y, built["train"], layer_sizes=built["layer_sizes"],
                      norm_stats=ds.norm_stats)
    except ValueError as exc:
        stage.abandon()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        stage.abandon()
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    save_model(model, stage.path("nn_model.json"))
    stage.commit("train", cfg, inputs=[p for p in (args.config, args.dataset) if p],
                 extra_meta={"seeds": {"train": built["train"].rng_seed}})
    meta = model.training_meta
    print(f"train_loss={meta['final_train_loss']:.4e} "
          f"best_val_loss={meta['best_val_loss']:.4e} "
          f"best_epoch={meta['best_epoch']} epochs_run={meta['epochs_run']}")
    print(f"wrote {os.path.join(args.out, 'nn_model.json')}")
    return EXIT_OK


def _load_model_arg(args) -> object | None:
    if args.method != "nn":
        return None
    if not args.model:
        raise argparse.ArgumentTypeError("--model is required with --method nn")
    return load_model(args.model)


def _run_one(cfg, built, method: str, trajectory: str, model) -> SimLog:
    allocator = make_allocator(METHODS[method], built["params"], model=model)
    ctrl = built["control"]
    ctrl.backend = METHODS[method]
    return run_simulation(built["sim_config"](trajectory), ctrl, allocator,
                          built["params"], built["bounds"])


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    built = build_objects(cfg)
    try:
        model = _load_model_arg(args)
    except (argparse.ArgumentTypeError, SchemaMismatch, CorruptFile, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log = _run_one(cfg, built, args.method, args.traj, model)
    stage = OutputStage(args.out)
    log.save(stage.tmp, "simlog")
    stage.commit("simulate", cfg,
                 inputs=[p for p in (args.config, args.model) if p],
                 extra_meta={"seeds": {"sim": log.meta.get("rng_seed")},
                             "aborted": log.aborted})
    _, rms = fbl_error_series(log)
    print(f"method={args.method} traj={args.traj} samples={len(log)} "
          f"relaxed={int(log.relaxed.sum())} fbl_rms={np.array2string(rms, precision=3)}")
    print(f"wrote {os.path.join(args.out, 'simlog.csv')}")
    if log.aborted:
        print("simulation aborted on non-finite state; partial log kept", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    built = build_objects(cfg)
    methods = [m.strip() for m in args.methods.split(",")]
    trajs = [t.strip() for t in args.trajs.split(",")]
    for m in methods:
        if m not in METHODS:
            print(f"error: unknown method {m!r}", file=sys.stderr)
            return EXIT_USAGE
    for t in trajs:
        if t not in TRAJECTORIES:
            print(f"error: unknown trajectory {t!r}", file=sys.stderr)
            return EXIT_USAGE
    model = None
    if "nn" in methods:
        if not args.model:
            print("error: --model is required when benching nn", file=sys.stderr)
            return EXIT_USAGE
        model = load_model(args.model)

    logs = []
    aborted = False
    for method in methods:
        for traj in trajs:
            # warm-up run (short horizon) excluded from the measurements
            warm_cfg = built["sim_config"](traj)
            warm_cfg.duration = 20 * warm_cfg.control_dt
            allocator = make_allocator(METHODS[method], built["params"], model=model)
            run_simulation(warm_cfg, built["control"], allocator, built["params"], built["bounds"])
            for _ in range(args.repeats):
                log = _run_one(cfg, built, method, traj, model)
                aborted |= log.aborted
                logs.append(log)

    summary = timing_summary(logs)
    table = format_timing_table(summary)
    stage = OutputStage(args.out)
    with open(stage.path("timing_table.txt"), "w") as fh:
        fh.write(table + "\n")
    with open(stage.path("timing_summary.json"), "w") as fh:
        json.dump({f"{b}/{t}": v for (b, t), v in summary.items()}, fh, indent=2)
    rows = []
    for log in logs:
        for k in range(len(log)):
            rows.append((log.backend, log.trajectory, log.t[k], log.solve_time[k]))
    with open(stage.path("timings_raw.csv"), "w") as fh:
        fh.write("backend,trajectory,t,solve_time\n")
        for b, t, tt, st in rows:
            fh.write(f"{b},{t},{tt:.6f},{st:.9e}\n")
    stage.commit("bench", cfg, inputs=[p for p in (args.config, args.model) if p])
    print(table)
    print(f"wrote {os.path.join(args.out, 'timing_table.txt')}")
    return EXIT_RUNTIME if aborted else EXIT_OK


def _tracking_rms(log: SimLog) -> np.ndarray:
    err = np.column_stack([
        log.x[:, 0] - log.cmd[:, 0],
        log.x[:, 1] - log.cmd[:, 1],
        log.x[:, 3] - log.cmd[:, 2],
    ])
    return np.sqrt(np.mean(err * err, axis=0))


def cmd_compare(args) -> int:
    if len(args.logs) < 2:
        print("error: need at least two simulation logs to compare", file=sys.stderr)
        return EXIT_USAGE
    try:
        logs = [SimLog.load(p) for p in args.logs]
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ValueError) else EXIT_IO
    trajs = {log.trajectory for log in logs}
    if len(trajs) != 1:
        print(f"error: logs mix trajectories: {sorted(trajs)}", file=sys.stderr)
        return EXIT_USAGE

    stage = OutputStage(args.out)
    lines = [f"trajectory: {logs[0].trajectory}", ""]
    rows = ["backend,track_rms_vx,track_rms_vz,track_rms_theta,"
            "fbl_rms_ax,fbl_rms_az,fbl_rms_alpha,relaxed_samples,aborted"]
    base_track = None
    base_fbl = None
    for log in logs:
        track = _tracking_rms(log)
        _, fbl = fbl_error_series(log)
        nrelax = int(log.relaxed.sum())
        rows.append(f"{log.backend}," + ",".join(f"{v:.9e}" for v in track) + ","
                    + ",".join(f"{v:.9e}" for v in fbl) + f",{nrelax},{int(log.aborted)}")
        lines.append(f"{log.backend}: tracking RMS {np.array2string(track, precision=4)} "
                     f"fbl RMS {np.array2string(fbl, precision=4)} relaxed={nrelax}"
                     + (" ABORTED" if log.aborted else ""))
        if base_track is None:
            base_track, base_fbl = track, fbl
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                tr = np.where(base_track > 0, track / base_track, np.inf)
                fr = np.where(base_fbl > 0, fbl / base_fbl, np.inf)
            lines.append(f"  vs {logs[0].backend}: tracking ratio {np.array2string(tr, precision=3)} "
                         f"fbl ratio {np.array2string(fr, precision=3)}")
    with open(stage.path("comparison.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    with open(stage.path("report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    stage.commit("compare", {"logs": list(args.logs)}, inputs=list(args.logs))
    print("\n".join(lines))
    print(f"wrote {os.path.join(args.out, 'report.txt')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiltalloc",
        description="Control-allocation experiments for a planar bi-tilt tricopter",
    )
    parser.add_argument("--version", action="version", version=f"tiltalloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")

    p = sub.add_parser("datagen", help="generate and label the training dataset")
    common(p)
    p.add_argument("--out", default="runs/datagen", help="output directory")
    p.add_argument("--workers", type=int, help="labeling processes (overrides config/env)")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train the allocation regressor")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset.csv from the datagen step")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run one closed-loop simulation")
    common(p)
    p.add_argument("--method", choices=sorted(METHODS), required=True)
    p.add_argument("--traj", choices=TRAJECTORIES, required=True)
    p.add_argument("--model", help="trained model file (required for nn)")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="timing sweep across methods and trajectories")
    common(p)
    p.add_argument("--methods", default="lca,nlp,nn")
    p.add_argument("--trajs", default="single-step,triple-doublet")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--model", help="trained model file (required when benching nn)")
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="compare two or more simulation logs")
    p.add_argument("logs", nargs="*", help="simlog.csv paths (same trajectory)")
    p.add_argument("--out", default="runs/compare")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None and args.command == "simulate":
        args.out = f"runs/{args.method}-{args.traj}"
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaMismatch, CorruptFile) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
