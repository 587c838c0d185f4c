"""Command-line experiment runner.

    dpf <generate|train|filter|evaluate> --config CONFIG [--seed N] [--out DIR]

Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .build import architecture_meta, build_model, make_task
from .checkpoint import CheckpointError, load_into, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config
from .engine import derive_seed
from .filter import FilterOutput, run_filter
from .objectives import LossSpec, train
from .ssm import LinearGaussianSSM, kalman_filter, load_dataset, make_dataset, save_dataset

log = logging.getLogger("dpf")

COMMANDS = ("generate", "train", "filter", "evaluate")


@dataclass
class MetricsRecord:
    dim: int
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    has_truth: bool = True


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def metrics_header(dim: int, has_truth: bool = True) -> list[str]:
    cols = ["t", "ess", "l_t"] + [f"mean_{k}" for k in range(dim)]
    if has_truth:
        cols += [f"truth_{k}" for k in range(dim)]
    return cols + ["rmse"]


def make_record(out: FilterOutput, truth=None, seed: int = 0, wall_time: float = 0.0
                ) -> MetricsRecord:
    means = out.means.detach().numpy()
    dim = means.shape[1]
    rec = MetricsRecord(dim, has_truth=truth is not None)
    sq = []
    for t in range(1, out.T + 1):
        row = {"t": t, "ess": out.ess[t - 1], "l_t": float(out.increments[t - 1]),
               "mean": means[t]}
        if truth is not None:
            err = float(np.sqrt(((means[t] - truth[t]) ** 2).sum()))
            row["truth"] = np.asarray(truth[t])
            row["rmse"] = err
            sq.append(err * err)
        else:
            row["rmse"] = float("nan")
        rec.rows.append(row)
    total = 0.0
    for r in rec.rows:
        total += r["l_t"]
    rec.summary = {
        "log_evidence": total,
        "rmse": float(np.sqrt(np.mean(sq))) if sq else float("nan"),
        "wall_time": wall_time,
        "seed": str(seed),
    }
    return rec


def write_metrics(record: MetricsRecord, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(record.dim, record.has_truth))
        for r in record.rows:
            vals = [str(r["t"]), _fmt(r["ess"]), _fmt(r["l_t"])]
            vals += [_fmt(v) for v in r["mean"]]
            if record.has_truth:
                vals += [_fmt(v) for v in r["truth"]]
            vals.append(_fmt(r["rmse"]))
            w.writerow(vals)


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


def _dataset_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.dataset) if cfg.dataset else Path(cfg.out_dir) / "dataset"


def _checkpoint_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "checkpoint"


def _load(cfg: ExperimentConfig):
    d = _dataset_dir(cfg)
    if not (d / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset at {d}; run 'dpf generate' first")
    ds = load_dataset(d)
    if ds.model_id != cfg.model:
        raise ConfigError(f"dataset model {ds.model_id!r} does not match config model {cfg.model!r}")
    return ds


def _eval_split(ds, cfg):
    train_set, test_set = ds.split(cfg.test_fraction)
    return train_set, (test_set or ds.trajectories)


def _model_with_checkpoint(cfg, ds):
    model = build_model(cfg, ds.grid)
    ck = _checkpoint_dir(cfg)
    if (ck / "manifest.json").is_file():
        load_into(model.store, ck)
    return model


def _filter_runs(cfg, model, trajs):
    def one(i):
        tr = trajs[i]
        seed = derive_seed(cfg.seed, 3, i)
        start = time.perf_counter()
        with torch.no_grad():
            out = run_filter(model.pf, tr, seed)
        return out, seed, time.perf_counter() - start

    idx = range(len(trajs))
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            return list(ex.map(one, idx))
    return [one(i) for i in idx]


def cmd_generate(cfg: ExperimentConfig) -> dict:
    task = make_task(cfg)
    ds = make_dataset(task, cfg.count, cfg.T, cfg.seed)
    path = save_dataset(ds, _dataset_dir(cfg))
    return {"dataset": str(path), "count": len(ds), "T": ds.T}


def cmd_train(cfg: ExperimentConfig) -> dict:
    ds = _load(cfg)
    model = build_model(cfg, ds.grid)
    train_set, val_set = ds.split(cfg.test_fraction)
    meta = architecture_meta(cfg)
    ck = _checkpoint_dir(cfg)

    def on_checkpoint(store, state):
        save_checkpoint(store, ck, {**meta, "epoch": state.epoch, "seed": str(cfg.seed)})

    spec = LossSpec(cfg.loss, cfg.gmm_sigma, cfg.block_len, cfg.block_count, cfg.lambda1,
                    cfg.lambda2, cfg.heading_weight, cfg.ae_weight, cfg.supervised,
                    planar=cfg.model == "planar")
    state = train(model.pf, model.store, train_set, spec, optimizer=cfg.optimizer, lr=cfg.lr,
                  epochs=cfg.epochs, minibatch=cfg.minibatch, seed=cfg.seed,
                  validation=val_set or None, on_checkpoint=on_checkpoint)
    save_checkpoint(model.store, Path(cfg.out_dir) / "checkpoint_last",
                    {**meta, "epoch": state.epoch, "seed": str(cfg.seed)})
    curve = Path(cfg.out_dir) / "training_curve.csv"
    with curve.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_rmse", "val_log_evidence"])
        for h in state.history:
            w.writerow([h["epoch"], _fmt(h["train_loss"]), _fmt(h["rmse"]),
                        _fmt(h["log_evidence"])])
    return {"epochs": state.epoch, "best_epoch": state.best_epoch, "checkpoint": str(ck)}


def cmd_filter(cfg: ExperimentConfig) -> dict:
    ds = _load(cfg)
    model = _model_with_checkpoint(cfg, ds)
    _, trajs = _eval_split(ds, cfg)
    mdir = Path(cfg.out_dir) / "metrics"
    for i, (out, seed, wall) in enumerate(_filter_runs(cfg, model, trajs)):
        rec = make_record(out, trajs[i].states, seed, wall)
        write_metrics(rec, mdir / f"traj_{i:04d}.csv")
        (mdir / f"traj_{i:04d}.summary.json").write_text(
            json.dumps(rec.summary, indent=2, sort_keys=True) + "\n")
    return {"metrics": str(mdir), "runs": len(trajs)}


def cmd_evaluate(cfg: ExperimentConfig) -> dict:
    ds = _load(cfg)
    model = _model_with_checkpoint(cfg, ds)
    _, trajs = _eval_split(ds, cfg)
    runs = []
    for i, (out, seed, _) in enumerate(_filter_runs(cfg, model, trajs)):
        rec = make_record(out, trajs[i].states, seed)
        row = {"index": i, "log_evidence": rec.summary["log_evidence"],
               "rmse": rec.summary["rmse"]}
        if cfg.model == "lgssm":
            truth = LinearGaussianSSM(ds.meta["theta1"], ds.meta["theta2"])
            kf = kalman_filter(truth, trajs[i].observations)
            means = out.means.detach().numpy()[:, 0]
            row["kalman_log_evidence"] = kf.log_evidence
            row["rel_error_log_evidence"] = abs(row["log_evidence"] - kf.log_evidence) / abs(
                kf.log_evidence)
            row["rmse_vs_kalman_means"] = float(np.sqrt(np.mean((means - kf.means) ** 2)))
        runs.append(row)
    summary = {
        "model": cfg.model,
        "n_runs": len(runs),
        "mean_rmse": float(np.mean([r["rmse"] for r in runs])),
        "mean_log_evidence": float(np.mean([r["log_evidence"] for r in runs])),
        "runs": runs,
    }
    if cfg.model == "lgssm":
        summary["mean_kalman_log_evidence"] = float(
            np.mean([r["kalman_log_evidence"] for r in runs]))
        summary["max_rel_error_log_evidence"] = float(
            max(r["rel_error_log_evidence"] for r in runs))
        summary["mean_rmse_vs_kalman_means"] = float(
            np.mean([r["rmse_vs_kalman_means"] for r in runs]))
    path = Path(cfg.out_dir) / "evaluation.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "filter": cmd_filter,
            "evaluate": cmd_evaluate}


def run_experiment(cfg: ExperimentConfig, command: str) -> dict:
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; valid: {', '.join(COMMANDS)}")
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "config.json").write_text(cfg.dumps())
    return HANDLERS[command](cfg)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dpf", description="Differentiable particle filters")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        if overrides:
            cfg = replace(cfg, **overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        result = run_experiment(cfg, args.command)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    summary = {k: v for k, v in result.items() if k != "runs"}
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
