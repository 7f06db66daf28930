"""Command-line entry point: ``hamgp <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
import torch

from .config import MODES, dump_config, load_config
from .systems import load_dataset, save_dataset


def _config(args):
    return load_config(args.config, seed=args.seed, mode=args.mode, workers=args.workers)


def _out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_run(out, res):
    from .vi.checkpoint import save_checkpoint

    cfg = res.config
    doc = {"config": cfg.to_dict(), "metrics": res.metrics.to_dict(), "forecast_seed": res.forecast_seed,
           "train_wall_time_s": res.fit.wall_time_s}
    if res.fit.snapshots:
        doc["snapshots"] = [{"iteration": i, "mnll": m} for i, m in res.fit.snapshots]
    _write_json(os.path.join(out, "metrics.json"), doc)
    _write_csv(os.path.join(out, "trace.csv"), ["iteration", "elbo", "smoothed", "best"],
               [[r.iteration, r.elbo, r.smoothed, r.best] for r in res.fit.trace])
    _write_csv(os.path.join(out, "cumulative_error.csv"), ["t", "state_rmse", "energy_rmse"],
               res.cumulative.tolist())
    _write_predictions(os.path.join(out, "pred_samples.csv"), res.prediction)
    save_checkpoint(os.path.join(out, "checkpoint.npz"), res.model, meta={"config": cfg.to_dict()})
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(dump_config(cfg))


def _write_predictions(path, pred):
    P, B, T, d = pred.samples.shape
    rows = []
    s = pred.samples.numpy()
    t = pred.times.numpy()
    for p in range(P):
        for b in range(B):
            for k in range(T):
                rows.append([p, b, t[k], *s[p, b, k]])
    _write_csv(path, ["sample", "trajectory", "t", *[f"x{i + 1}" for i in range(d)]], rows)


def cmd_generate(args):
    from .experiments import dataset_for

    cfg = _config(args)
    ds = dataset_for(cfg)
    save_dataset(ds, _out(args))
    print(f"wrote {ds.train_obs.shape[0]} training and {ds.test_clean.shape[0]} test trajectories to {args.out}")


def cmd_train(args):
    """Train, forecast and evaluate in one go (a full task run)."""
    from .errors import TrainingDiverged
    from .experiments import run

    cfg = _config(args)
    out = _out(args)
    try:
        res = run(cfg)
    except TrainingDiverged as exc:
        _write_csv(os.path.join(out, "trace.csv"), ["iteration", "elbo", "smoothed", "best"],
                   [[r.iteration, r.elbo, r.smoothed, r.best] for r in exc.trace])
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    _write_run(out, res)
    m = res.metrics
    print(f"state_rmse {m.state_rmse:.4f}  state_mnll {m.state_mnll:.4f}  energy_rmse {m.energy_rmse:.4f}")
    return 0


def cmd_predict(args):
    from .vi.checkpoint import load_checkpoint
    from .vi.predict import predict

    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    x0 = torch.as_tensor(np.array([float(v) for v in args.x0.split(",")]))
    times = torch.linspace(0.0, args.horizon, args.steps + 1, dtype=torch.float64)
    pred = predict(model.prior, x0, times, cfg.n_paths, generator=torch.Generator().manual_seed(cfg.seed))
    out = _out(args)
    _write_predictions(os.path.join(out, "pred_samples.csv"), pred)
    print(f"{pred.samples.shape[0]} samples, {pred.n_failed} failed")
    return 0


def cmd_evaluate(args):
    """Metrics of a checkpoint against the test split of a saved dataset."""
    from .experiments import cumulative_error, metrics
    from .vi.checkpoint import load_checkpoint
    from .vi.predict import predict

    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    ds = load_dataset(args.data)
    pred = predict(model.prior, torch.as_tensor(ds.test_initial), torch.as_tensor(ds.test_times), cfg.n_paths,
                   generator=torch.Generator().manual_seed(cfg.seed))
    rec = metrics(pred, ds.test_clean, ds, float(model.obs_var))
    out = _out(args)
    _write_json(os.path.join(out, "metrics.json"), {"metrics": rec.to_dict()})
    _write_csv(os.path.join(out, "cumulative_error.csv"), ["t", "state_rmse", "energy_rmse"],
               cumulative_error(ds, ds.test_times, pred.mean, ds.test_clean).tolist())
    print(json.dumps({k: v for k, v in rec.to_dict().items() if k != "per_trajectory"}))
    return 0


def cmd_bench(args):
    from .experiments import bench_elbo

    cfg = _config(args)
    rows = bench_elbo(cfg, [float(v) for v in args.lengths.split(",")], repeats=args.repeats)
    out = _out(args)
    _write_json(os.path.join(out, "bench_elbo.json"), rows)
    for r in rows:
        print(f"T={r['length_s']:g}s  standard {r['standard_s']:.4f}s  shooting {r['shooting_s']:.4f}s  "
              f"speedup {r['speedup']:.2f}x")
    return 0


def cmd_aggregate(args):
    from .experiments import aggregate

    records = []
    for path in args.runs:
        with open(path) as fh:
            records.append(json.load(fh)["metrics"])
    summary = aggregate(records)
    _write_json(os.path.join(_out(args), "summary.json"), summary)
    for k, v in summary.items():
        print(f"{k}: median {v['median']:.4g}  IQR {v['iqr']:.4g}  (n={v['n']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hamgp", description="Hamiltonian GP dynamics experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", default="out")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write a dataset").set_defaults(fn=cmd_generate)
    sub.add_parser("train", parents=[common], help="train, forecast and score one run").set_defaults(fn=cmd_train)
    p = sub.add_parser("predict", parents=[common], help="sample forecasts from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--x0", required=True, help="comma-separated standardized initial state")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(fn=cmd_predict)
    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a saved dataset")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="dataset directory from `generate`")
    p.set_defaults(fn=cmd_evaluate)
    p = sub.add_parser("bench-elbo", parents=[common], help="time standard vs shooting bounds")
    p.add_argument("--lengths", default="18,54")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(fn=cmd_bench)
    p = sub.add_parser("aggregate", parents=[common], help="median / IQR over metrics.json files")
    p.add_argument("runs", nargs="+")
    p.set_defaults(fn=cmd_aggregate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args) or 0


if __name__ == "__main__":
    sys.exit(main())
