import json
import math
import os

import numpy as np
import pytest
import torch

from hamgp.cli import main
from hamgp.config import RunConfig, dump_config, parse_config
from hamgp.experiments import aggregate, cumulative_error, energy_rmse, metrics
from hamgp.systems import DatasetSpec, generate
from hamgp.vi.predict import Prediction

TINY = ["--seed", "0"]


def tiny_config(tmp_path, **extra):
    cfg = {"task": 1, "system": "fp", "M": 8, "S": 16, "iterations": 3, "n_paths": 4, "substeps": 2,
           "pred_method": "rk4", **extra}
    path = tmp_path / "run.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in cfg.items()))
    return str(path)


def test_config_parsing_and_defaults():
    cfg = parse_config("task = 2  # comment\nsystem = sp\n\nM = none\n")
    assert cfg.M == 128 and cfg.K == 8 and cfg.S == 256
    assert parse_config("").M == 48 and parse_config("K = 5").K == 1
    assert parse_config("seed = 3", seed=7).seed == 7
    assert parse_config(dump_config(cfg)) == cfg
    with pytest.raises(KeyError):
        parse_config("bogus = 1")
    with pytest.raises(ValueError):
        parse_config("mode = nope")
    with pytest.raises(ValueError):
        parse_config("just text")


def _pred(mean, var=None):
    mean = torch.as_tensor(mean, dtype=torch.float64)
    var = torch.zeros_like(mean) if var is None else torch.as_tensor(var, dtype=torch.float64)
    samples = mean.unsqueeze(0).expand(2, *mean.shape)
    return Prediction(torch.arange(mean.shape[1], dtype=torch.float64), samples,
                      torch.zeros(2, mean.shape[0], dtype=torch.bool), mean, var)


def test_metric_oracles():
    ds = generate(DatasetSpec("fp", 1, seed=0))
    truth = torch.as_tensor(ds.test_clean[:, :3])
    perfect = metrics(_pred(truth), truth, ds, 1e-2)
    assert perfect.state_rmse == 0.0 and perfect.energy_rmse == 0.0
    assert perfect.state_mnll == pytest.approx(0.5 * math.log(2 * math.pi * 1e-2))
    # three points, one coordinate off by 1, 2 and 3 on a 2-d state
    off = truth.clone()
    off[0, :, 0] += torch.tensor([1.0, 2.0, 3.0])
    rec = metrics(_pred(off), truth, ds, 1.0)
    assert rec.state_rmse == pytest.approx(math.sqrt((1 + 4 + 9) / 6))
    direct = np.mean([0.5 * math.log(2 * math.pi) + 0.5 * float(e) ** 2 for e in (off - truth).reshape(-1)])
    assert rec.state_mnll == pytest.approx(direct)
    raw = ds.energy(off.numpy()) - ds.energy(truth.numpy())
    assert energy_rmse(ds, off[0], truth[0]) == pytest.approx(float(np.sqrt(np.mean(raw**2))))
    with pytest.raises(ValueError):
        metrics(_pred(off[:, :2]), truth, ds, 1.0)


def test_cumulative_error_ends_at_full_rmse():
    ds = generate(DatasetSpec("fp", 1, seed=0))
    truth = ds.test_clean[:, :5]
    pred = truth + 0.1
    cum = cumulative_error(ds, ds.test_times[:5], pred, truth)
    assert cum.shape == (5, 3)
    assert np.allclose(cum[:, 1], 0.1)


def test_aggregate_median_and_iqr():
    recs = [{"state_rmse": v, "state_mnll": 0.0, "energy_rmse": 1.0} for v in (1.0, 2.0, 3.0, 4.0)]
    s = aggregate(recs)
    assert s["state_rmse"] == {"median": 2.5, "iqr": 1.5, "n": 4}


def test_train_run_writes_outputs_and_is_deterministic(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["train", "--config", cfg, "--out", a, *TINY]) == 0
    assert main(["train", "--config", cfg, "--out", b, *TINY]) == 0
    for name in ("metrics.json", "trace.csv", "pred_samples.csv", "cumulative_error.csv", "checkpoint.npz",
                 "config.txt"):
        assert os.path.exists(os.path.join(a, name)), name
    ma = json.load(open(os.path.join(a, "metrics.json")))
    mb = json.load(open(os.path.join(b, "metrics.json")))
    assert ma["metrics"]["state_rmse"] == mb["metrics"]["state_rmse"]
    assert open(os.path.join(a, "trace.csv")).read() == open(os.path.join(b, "trace.csv")).read()
    assert len(open(os.path.join(a, "trace.csv")).read().splitlines()) == 4

    assert main(["predict", os.path.join(a, "checkpoint.npz"), "--config", cfg, "--x0", "0.1,0.2",
                 "--horizon", "1", "--steps", "5", "--out", str(tmp_path / "p")]) == 0
    rows = open(tmp_path / "p" / "pred_samples.csv").read().splitlines()
    assert rows[0] == "sample,trajectory,t,x1,x2" and len(rows) == 1 + 4 * 6

    assert main(["aggregate", os.path.join(a, "metrics.json"), os.path.join(b, "metrics.json"),
                 "--out", str(tmp_path / "agg")]) == 0
    assert "median" in capsys.readouterr().out


def test_generate_and_evaluate(tmp_path):
    cfg = tiny_config(tmp_path, n_test=2)
    data = str(tmp_path / "data")
    assert main(["generate", "--config", cfg, "--out", data]) == 0
    assert os.path.exists(os.path.join(data, "manifest.txt"))
    run = str(tmp_path / "run")
    assert main(["train", "--config", cfg, "--out", run]) == 0
    assert main(["evaluate", os.path.join(run, "checkpoint.npz"), "--data", data, "--config", cfg,
                 "--out", str(tmp_path / "ev")]) == 0
    rec = json.load(open(tmp_path / "ev" / "metrics.json"))["metrics"]
    assert math.isfinite(rec["state_rmse"])


def test_bench_command(tmp_path):
    cfg = tiny_config(tmp_path, system="hh", substeps=1)
    assert main(["bench-elbo", "--config", cfg, "--lengths", "2,4", "--repeats", "1",
                 "--out", str(tmp_path / "b")]) == 0
    rows = json.load(open(tmp_path / "b" / "bench_elbo.json"))
    assert [r["length_s"] for r in rows] == [2.0, 4.0] and all(r["speedup"] > 0 for r in rows)


def test_bad_arguments():
    with pytest.raises(SystemExit):
        main(["train", "--mode", "nope"])
    with pytest.raises(SystemExit):
        main([])
