"""Task protocols, metrics and the bound-timing benchmark."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ._tensor import as_tensor, to_numpy
from .config import RunConfig
from .odeint import SolverSpec
from .systems import Dataset, DatasetSpec, generate
from .vi.bounds import draw_noise, bound_terms
from .vi.model import HGPModel, Trajectory
from .vi.predict import Prediction, predict, predictive_mnll, rmse
from .vi.train import ModelConfig, TrainConfig, TrainResult, build_model, train, train_batched

MODE_SETTINGS = {
    # kind, observations per shooting state (None = standard bound), energy term
    "hgp_standard": ("hgp", None, False),
    "hgp_shooting": ("hgp", "cfg", False),
    "hgp_energy_shooting": ("hgp", "cfg", True),
    "hgp_batched": ("hgp", None, False),
    "gpode_shooting": ("gpode", "cfg", False),
}


@dataclass
class MetricsRecord:
    state_rmse: float
    state_mnll: float
    energy_rmse: float
    wall_time_s: float = 0.0
    per_trajectory: list[dict] = field(default_factory=list)
    n_failed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    config: RunConfig
    dataset: Dataset
    model: HGPModel
    fit: TrainResult
    prediction: Prediction
    metrics: MetricsRecord
    forecast_seed: str
    cumulative: np.ndarray  # (T, 3): time, cumulative state RMSE, cumulative energy RMSE


def dataset_for(cfg: RunConfig) -> Dataset:
    spec = DatasetSpec(cfg.system, cfg.task, train_length=cfg.train_length,
                       noise_fraction=cfg.noise_fraction, n_train=cfg.K, n_test=cfg.n_test,
                       seed=cfg.seed)
    return generate(spec)


def trajectories(ds: Dataset) -> list[Trajectory]:
    return [Trajectory(ds.train_times, y) for y in ds.train_obs]


def model_config(cfg: RunConfig) -> ModelConfig:
    kind, per_state, energy = MODE_SETTINGS[cfg.mode]
    return ModelConfig(kind=kind, M=cfg.M, S=cfg.S,
                       per_state=cfg.per_state if per_state == "cfg" else None, energy=energy,
                       solver=SolverSpec("rk4", substeps=cfg.substeps))


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(iterations=cfg.iterations, lr=cfg.lr, workers=cfg.workers,
                       window=cfg.window, batch_size=cfg.batch_size)


def fit_model(cfg: RunConfig, ds: Dataset) -> TrainResult:
    data = trajectories(ds)
    torch.manual_seed(cfg.seed)
    if cfg.mode == "hgp_batched":
        return train_batched(data, model_config(cfg), train_config(cfg), cfg.seed)
    model = build_model(data, model_config(cfg), cfg.seed)
    return train(model, train_config(cfg), torch.Generator().manual_seed(cfg.seed))


def prediction_solver(cfg: RunConfig) -> SolverSpec:
    if cfg.pred_method == "rk4":
        return SolverSpec("rk4", substeps=cfg.substeps)
    return SolverSpec("dopri5", rtol=cfg.pred_rtol, atol=cfg.pred_atol)


# metrics -----------------------------------------------------------------


def energy_rmse(ds: Dataset, pred_mean, truth) -> float:
    E_pred = ds.energy(to_numpy(pred_mean))
    E_true = ds.energy(to_numpy(truth))
    return float(np.sqrt(np.mean((E_pred - E_true) ** 2)))


def metrics(pred: Prediction, truth, ds: Dataset, obs_var: float) -> MetricsRecord:
    """Per-trajectory metrics averaged over trajectories.

    truth: (B, T, 2D) standardized clean states on ``pred.times``.
    """
    truth = as_tensor(truth)
    if truth.shape != pred.mean.shape:
        raise ValueError(f"prediction grid {tuple(pred.mean.shape)} does not match truth {tuple(truth.shape)}")
    rows = []
    for b in range(truth.shape[0]):
        rows.append({
            "state_rmse": rmse(pred.mean[b], truth[b]),
            "state_mnll": predictive_mnll(Prediction(pred.times, pred.samples[:, b:b + 1], pred.failed[:, b:b + 1],
                                                     pred.mean[b], pred.var[b]), truth[b], obs_var),
            "energy_rmse": energy_rmse(ds, pred.mean[b], truth[b]),
        })
    avg = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return MetricsRecord(avg["state_rmse"], avg["state_mnll"], avg["energy_rmse"], per_trajectory=rows,
                         n_failed=pred.n_failed)


def cumulative_error(ds: Dataset, times, pred_mean, truth) -> np.ndarray:
    """Running RMSE of state (standardized) and energy (raw) along the horizon,
    averaged over trajectories."""
    pm, tr = to_numpy(pred_mean), to_numpy(truth)
    se = ((pm - tr) ** 2).mean(-1)  # (B, T)
    ee = (ds.energy(pm) - ds.energy(tr)) ** 2
    n = np.arange(1, se.shape[-1] + 1)
    state = np.sqrt(np.cumsum(se, -1) / n).mean(0)
    energy = np.sqrt(np.cumsum(ee, -1) / n).mean(0)
    return np.stack([to_numpy(times), state, energy], axis=-1)


# tasks -------------------------------------------------------------------


def forecast_start(cfg: RunConfig, fit: TrainResult, ds: Dataset):
    """Initial distribution for the task-1 forecast: (mean, std, time, description)."""
    model = fit.model
    if model.state_means is None:
        return as_tensor(ds.train_obs[0, 0]), None, float(ds.train_times[0]), "first observation"
    i = model.first_states[0] + model.plans[0].n_states - 1
    t = float(ds.train_times[model.plans[0].starts[-1]])
    desc = "last shooting state" if model.plans[0].n_states > 1 else "initial state"
    return model.state_means[i].detach(), torch.exp(model.state_log_stds[i]).detach(), t, desc


def run_task1(cfg: RunConfig) -> RunResult:
    if cfg.task != 1:
        raise ValueError("run_task1 needs task = 1")
    t0 = time.perf_counter()
    ds = dataset_for(cfg)
    fit = fit_model(cfg, ds)
    mu, sd, t_start, desc = forecast_start(cfg, fit, ds)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    pred = predict(fit.model.prior, mu, ds.test_times, cfg.n_paths, x0_std=sd, generator=gen,
                   solver=prediction_solver(cfg), t0=t_start)
    rec = metrics(pred, ds.test_clean, ds, float(fit.model.obs_var))
    rec.wall_time_s = time.perf_counter() - t0
    cum = cumulative_error(ds, ds.test_times, pred.mean, ds.test_clean)
    return RunResult(cfg, ds, fit.model, fit, pred, rec,
                     f"{desc} at t={t_start:.4g}, rolled through the test grid", cum)


def run_task2(cfg: RunConfig) -> RunResult:
    if cfg.task != 2:
        raise ValueError("run_task2 needs task = 2")
    t0 = time.perf_counter()
    ds = dataset_for(cfg)
    fit = fit_model(cfg, ds)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    pred = predict(fit.model.prior, as_tensor(ds.test_initial), ds.test_times, cfg.n_paths,
                   generator=gen, solver=prediction_solver(cfg))
    rec = metrics(pred, ds.test_clean, ds, float(fit.model.obs_var))
    rec.wall_time_s = time.perf_counter() - t0
    cum = cumulative_error(ds, ds.test_times, pred.mean, ds.test_clean)
    return RunResult(cfg, ds, fit.model, fit, pred, rec, "clean test initial conditions", cum)


def run(cfg: RunConfig) -> RunResult:
    return run_task1(cfg) if cfg.task == 1 else run_task2(cfg)


# benchmark ---------------------------------------------------------------


def _time(fn, repeats):
    fn()
    best = math.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_elbo(cfg: RunConfig, lengths, repeats: int = 3) -> list[dict]:
    """Wall-clock of one bound evaluation, standard vs shooting, per trajectory length.

    Both bounds share the prior, the data and the random draws; only the
    integration layout differs.
    """
    lengths = list(lengths)
    if len(lengths) < 2:
        raise ValueError("need at least two trajectory lengths")
    rows = []
    for T in lengths:
        spec = DatasetSpec(cfg.system, 1, train_length=T, noise_fraction=cfg.noise_fraction, seed=cfg.seed)
        ds = generate(spec)
        data = trajectories(ds)
        base = ModelConfig(kind="hgp", M=cfg.M, S=cfg.S, solver=SolverSpec("rk4", substeps=cfg.substeps))
        std_model = build_model(data, ModelConfig(**{**base.__dict__, "per_state": None, "energy": False}),
                                cfg.seed)
        sh_model = build_model(data, ModelConfig(**{**base.__dict__, "per_state": cfg.per_state}), cfg.seed)
        sh_model.prior.load_state_dict(std_model.prior.state_dict())
        gen = torch.Generator().manual_seed(cfg.seed)
        n_std, n_sh = draw_noise(std_model, 1, gen), draw_noise(sh_model, 1, gen)
        n_sh.path = n_std.path
        with torch.no_grad():
            t_std = _time(lambda: bound_terms(std_model, noise=n_std), repeats)
            t_sh = _time(lambda: bound_terms(sh_model, noise=n_sh, workers=cfg.workers), repeats)
        rows.append({"length_s": T, "n_obs": len(ds.train_times), "n_states": sh_model.n_states,
                     "workers": cfg.workers, "standard_s": t_std, "shooting_s": t_sh,
                     "speedup": t_std / t_sh})
    return rows


def aggregate(records: list[dict], keys=("state_rmse", "state_mnll", "energy_rmse")) -> dict:
    """Median and interquartile range of each metric across seeds."""
    out = {}
    for k in keys:
        v = np.array([r[k] for r in records], dtype=float)
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        out[k] = {"median": float(med), "iqr": float(q3 - q1), "n": int(v.size)}
    return out

