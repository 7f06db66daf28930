"""Model construction and stochastic optimization of the bounds."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import FactorizationError, IntegrationError, TrainingDiverged
from ..field import DEFAULT_BASES
from ..gpode import GPODEPrior, gpode_whitened_mean
from ..kernel import KernelHyper
from ..odeint import SolverSpec
from .bounds import bound_terms, elbo_windows
from .init import (WHITENED_CHOL_SCALE, _ridge, _stack, hamiltonian_whitened_mean, pick_inducing,
                   shooting_plans)
from .model import HamiltonianPrior, HGPModel, NoiseModel, Trajectory
from .predict import gaussian_mnll

SMOOTHING = 0.95


@dataclass
class TrainConfig:
    iterations: int = 2500
    lr: float = 3e-3
    n_samples: int = 1
    workers: int = 1
    log_every: int = 0
    # batched (windowed) training
    window: int = 6
    batch_size: int = 16
    eval_every_epochs: int = 10
    eval_paths: int = 8


@dataclass
class ModelConfig:
    kind: str = "hgp"  # or "gpode"
    M: int = 48
    S: int = DEFAULT_BASES
    per_state: int | None = 4  # observations per shooting state; None = standard bound
    energy: bool = True
    obs_var: float = 0.1
    state_std: float = 0.1
    chol_scale: float = WHITENED_CHOL_SCALE
    solver: SolverSpec = field(default_factory=SolverSpec)
    noise: NoiseModel = field(default_factory=NoiseModel)


def build_prior(data: list[Trajectory], cfg: ModelConfig, rng: np.random.Generator):
    d = data[0].dim
    eye = torch.eye(cfg.M, dtype=torch.float64) * cfg.chol_scale
    if cfg.kind == "hgp":
        Z = pick_inducing(data, cfg.M, rng)
        hyp = KernelHyper.create(torch.ones(d), 1.0)
        wm = hamiltonian_whitened_mean(data, Z, hyp, cfg.obs_var)
        return HamiltonianPrior(Z, wm, eye, n_bases=cfg.S)
    if cfg.kind == "gpode":
        Z = torch.stack([pick_inducing(data, cfg.M, rng) for _ in range(d)])
        prior = GPODEPrior(Z, whitened_chol=eye.repeat(d, 1, 1), n_bases=cfg.S)
        Y, V = _stack(data)
        wm = gpode_whitened_mean(Y, V, prior.Z.detach(), prior.log_lengthscales.detach(),
                                 prior.log_variance.detach(), _ridge(data, cfg.obs_var))
        with torch.no_grad():
            prior.whitened_mean.copy_(wm)
        return prior
    raise ValueError(f"unknown prior kind {cfg.kind!r}")


def build_model(data: list[Trajectory], cfg: ModelConfig, seed: int = 0) -> HGPModel:
    for tr in data:
        if tr.n_obs < 2:
            raise ValueError("every trajectory needs at least 2 observations")
    rng = np.random.default_rng(seed)
    prior = build_prior(data, cfg, rng)
    return HGPModel(prior, data, shooting_plans(data, cfg.per_state), cfg.noise, cfg.obs_var,
                    state_std=cfg.state_std, energy=cfg.energy, solver=cfg.solver)


@dataclass
class TraceRow:
    iteration: int
    elbo: float
    smoothed: float
    best: float


@dataclass
class TrainResult:
    model: HGPModel
    trace: list[TraceRow]
    wall_time_s: float = 0.0
    snapshots: list[tuple[int, float]] = field(default_factory=list)


def _record(trace, it, value):
    prev = trace[-1] if trace else None
    sm = value if prev is None else SMOOTHING * prev.smoothed + (1 - SMOOTHING) * value
    best = sm if prev is None else max(prev.best, sm)
    trace.append(TraceRow(it, value, sm, best))


def _step(opt, model, objective, trace, it):
    opt.zero_grad()
    try:
        value = objective()
    except (FactorizationError, IntegrationError) as exc:
        raise TrainingDiverged(f"iteration {it}: {exc}", trace) from exc
    if not torch.isfinite(value):
        raise TrainingDiverged(f"iteration {it}: bound evaluated to {float(value)}", trace)
    (-value).backward()
    for p in model.parameters():
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise TrainingDiverged(f"iteration {it}: non-finite gradient", trace)
    opt.step()
    _record(trace, it, float(value.detach()))


def train(model: HGPModel, cfg: TrainConfig | None = None, generator: torch.Generator | None = None,
          callback=None) -> TrainResult:
    """Adam on the negative bound; one fresh MC draw of (w, basis, u, states) per step."""
    import time

    cfg = cfg or TrainConfig()
    t0 = time.perf_counter()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    trace: list[TraceRow] = []
    for it in range(cfg.iterations):
        _step(opt, model, lambda: bound_terms(model, cfg.n_samples, generator,
                                              workers=cfg.workers).total, trace, it)
        if callback is not None:
            callback(it, trace[-1])
        if cfg.log_every and it % cfg.log_every == 0:
            r = trace[-1]
            print(f"iter {it:5d}  elbo {r.elbo:12.3f}  smoothed {r.smoothed:12.3f}", flush=True)
    return TrainResult(model, trace, time.perf_counter() - t0)


def fit(data: list[Trajectory], model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
        seed: int = 0) -> TrainResult:
    model_cfg = model_cfg or ModelConfig()
    torch.manual_seed(seed)
    model = build_model(data, model_cfg, seed)
    gen = torch.Generator().manual_seed(seed)
    return train(model, train_cfg, gen)


# windowed training -------------------------------------------------------


def make_windows(tr: Trajectory, window: int):
    """Sub-sequences of ``window`` points with stride 1: N - window of them
    (a single window when it spans the whole trajectory)."""
    if window < 2:
        raise ValueError("window length must be at least 2")
    N = tr.n_obs
    if window > N:
        raise ValueError(f"window {window} longer than trajectory ({N} points)")
    n = max(N - window, 1)
    idx = torch.arange(n)[:, None] + torch.arange(window)[None, :]
    return tr.Y[idx], tr.times[idx]


@torch.no_grad()
def trajectory_mnll(model: HGPModel, data: list[Trajectory], n_paths: int, generator=None) -> float:
    """Full-trajectory MNLL of the training data, rolled out from each first observation."""
    from .predict import predict

    vals = []
    for tr in data:
        pred = predict(model.prior, tr.Y[0], tr.times, n_paths=n_paths, generator=generator,
                       solver=model.solver)
        vals.append(gaussian_mnll(tr.Y, pred.mean[0], pred.var[0] + model.obs_var))
    return float(np.mean(vals))


def train_batched(data: list[Trajectory], model_cfg: ModelConfig | None = None,
                  train_cfg: TrainConfig | None = None, seed: int = 0) -> TrainResult:
    """Minibatches of fixed-length windows; the first value of each window is
    its initial condition.  Keeps the snapshot with the lowest full-trajectory MNLL."""
    import time

    model_cfg = model_cfg or ModelConfig()
    cfg = train_cfg or TrainConfig()
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    prior = build_prior(data, model_cfg, rng)
    model = HGPModel(prior, None, noise=model_cfg.noise, obs_var=model_cfg.obs_var,
                     energy=False, solver=model_cfg.solver)
    wins, wtimes = zip(*(make_windows(tr, cfg.window) for tr in data))
    wins = torch.cat(wins)
    wtimes = torch.cat(wtimes)
    rel = wtimes - wtimes[:, :1]
    n_win = wins.shape[0]
    batch = min(cfg.batch_size, n_win)
    steps_per_epoch = math.ceil(n_win / batch)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    trace: list[TraceRow] = []
    snapshots: list[tuple[int, float]] = []
    best_state, best_mnll = copy.deepcopy(model.state_dict()), math.inf
    it = 0
    epoch = 0
    while it < cfg.iterations:
        order = torch.as_tensor(rng.permutation(n_win))
        for b in range(steps_per_epoch):
            if it >= cfg.iterations:
                break
            sel = order[b * batch:(b + 1) * batch]
            # windows share a time grid only when sampling is uniform; group by grid otherwise
            grid = rel[sel[0]]
            same = torch.all(torch.isclose(rel[sel], grid), dim=1)
            sel = sel[same]
            scale = n_win / sel.numel()
            _step(opt, model, lambda: elbo_windows(model, wins[sel], grid, scale, cfg.n_samples, gen),
                  trace, it)
            it += 1
        epoch += 1
        if epoch % cfg.eval_every_epochs == 0 or it >= cfg.iterations:
            m = trajectory_mnll(model, data, cfg.eval_paths, gen)
            snapshots.append((it, m))
            if m < best_mnll:
                best_mnll = m
                best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return TrainResult(model, trace, time.perf_counter() - t_start, snapshots)


def best_snapshot(snapshots: list[tuple[int, float]]) -> tuple[int, float]:
    if not snapshots:
        raise ValueError("no snapshots recorded")
    return min(snapshots, key=lambda s: s[1])
