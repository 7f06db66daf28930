"""Sampled forecasts and their moment summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .._tensor import as_tensor
from ..field import PREDICTION_PATHS
from ..odeint import SolverSpec, TimeGrid, dopri5, rk4_lanes
from .families import LOG_2PI

PREDICT_SOLVER = SolverSpec(method="dopri5", rtol=1e-6, atol=1e-8)


@dataclass
class Prediction:
    times: torch.Tensor  # (T,)
    samples: torch.Tensor  # (P, B, T, d), NaN rows for failed samples
    failed: torch.Tensor  # (P, B) bool
    mean: torch.Tensor  # (B, T, d)
    var: torch.Tensor  # (B, T, d)

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())


def _summaries(samples, failed):
    ok = (~failed).to(samples.dtype)[..., None, None]  # (P, B, 1, 1)
    n = ok.sum(0).clamp_min(1)
    filled = torch.where(failed[..., None, None], torch.zeros_like(samples), samples)
    mean = (filled * ok).sum(0) / n
    var = (((filled - mean) * ok) ** 2).sum(0) / (n - 1).clamp_min(1)
    return mean, var


@torch.no_grad()
def predict(prior, x0, times, n_paths: int = PREDICTION_PATHS, x0_std=None, generator=None,
            solver: SolverSpec | None = None, t0=None) -> Prediction:
    """Roll out ``n_paths`` sampled systems from x0 (B, d) or (d,) over ``times``.

    With ``x0_std`` the initial states are drawn from N(x0, diag(x0_std^2)),
    one draw per path.  ``t0`` is the time of x0 (defaults to ``times[0]``).
    """
    solver = solver or PREDICT_SOLVER
    x0 = as_tensor(x0)
    if x0.ndim == 1:
        x0 = x0.unsqueeze(0)
    times = as_tensor(times).reshape(-1)
    B, d = x0.shape
    paths = prior.sample(n_paths, generator=generator)
    start = x0.expand(n_paths, B, d)
    if x0_std is not None:
        eps = torch.randn(n_paths, B, d, generator=generator, dtype=x0.dtype)
        start = start + as_tensor(x0_std) * eps
    if times.numel() == 0:
        samples = start.unsqueeze(-2)[..., :0, :]
        failed = torch.zeros(n_paths, B, dtype=torch.bool)
    else:
        TimeGrid(times)
        t0 = times[0] if t0 is None else as_tensor(t0)
        if solver.method == "dopri5":
            samples, failed, _ = dopri5(paths.fast_field(), start, times, solver.rtol, solver.atol, t0=t0,
                                        max_steps=solver.max_steps, min_step=solver.min_step,
                                        raise_on_failure=False)
        else:
            iv = torch.cat([(times[:1] - t0).reshape(1), times[1:] - times[:-1]])
            samples = rk4_lanes(paths.fast_field(), start, iv.expand(B, -1), solver.step, solver.substeps)[..., 1:, :]
            failed = ~torch.isfinite(samples).all(-1).all(-1)
    bad = failed | ~torch.isfinite(samples).all(-1).all(-1)
    mean, var = _summaries(samples, bad)
    return Prediction(times, samples, bad, mean, var)


def gaussian_mnll(y, mean, var) -> float:
    """Mean negative log density of y under independent N(mean, var) per entry."""
    y, mean, var = as_tensor(y), as_tensor(mean), as_tensor(var)
    return float((0.5 * (LOG_2PI + torch.log(var) + (y - mean) ** 2 / var)).mean())


def predictive_mnll(pred: Prediction, truth, obs_var: float) -> float:
    """MNLL of truth under the moment-matched Gaussian (sample variance + obs noise)."""
    return gaussian_mnll(truth, pred.mean, pred.var + obs_var)


def rmse(a, b) -> float:
    a, b = as_tensor(a), as_tensor(b)
    return math.sqrt(float(((a - b) ** 2).mean()))
