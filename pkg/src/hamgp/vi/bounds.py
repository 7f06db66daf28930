"""Monte-Carlo evidence lower bounds.

All bounds share one code path: every (shooting) state starts an integration
lane, lanes from all trajectories are rolled out together, and observations /
segment ends are gathered from the lane-major result.  The standard bound is
the special case of one state per trajectory.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .._tensor import as_tensor
from ..errors import DimensionError
from ..field import PathNoise
from ..odeint import SolverSpec, rk4_lanes, run_lanes
from .families import entropy_diag, gaussian_loglik, kl_diag_standard
from .model import HGPModel


@dataclass
class BoundNoise:
    """Frozen randomness for one bound evaluation (common random numbers)."""

    path: PathNoise
    states: torch.Tensor | None  # (P, n_states, 2D)

    @property
    def n_samples(self) -> int:
        return self.path.n_paths


@dataclass
class BoundTerms:
    loglik: torch.Tensor
    tolerance: torch.Tensor
    entropy: torch.Tensor
    kl_states: torch.Tensor
    kl_u: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        # shooting states beyond the first enter through their entropy, with a plus sign
        return self.loglik + self.tolerance + self.entropy - self.kl_states - self.kl_u

    def as_dict(self) -> dict[str, float]:
        d = {k: float(getattr(self, k)) for k in ("loglik", "tolerance", "entropy", "kl_states", "kl_u")}
        d["elbo"] = float(self.total)
        return d


def draw_noise(model: HGPModel, n_samples: int = 1, generator=None) -> BoundNoise:
    path = model.prior.draw_noise(n_samples, generator)
    states = None
    if model.state_means is not None:
        states = torch.randn(n_samples, *model.state_means.shape, generator=generator,
                             dtype=model.state_means.dtype)
    return BoundNoise(path, states)


def bound_terms(model: HGPModel, n_samples: int = 1, generator=None, noise: BoundNoise | None = None,
                workers: int = 1) -> BoundTerms:
    if model.state_means is None:
        raise ValueError("model has no trajectories attached")
    noise = noise or draw_noise(model, n_samples, generator)
    paths = model.prior.sample(noise=noise.path)
    std = torch.exp(model.state_log_stds)
    s = model.state_means + std * noise.states  # (P, n_states, d)
    traj = run_lanes(paths.fast_field(), s, model.intervals, model.solver, workers)
    pred = traj[:, model.obs_lane, model.obs_local]
    obs_var = model.obs_var
    loglik = gaussian_loglik(model.Y_all, pred, obs_var).sum((-2, -1)).mean(0)

    tolerance = loglik.new_zeros(())
    if len(model.later_states):
        ends = traj[:, model.end_lane, model.end_local]
        nxt = s[:, model.later_states]
        tol = gaussian_loglik(nxt, ends, torch.as_tensor(model.noise.shoot_var, dtype=s.dtype)).sum(-1)
        if model.energy:
            ev = torch.as_tensor(model.noise.energy_var, dtype=s.dtype)
            tol = tol + gaussian_loglik(paths.hamiltonian(nxt), paths.hamiltonian(ends), ev)
        tolerance = tol.sum(-1).mean(0)

    later = model.state_log_stds[model.later_states]
    entropy = entropy_diag(later).sum() if len(model.later_states) else loglik.new_zeros(())
    first = model.first_states
    kl_states = kl_diag_standard(model.state_means[first], model.state_log_stds[first]).sum()
    return BoundTerms(loglik, tolerance, entropy, kl_states, model.prior.kl())


def elbo(model: HGPModel, n_samples: int = 1, generator=None, noise: BoundNoise | None = None,
         workers: int = 1) -> torch.Tensor:
    return bound_terms(model, n_samples, generator, noise, workers).total


def elbo_standard(model: HGPModel, n_samples: int = 1, generator=None, noise=None) -> torch.Tensor:
    """Bound with a single initial state per trajectory and no shooting terms."""
    if model.shooting:
        raise ValueError("model carries a shooting plan; use elbo_shooting")
    return elbo(model, n_samples, generator, noise)


def elbo_shooting(model: HGPModel, n_samples: int = 1, generator=None, noise=None,
                  workers: int = 1) -> torch.Tensor:
    return elbo(model, n_samples, generator, noise, workers)


def elbo_multi(model: HGPModel, n_samples: int = 1, generator=None, noise=None,
               workers: int = 1) -> torch.Tensor:
    """Bound summed over all attached trajectories; they share one prior sample per draw."""
    return elbo(model, n_samples, generator, noise, workers)


def elbo_windows(model: HGPModel, windows, times, scale: float = 1.0, n_samples: int = 1,
                 generator=None, noise: PathNoise | None = None, solver: SolverSpec | None = None):
    """Bound for a minibatch of short windows whose first point is taken as the initial state.

    ``windows`` is (B, W, 2D) on the relative time grid ``times`` (W,).  The
    likelihood covers points 1..W-1 and is multiplied by ``scale``.
    """
    windows = as_tensor(windows)
    times = as_tensor(times)
    if windows.ndim != 3 or windows.shape[1] != times.numel():
        raise DimensionError("windows must be (B, W, 2D) matching the time grid")
    solver = solver or model.solver
    B, W, d = windows.shape
    noise = noise or model.prior.draw_noise(n_samples, generator)
    paths = model.prior.sample(noise=noise)
    x0 = windows[:, 0].expand(noise.n_paths, B, d)
    intervals = (times[1:] - times[:-1]).expand(B, W - 1)
    traj = rk4_lanes(paths.fast_field(), x0, intervals, step=solver.step, substeps=solver.substeps)
    ll = gaussian_loglik(windows[:, 1:], traj[:, :, 1:], model.obs_var).sum((-3, -2, -1)).mean(0)
    return scale * ll - model.prior.kl()
