"""Model containers: the Hamiltonian GP prior and the full variational model
(prior + observation noise + per-trajectory state posteriors)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .._tensor import DTYPE, as_tensor
from ..errors import DimensionError
from ..field import DEFAULT_BASES, InducingSet, PathNoise, draw_path
from ..grad import ParameterRegistry
from ..kernel import KernelHyper, gram_chol, k_H
from ..odeint import SegmentPlan, SolverSpec, TimeGrid, segment_layout
from .families import kl_whitened

SHOOT_VAR = 1e-6
ENERGY_VAR = 2.5e-3


@dataclass
class Trajectory:
    """One observed trajectory in standardized coordinates."""

    times: torch.Tensor
    Y: torch.Tensor

    def __post_init__(self):
        self.times = as_tensor(self.times).reshape(-1)
        self.Y = as_tensor(self.Y)
        if self.Y.ndim != 2 or self.Y.shape[0] != self.times.numel():
            raise DimensionError("Y must be (N, 2D) with one row per time")
        TimeGrid(self.times)

    @property
    def n_obs(self) -> int:
        return self.times.numel()

    @property
    def dim(self) -> int:
        return self.Y.shape[1]


@dataclass
class NoiseModel:
    """Fixed shooting tolerances; the observation variance is learned and lives on the model."""

    shoot_var: float = SHOOT_VAR
    energy_var: float = ENERGY_VAR

    def __post_init__(self):
        if self.shoot_var <= 0 or self.energy_var <= 0:
            raise ValueError("tolerance variances must be positive")


def _lower_with_log_diag(raw: torch.Tensor) -> torch.Tensor:
    return torch.tril(raw, -1) + torch.diag_embed(torch.exp(torch.diagonal(raw, dim1=-2, dim2=-1)))


def _raw_from_lower(C: torch.Tensor) -> torch.Tensor:
    C = as_tensor(C)
    return torch.tril(C, -1) + torch.diag_embed(torch.log(torch.diagonal(C, dim1=-2, dim2=-1)))


class HamiltonianPrior(nn.Module):
    """GP prior on H with whitened inducing energies and decoupled path sampling."""

    has_energy = True

    def __init__(self, Z, whitened_mean=None, whitened_chol=None, lengthscales=1.0, variance=1.0,
                 n_bases: int = DEFAULT_BASES, jitter: float = 1e-6):
        super().__init__()
        Z = as_tensor(Z)
        M, d = Z.shape
        ls = torch.full((d,), float(lengthscales), dtype=DTYPE) if np.isscalar(lengthscales) \
            else as_tensor(lengthscales)
        self.Z = nn.Parameter(Z.clone())
        self.log_lengthscales = nn.Parameter(torch.log(ls))
        self.log_variance = nn.Parameter(torch.log(as_tensor(float(variance))))
        wm = torch.zeros(M, dtype=DTYPE) if whitened_mean is None else as_tensor(whitened_mean)
        self.whitened_mean = nn.Parameter(wm.clone())
        C = torch.eye(M, dtype=DTYPE) if whitened_chol is None else as_tensor(whitened_chol)
        self.whitened_chol_raw = nn.Parameter(_raw_from_lower(C))
        self.n_bases = n_bases
        self.jitter = jitter

    ROLES = {
        "Z": "inducing_inputs",
        "log_lengthscales": "log_lengthscale",
        "log_variance": "log_signal_variance",
        "whitened_mean": "whitened_mean",
        "whitened_chol_raw": "whitened_chol",
    }

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    def hyper(self) -> KernelHyper:
        return KernelHyper(self.log_lengthscales, self.log_variance)

    def whitened_chol(self) -> torch.Tensor:
        return _lower_with_log_diag(self.whitened_chol_raw)

    def inducing(self) -> InducingSet:
        return InducingSet(self.Z, self.whitened_mean, self.whitened_chol())

    def chol_K(self) -> torch.Tensor:
        return gram_chol(self.Z, self.hyper(), self.jitter)

    def kl(self) -> torch.Tensor:
        return kl_whitened(self.whitened_mean, self.whitened_chol())

    def draw_noise(self, n_paths: int, generator=None) -> PathNoise:
        return PathNoise.draw(n_paths, self.n_bases, self.num_inducing, self.dim, generator)

    def sample(self, n_paths: int | None = None, generator=None, noise: PathNoise | None = None):
        if noise is not None and n_paths is None:
            n_paths = noise.n_paths
        return draw_path(self.inducing(), self.hyper(), self.n_bases, generator, n_paths=n_paths,
                         noise=noise, chol_K=self.chol_K())

    def posterior_mean(self, x) -> torch.Tensor:
        """Closed-form sparse-GP mean of H at x (n, 2D)."""
        L = self.chol_K()
        m = L @ self.whitened_mean
        alpha = torch.cholesky_solve(m.unsqueeze(-1), L).squeeze(-1)
        return k_H(as_tensor(x), self.Z, self.hyper()) @ alpha


class HGPModel(nn.Module):
    """Prior, learned observation variance and Gaussian state posteriors.

    Each trajectory carries a :class:`SegmentPlan`; a single-state plan gives
    the standard bound with q(x0), more states give the shooting bound.  Every
    shooting state starts one integration lane.
    """

    def __init__(self, prior: nn.Module, data: list[Trajectory] | None = None,
                 plans: list[SegmentPlan] | None = None, noise: NoiseModel | None = None,
                 obs_var: float = 0.1, state_means=None, state_std: float = 0.1,
                 energy: bool = True, solver: SolverSpec | None = None):
        super().__init__()
        self.prior = prior
        self.noise = noise or NoiseModel()
        self.energy = bool(energy) and getattr(prior, "has_energy", False)
        self.solver = solver or SolverSpec()
        self.log_obs_var = nn.Parameter(torch.log(as_tensor(float(obs_var))))
        self.data = list(data) if data is not None else []
        if not self.data:
            self.plans = []
            self.state_means = None
            self.state_log_stds = None
            return
        self.plans = plans or [SegmentPlan.single(tr.n_obs) for tr in self.data]
        if len(self.plans) != len(self.data):
            raise ValueError("one plan per trajectory")
        self._build_layout()
        if state_means is None:
            state_means = torch.cat([tr.Y[torch.as_tensor(p.starts)] for tr, p in zip(self.data, self.plans)])
        state_means = as_tensor(state_means)
        if state_means.shape != (self.n_states, prior.dim):
            raise DimensionError(f"state means must be ({self.n_states}, {prior.dim})")
        self.state_means = nn.Parameter(state_means.clone())
        self.state_log_stds = nn.Parameter(torch.full_like(state_means, math.log(state_std)))

    def _build_layout(self):
        intervals, obs_lane, obs_local, end_lane, end_local = [], [], [], [], []
        first, offset = [], 0
        for tr, plan in zip(self.data, self.plans):
            lay = segment_layout(TimeGrid(tr.times), plan)
            intervals.append(lay.intervals)
            obs_lane.append(lay.obs_lane + offset)
            obs_local.append(lay.obs_local)
            end_lane.append(lay.end_lane + offset)
            end_local.append(lay.end_local)
            first.append(offset)
            offset += plan.n_states
        n_max = max(iv.shape[1] for iv in intervals)
        self.intervals = torch.cat([torch.nn.functional.pad(iv, (0, n_max - iv.shape[1])) for iv in intervals])
        self.obs_lane = np.concatenate(obs_lane)
        self.obs_local = np.concatenate(obs_local)
        self.end_lane = np.concatenate(end_lane)
        self.end_local = np.concatenate(end_local)
        self.first_states = np.array(first)
        self.later_states = np.setdiff1d(np.arange(offset), self.first_states)
        self.Y_all = torch.cat([tr.Y for tr in self.data])
        self.n_states = offset

    @property
    def shooting(self) -> bool:
        return any(p.n_states > 1 for p in self.plans)

    @property
    def obs_var(self) -> torch.Tensor:
        return torch.exp(self.log_obs_var)

    def registry(self) -> ParameterRegistry:
        reg = ParameterRegistry()
        for name, role in self.prior.ROLES.items():
            reg.register(f"prior.{name}", getattr(self.prior, name), role)
        reg.register("log_obs_var", self.log_obs_var, "log_obs_noise")
        if self.state_means is not None:
            kind = "shooting" if self.shooting else "initial_state"
            reg.register("state_means", self.state_means, f"{kind}_mean")
            reg.register("state_log_stds", self.state_log_stds,
                         "shooting_log_std" if self.shooting else "initial_state_log_std")
        return reg

    def initial_states(self, k: int | None = None):
        """(mean, std) of q(x0) / q(s0), for one trajectory or stacked."""
        idx = self.first_states if k is None else self.first_states[k]
        return self.state_means[idx], torch.exp(self.state_log_stds[idx])

    def trajectory_states(self, k: int):
        """Slice of shooting-state rows belonging to trajectory k."""
        a = self.first_states[k]
        b = a + self.plans[k].n_states
        return slice(a, b)
