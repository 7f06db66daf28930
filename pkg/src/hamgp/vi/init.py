"""Data-driven initialization of the variational parameters."""
from __future__ import annotations

import numpy as np
import torch

from .._tensor import DTYPE, as_tensor
from ..kernel import K_f, KernelHyper, gram_chol, k_Hf
from ..odeint import SegmentPlan
from .model import Trajectory

WHITENED_CHOL_SCALE = 1e-2
INDUCING_JITTER = 0.1


def finite_difference_velocities(tr: Trajectory) -> torch.Tensor:
    t = tr.times.numpy()
    Y = tr.Y.numpy()
    if Y.shape[0] < 2:
        return torch.zeros_like(tr.Y)
    return as_tensor(np.gradient(Y, t, axis=0))


def pick_inducing(data: list[Trajectory], M: int, rng: np.random.Generator,
                  jitter: float = INDUCING_JITTER) -> torch.Tensor:
    """M observations drawn without replacement (with replacement if too few), plus small noise."""
    Y = torch.cat([tr.Y for tr in data]).numpy()
    idx = rng.choice(Y.shape[0], size=M, replace=Y.shape[0] < M)
    return as_tensor(Y[idx] + jitter * rng.standard_normal((M, Y.shape[1])))


def _stack(data):
    Y = torch.cat([tr.Y for tr in data])
    V = torch.cat([finite_difference_velocities(tr) for tr in data])
    return Y, V


def _ridge(data, obs_var: float) -> float:
    # finite-difference velocity noise: var(y) * 2 / dt^2 for central differences,
    # halved again by the averaging in np.gradient
    dts = torch.cat([tr.times[1:] - tr.times[:-1] for tr in data if tr.n_obs > 1])
    dt = float(dts.mean()) if dts.numel() else 1.0
    return obs_var / (2 * dt * dt)


def hamiltonian_whitened_mean(data: list[Trajectory], Z, hyp: KernelHyper, obs_var: float = 0.1,
                              max_points: int = 400, jitter: float = 1e-6) -> torch.Tensor:
    """Whitened inducing energies from a GP regression of finite-difference
    velocities onto the Hamiltonian field.

    The conditional mean of H(Z) given noisy field values at the data points is
    mapped into the whitened space with the prior Cholesky factor of K(Z, Z).
    """
    Y, V = _stack(data)
    if Y.shape[0] > max_points:
        sel = torch.as_tensor(np.linspace(0, Y.shape[0] - 1, max_points).round().astype(int))
        Y, V = Y[sel], V[sel]
    n, d = Y.shape
    with torch.no_grad():
        Kff = K_f(Y, Y, hyp).permute(0, 2, 1, 3).reshape(n * d, n * d)
        Kff = Kff + _ridge(data, obs_var) * torch.eye(n * d, dtype=DTYPE)
        Kuf = k_Hf(as_tensor(Z), Y, hyp).reshape(Z.shape[0], n * d)
        L = torch.linalg.cholesky(Kff)
        alpha = torch.cholesky_solve(V.reshape(-1, 1), L)
        m = (Kuf @ alpha).squeeze(-1)
        LK = gram_chol(as_tensor(Z), hyp, jitter)
        return torch.linalg.solve_triangular(LK, m.unsqueeze(-1), upper=False).squeeze(-1)


def shooting_plans(data: list[Trajectory], per_state: int | None) -> list[SegmentPlan]:
    if per_state is None:
        return [SegmentPlan.single(tr.n_obs) for tr in data]
    return [SegmentPlan.every(tr.n_obs, per_state) for tr in data]
