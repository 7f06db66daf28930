"""Non-Hamiltonian baseline: independent sparse GPs on every component of f.

The prior mirrors :class:`~hamgp.vi.model.HamiltonianPrior` (whitened inducing
values, decoupled path samples) so the same bounds, trainer and predictor can
drive it.  Output dimension j has its own inducing inputs and ARD kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._tensor import DTYPE, as_tensor
from .errors import DimensionError, FactorizationError
from .field import DEFAULT_BASES
from .kernel import DEFAULT_JITTER, JITTER_RETRIES
from .vi.families import kl_whitened
from .vi.model import _lower_with_log_diag, _raw_from_lower


def rbf(x, Z, log_ls, log_var):
    """Per-output RBF Gram: x (..., J, n, d), Z (J, M, d) -> (..., J, n, M)."""
    ls = torch.exp(log_ls)[:, None, None, :]
    diff = (x.unsqueeze(-2) - Z.unsqueeze(-3)) / ls
    return torch.exp(log_var)[:, None, None] * torch.exp(-0.5 * (diff**2).sum(-1))


@dataclass
class FieldNoise:
    w: torch.Tensor  # (P, J, S)
    eps_alpha: torch.Tensor  # (P, J, S, d)
    beta: torch.Tensor  # (P, J, S)
    eps_u: torch.Tensor  # (P, J, M)

    @classmethod
    def draw(cls, n_paths, S, M, dim, generator=None):
        shape = (n_paths, dim)
        w = torch.randn(*shape, S, generator=generator, dtype=DTYPE)
        ea = torch.randn(*shape, S, dim, generator=generator, dtype=DTYPE)
        beta = 2 * np.pi * torch.rand(*shape, S, generator=generator, dtype=DTYPE)
        eu = torch.randn(*shape, M, generator=generator, dtype=DTYPE)
        return cls(w, ea, beta, eu)

    @property
    def n_paths(self) -> int:
        return self.w.shape[0]


@dataclass
class FieldSample:
    """Batch of sampled vector fields; ``field`` maps (P, ..., d) -> (P, ..., d)."""

    w: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor
    nu: torch.Tensor  # (P, J, M)
    amp: torch.Tensor  # (J,)
    Z: torch.Tensor
    log_ls: torch.Tensor
    log_var: torch.Tensor
    batched: bool = True

    @property
    def n_paths(self) -> int:
        return self.w.shape[0]

    def field(self, x):
        x = as_tensor(x)
        d = self.Z.shape[-1]
        if x.shape[-1] != d:
            raise DimensionError(f"point dimension {x.shape[-1]} does not match field dimension {d}")
        if not self.batched:
            x = x.unsqueeze(0)
        lead = x.shape[:-1]
        xf = x.reshape(x.shape[0], 1, -1, d)  # (P, 1, n, d)
        proj = xf @ self.alpha.transpose(-1, -2) + self.beta.unsqueeze(-2)  # (P, J, n, S)
        rff = self.amp[:, None] * (torch.cos(proj) @ self.w.unsqueeze(-1)).squeeze(-1)
        kern = (rbf(xf, self.Z, self.log_ls, self.log_var) @ self.nu.unsqueeze(-1)).squeeze(-1)
        out = (rff + kern).transpose(-1, -2).reshape(*lead, d)
        return out if self.batched else out.squeeze(0)

    def fast_field(self):
        """Same values as :meth:`field` for (P, n, d) inputs, constants folded in once."""
        if not self.batched:
            raise ValueError("fast_field expects a batched sample")
        A = self.alpha.transpose(-1, -2)  # (P, J, d, S)
        beta = self.beta.unsqueeze(-2)
        inv_l2 = torch.exp(-2.0 * self.log_ls).unsqueeze(-2)  # (J, 1, d)
        ZsT = (self.Z * inv_l2).transpose(-1, -2)  # (J, d, M)
        z2 = (self.Z * self.Z * inv_l2).sum(-1).unsqueeze(-2)  # (J, 1, M)
        log_var = self.log_var[:, None, None]
        coef = torch.cat([self.amp[:, None] * self.w, self.nu], dim=-1).unsqueeze(-1)  # (P, J, S+M, 1)

        def f(x):
            xj = x.unsqueeze(1)
            proj = xj @ A + beta
            x2 = (xj * xj * inv_l2).sum(-1, keepdim=True)
            r2 = x2 - 2 * (xj @ ZsT) + z2
            feats = torch.cat([torch.cos(proj), torch.exp(log_var - 0.5 * r2)], dim=-1)
            return (feats @ coef).squeeze(-1).transpose(-1, -2)

        return f

    def __getitem__(self, i: int) -> "FieldSample":
        sl = slice(i, i + 1)
        return FieldSample(self.w[sl], self.alpha[sl], self.beta[sl], self.nu[sl], self.amp, self.Z,
                           self.log_ls, self.log_var, batched=False)


def _chol(K, var, jitter):
    eye = torch.eye(K.shape[-1], dtype=K.dtype)
    jit = jitter
    for _ in range(JITTER_RETRIES + 1):
        L, info = torch.linalg.cholesky_ex(K + (jit * var)[:, None, None] * eye)
        if not torch.any(info):
            return L
        jit *= 2
    raise FactorizationError("per-output Gram matrix is not positive definite even with jitter")


class GPODEPrior(nn.Module):
    has_energy = False

    ROLES = {
        "Z": "inducing_inputs",
        "log_lengthscales": "log_lengthscale",
        "log_variance": "log_signal_variance",
        "whitened_mean": "whitened_mean",
        "whitened_chol_raw": "whitened_chol",
    }

    def __init__(self, Z, whitened_mean=None, whitened_chol=None, lengthscales=1.0, variance=1.0,
                 n_bases: int = DEFAULT_BASES, jitter: float = DEFAULT_JITTER):
        super().__init__()
        Z = as_tensor(Z)
        if Z.ndim == 2:
            Z = Z.unsqueeze(0).repeat(Z.shape[1], 1, 1)
        J, M, d = Z.shape
        if J != d:
            raise DimensionError("one inducing set per output dimension is required")
        self.Z = nn.Parameter(Z.clone())
        self.log_lengthscales = nn.Parameter(torch.log(torch.full((J, d), float(lengthscales), dtype=DTYPE)))
        self.log_variance = nn.Parameter(torch.log(torch.full((J,), float(variance), dtype=DTYPE)))
        wm = torch.zeros(J, M, dtype=DTYPE) if whitened_mean is None else as_tensor(whitened_mean)
        self.whitened_mean = nn.Parameter(wm.clone())
        C = torch.eye(M, dtype=DTYPE).repeat(J, 1, 1) if whitened_chol is None else as_tensor(whitened_chol)
        self.whitened_chol_raw = nn.Parameter(_raw_from_lower(C))
        self.n_bases = n_bases
        self.jitter = jitter

    @property
    def dim(self) -> int:
        return self.Z.shape[-1]

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[1]

    def whitened_chol(self):
        return _lower_with_log_diag(self.whitened_chol_raw)

    def chol_K(self):
        K = rbf(self.Z, self.Z, self.log_lengthscales, self.log_variance)
        return _chol(K, torch.exp(self.log_variance), self.jitter)

    def kl(self):
        return kl_whitened(self.whitened_mean, self.whitened_chol()).sum()

    def draw_noise(self, n_paths, generator=None) -> FieldNoise:
        return FieldNoise.draw(n_paths, self.n_bases, self.num_inducing, self.dim, generator)

    def sample(self, n_paths=None, generator=None, noise: FieldNoise | None = None) -> FieldSample:
        P = 1 if n_paths is None else n_paths
        batched = n_paths is not None or noise is not None
        if noise is None:
            noise = self.draw_noise(P, generator)
        S = noise.w.shape[-1]
        L = self.chol_K()
        u_white = self.whitened_mean + (self.whitened_chol() @ noise.eps_u.unsqueeze(-1)).squeeze(-1)
        u = (L @ u_white.unsqueeze(-1)).squeeze(-1)  # (P, J, M)
        alpha = noise.eps_alpha / torch.exp(self.log_lengthscales)[:, None, :]
        amp = torch.sqrt(2 * torch.exp(self.log_variance) / S)
        Phi = amp[:, None, None] * torch.cos(self.Z @ alpha.transpose(-1, -2) + noise.beta.unsqueeze(-2))
        resid = u - (Phi @ noise.w.unsqueeze(-1)).squeeze(-1)
        nu = torch.cholesky_solve(resid.unsqueeze(-1), L).squeeze(-1)
        return FieldSample(noise.w, alpha, noise.beta, nu, amp, self.Z, self.log_lengthscales,
                           self.log_variance, batched=batched)

    def posterior_mean(self, x) -> torch.Tensor:
        """Closed-form sparse-GP mean of f at x (n, d) -> (n, d)."""
        L = self.chol_K()
        m = (L @ self.whitened_mean.unsqueeze(-1))
        alpha = torch.cholesky_solve(m, L)  # (J, M, 1)
        Kx = rbf(as_tensor(x).unsqueeze(0), self.Z, self.log_lengthscales, self.log_variance)
        return (Kx @ alpha).squeeze(-1).T


def gpode_whitened_mean(Y, V, Z, log_ls, log_var, ridge, jitter=DEFAULT_JITTER):
    """Condition each output GP on (Y, V[:, j]) and whiten the inducing means."""
    Y = as_tensor(Y)
    V = as_tensor(V)
    J = Z.shape[0]
    with torch.no_grad():
        Kyy = rbf(Y.unsqueeze(0).expand(J, *Y.shape), Y.unsqueeze(0).expand(J, *Y.shape), log_ls, log_var)
        Kyy = Kyy + ridge * torch.eye(Y.shape[0], dtype=DTYPE)
        Kzy = rbf(Z, Y.unsqueeze(0).expand(J, *Y.shape), log_ls, log_var)
        alpha = torch.cholesky_solve(V.T.unsqueeze(-1), torch.linalg.cholesky(Kyy))
        m = Kzy @ alpha
        LK = _chol(rbf(Z, Z, log_ls, log_var), torch.exp(log_var), jitter)
        return torch.linalg.solve_triangular(LK, m, upper=False).squeeze(-1)
