"""Gaussian variational families and their closed-form divergence terms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .._tensor import as_tensor

LOG_2PI = math.log(2 * math.pi)


@dataclass
class Gaussian:
    """N(mean, L L^T) with ``scale_tril`` the lower Cholesky factor."""

    mean: torch.Tensor
    scale_tril: torch.Tensor

    @classmethod
    def diag(cls, mean, std) -> "Gaussian":
        std = as_tensor(std)
        if torch.any(std <= 0):
            raise ValueError("standard deviations must be positive")
        return cls(as_tensor(mean), torch.diag_embed(std))

    @classmethod
    def full(cls, mean, cov) -> "Gaussian":
        return cls(as_tensor(mean), torch.linalg.cholesky(as_tensor(cov)))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def cov(self) -> torch.Tensor:
        return self.scale_tril @ self.scale_tril.transpose(-1, -2)

    def log_prob(self, x) -> torch.Tensor:
        diff = (as_tensor(x) - self.mean).unsqueeze(-1)
        z = torch.linalg.solve_triangular(self.scale_tril, diff, upper=False).squeeze(-1)
        logdet = torch.log(torch.diagonal(self.scale_tril, dim1=-2, dim2=-1).abs()).sum(-1)
        return -0.5 * (z**2).sum(-1) - logdet - 0.5 * self.dim * LOG_2PI

    def sample(self, n, generator=None) -> torch.Tensor:
        eps = torch.randn(n, self.dim, generator=generator, dtype=self.mean.dtype)
        return self.mean + eps @ self.scale_tril.transpose(-1, -2)


def kl_gaussian(q: Gaussian, p: Gaussian) -> torch.Tensor:
    """KL[q || p] in closed form."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    p_diag = torch.diagonal(p.scale_tril, dim1=-2, dim2=-1)
    if torch.any(p_diag == 0):
        raise ValueError("p has a singular covariance")
    A = torch.linalg.solve_triangular(p.scale_tril, q.scale_tril, upper=False)
    delta = torch.linalg.solve_triangular(p.scale_tril, (p.mean - q.mean).unsqueeze(-1),
                                          upper=False).squeeze(-1)
    q_diag = torch.diagonal(q.scale_tril, dim1=-2, dim2=-1)
    logdet = 2 * (torch.log(p_diag.abs()).sum(-1) - torch.log(q_diag.abs()).sum(-1))
    return 0.5 * ((A**2).sum((-2, -1)) + (delta**2).sum(-1) - q.dim + logdet)


def entropy_gaussian(q: Gaussian) -> torch.Tensor:
    diag = torch.diagonal(q.scale_tril, dim1=-2, dim2=-1)
    if torch.any(diag == 0):
        raise ValueError("entropy needs a positive-definite covariance")
    return 0.5 * q.dim * (1 + LOG_2PI) + torch.log(diag.abs()).sum(-1)


# vectorized forms for diagonal posteriors over many states


def entropy_diag(log_std: torch.Tensor) -> torch.Tensor:
    """Sum of entropies of independent N(., diag(exp(2 log_std))) rows; (..., d) -> (...)."""
    d = log_std.shape[-1]
    return 0.5 * d * (1 + LOG_2PI) + log_std.sum(-1)


def kl_diag_standard(mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """KL[N(mean, diag(std^2)) || N(0, I)] per row."""
    return 0.5 * (torch.exp(2 * log_std) + mean**2 - 1 - 2 * log_std).sum(-1)


def kl_whitened(mean: torch.Tensor, chol: torch.Tensor) -> torch.Tensor:
    """KL[N(m~, C C^T) || N(0, I)]; exactly zero at m~ = 0, C = I."""
    M = mean.shape[-1]
    diag = torch.diagonal(chol, dim1=-2, dim2=-1)
    return 0.5 * ((chol**2).sum((-2, -1)) + (mean**2).sum(-1) - M
                  - 2 * torch.log(diag.abs()).sum(-1))


def gaussian_loglik(y, mean, var) -> torch.Tensor:
    """Elementwise log N(y | mean, var)."""
    return -0.5 * (LOG_2PI + torch.log(var) + (y - mean) ** 2 / var)
