"""ARD-RBF kernel over phase space and the covariances it induces on the
Hamiltonian vector field.

Phase-space points are laid out as ``x = (q_1..q_D, p_1..p_D)``.  The vector
field of a Hamiltonian ``H`` is ``f = J grad H`` with the Poisson tensor
``J = [[0, I], [-I, 0]]``, so for a GP prior on ``H``

    cov[H(x), f(x')]  = J_{x'} grad_{x'} k(x, x')
    cov[f(x), f(x')]  = J grad_x grad_{x'}^T k(x, x') J^T

The operator on ``cov[H(x), f(x')]`` always acts on the coordinates of the
*second* argument (the one carrying ``f``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ._tensor import DTYPE, as_tensor
from .errors import DimensionError, FactorizationError

DEFAULT_JITTER = 1e-6
JITTER_RETRIES = 3


@dataclass
class KernelHyper:
    """Log-space ARD hyperparameters: one lengthscale per phase-space axis."""

    log_lengthscales: torch.Tensor
    log_variance: torch.Tensor

    @classmethod
    def create(cls, lengthscales, variance=1.0):
        ls = as_tensor(lengthscales)
        if ls.ndim != 1:
            raise DimensionError("lengthscales must be a vector")
        if torch.any(ls <= 0) or variance <= 0:
            raise ValueError("lengthscales and signal variance must be positive")
        return cls(torch.log(ls), torch.log(as_tensor(variance)))

    @property
    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscales)

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)

    @property
    def dim(self) -> int:
        return self.log_lengthscales.shape[-1]

    def detach(self) -> "KernelHyper":
        return KernelHyper(self.log_lengthscales.detach(), self.log_variance.detach())


@dataclass
class SpectralFrequencies:
    """Random Fourier frequencies ``alpha`` (..., S, 2D) and phases ``beta`` (..., S)."""

    alpha: torch.Tensor
    beta: torch.Tensor

    @property
    def n_bases(self) -> int:
        return self.beta.shape[-1]


def _check(x1, x2, hyp):
    d = hyp.dim
    if x1.shape[-1] != d or x2.shape[-1] != d:
        raise DimensionError(
            f"phase-space dimension mismatch: {x1.shape[-1]}, {x2.shape[-1]} vs {d} lengthscales"
        )
    if d % 2:
        raise DimensionError(f"phase space must be even-dimensional, got {d}")


def _pair(x1, x2):
    """Broadcast to (..., n, m, d) differences; remembers which inputs were single points."""
    x1, x2 = as_tensor(x1), as_tensor(x2)
    v1, v2 = x1.ndim == 1, x2.ndim == 1
    if v1:
        x1 = x1.unsqueeze(0)
    if v2:
        x2 = x2.unsqueeze(0)
    return x1.unsqueeze(-2) - x2.unsqueeze(-3), v1, v2


def _squeeze(out, v1, v2, trailing):
    # out has shape (..., n, m, *trailing)
    if v2:
        out = out.squeeze(-1 - trailing)
    if v1:
        out = out.squeeze(-1 - trailing - (0 if v2 else 1))
    return out


def symplectic(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Apply the Poisson tensor along ``dim``: (a, b) -> (b, -a)."""
    q, p = torch.chunk(v, 2, dim=dim)
    return torch.cat([p, -q], dim=dim)


def k_H(x1, x2, hyp: KernelHyper) -> torch.Tensor:
    """sigma_f^2 exp(-0.5 sum_d (x1_d - x2_d)^2 / l_d^2).

    Single points give a scalar, point sets (n, d), (m, d) give an (n, m) Gram.
    """
    x1, x2 = as_tensor(x1), as_tensor(x2)
    _check(x1, x2, hyp)
    diff, v1, v2 = _pair(x1, x2)
    r2 = ((diff / hyp.lengthscales) ** 2).sum(-1)
    return _squeeze(hyp.variance * torch.exp(-0.5 * r2), v1, v2, 0)


def grad_k_first(x1, x2, hyp: KernelHyper) -> torch.Tensor:
    """d k(x1, x2) / d x1, shape (..., n, m, d)."""
    x1, x2 = as_tensor(x1), as_tensor(x2)
    _check(x1, x2, hyp)
    diff, v1, v2 = _pair(x1, x2)
    inv_l2 = torch.exp(-2.0 * hyp.log_lengthscales)
    k = hyp.variance * torch.exp(-0.5 * (diff**2 * inv_l2).sum(-1))
    return _squeeze(-k.unsqueeze(-1) * diff * inv_l2, v1, v2, 1)


def k_Hf(x1, x2, hyp: KernelHyper) -> torch.Tensor:
    """cov[H(x1), f(x2)], shape (..., n, m, 2D)."""
    x1, x2 = as_tensor(x1), as_tensor(x2)
    _check(x1, x2, hyp)
    diff, v1, v2 = _pair(x1, x2)
    inv_l2 = torch.exp(-2.0 * hyp.log_lengthscales)
    k = hyp.variance * torch.exp(-0.5 * (diff**2 * inv_l2).sum(-1))
    # d k / d x2 = k (x1 - x2) / l^2
    dk = k.unsqueeze(-1) * diff * inv_l2
    return _squeeze(symplectic(dk), v1, v2, 1)


def K_f(x1, x2, hyp: KernelHyper) -> torch.Tensor:
    """cov[f(x1), f(x2)], shape (..., n, m, 2D, 2D)."""
    x1, x2 = as_tensor(x1), as_tensor(x2)
    _check(x1, x2, hyp)
    diff, v1, v2 = _pair(x1, x2)
    inv_l2 = torch.exp(-2.0 * hyp.log_lengthscales)
    k = hyp.variance * torch.exp(-0.5 * (diff**2 * inv_l2).sum(-1))
    r = diff * inv_l2
    # d^2 k / d x1_i d x2_j = k (delta_ij / l_i^2 - r_i r_j)
    hess = torch.diag_embed(inv_l2.expand_as(r)) - r.unsqueeze(-1) * r.unsqueeze(-2)
    hess = k[..., None, None] * hess
    out = symplectic(symplectic(hess, dim=-2), dim=-1)
    return _squeeze(out, v1, v2, 2)


def joint_gram(XH, Xf, hyp: KernelHyper) -> torch.Tensor:
    """Covariance of (H(XH), vec f(Xf)) with f values flattened point-major."""
    XH, Xf = as_tensor(XH), as_tensor(Xf)
    n, m, d = XH.shape[0], Xf.shape[0], hyp.dim
    kHH = k_H(XH, XH, hyp)
    kHf = k_Hf(XH, Xf, hyp).reshape(n, m * d)
    kff = K_f(Xf, Xf, hyp).permute(0, 2, 1, 3).reshape(m * d, m * d)
    top = torch.cat([kHH, kHf], dim=1)
    bottom = torch.cat([kHf.T, kff], dim=1)
    return torch.cat([top, bottom], dim=0)


def gram_chol(X, hyp: KernelHyper, jitter: float = DEFAULT_JITTER) -> torch.Tensor:
    """Lower Cholesky factor of k_H(X, X) + jitter * sigma_f^2 * I.

    The jitter is doubled up to three times if the factorization fails.
    """
    X = as_tensor(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionError("gram_chol needs a nonempty (n, d) point set")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    K = k_H(X, X, hyp)
    eye = torch.eye(X.shape[0], dtype=K.dtype)
    scale = hyp.variance
    j = jitter
    for attempt in range(JITTER_RETRIES + 1):
        L, info = torch.linalg.cholesky_ex(K + j * scale * eye)
        if int(info) == 0:
            return L
        j = 2 * j if j > 0 else DEFAULT_JITTER
    raise FactorizationError(
        f"k_H Gram of {X.shape[0]} points not positive definite with jitter up to {j / 2:.3g} "
        f"(leading minor {int(info)} failed, signal variance {float(scale):.4g})"
    )


def sample_spectral(hyp: KernelHyper, S: int, generator: torch.Generator | None = None,
                    batch: tuple = ()) -> SpectralFrequencies:
    """Draw S frequencies from the RBF spectral density N(0, diag(1/l^2)) and
    S phases uniform on [0, 2 pi).  ``batch`` prepends independent draws."""
    if S < 1:
        raise ValueError(f"need at least one basis function, got S={S}")
    d = hyp.dim
    eps = torch.randn(*batch, S, d, generator=generator, dtype=DTYPE)
    beta = 2 * math.pi * torch.rand(*batch, S, generator=generator, dtype=DTYPE)
    return SpectralFrequencies(eps / hyp.lengthscales, beta)


def rff_amplitude(hyp: KernelHyper, S: int) -> torch.Tensor:
    """Scale making sum_i w_i a cos(alpha_i x + beta_i) an unbiased RBF prior draw."""
    return torch.sqrt(2.0 * hyp.variance / S)
