"""Pathwise (decoupled) samples of the Hamiltonian and the vector field they induce.

A sample is

    H(x) = sum_i w_i a cos(alpha_i . x + beta_i) + sum_j nu_j k(x, z_j)

with ``a = sqrt(2 sigma_f^2 / S)`` and ``nu = k(Z, Z)^{-1} (u - Phi w)``.  Once the
Fourier draw and ``u`` are fixed the sample is an ordinary deterministic function
that can be evaluated anywhere at linear cost.

Paths are always stored with a leading batch axis of size ``P`` (independent
samples).  An unbatched path (``batched=False``) hides that axis: inputs of
shape (..., 2D) are evaluated as if they had a leading axis of one.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from ._tensor import DTYPE, as_tensor
from .errors import DimensionError
from .kernel import (KernelHyper, SpectralFrequencies, gram_chol, k_H, rff_amplitude,
                     symplectic)

DEFAULT_BASES = 256
PREDICTION_PATHS = 32


@dataclass
class InducingSet:
    """Inducing inputs with a whitened Gaussian q(u).

    With ``L_K = chol(k(Z, Z))`` the unwhitened moments are ``m = L_K m~`` and
    ``Q = L_K C C^T L_K^T`` where ``C`` is ``whitened_chol``.
    """

    Z: torch.Tensor
    whitened_mean: torch.Tensor
    whitened_chol: torch.Tensor

    def __post_init__(self):
        M = self.Z.shape[0]
        if M < 1:
            raise DimensionError("need at least one inducing point")
        if self.whitened_mean.shape != (M,) or self.whitened_chol.shape != (M, M):
            raise DimensionError("whitened moments do not match the number of inducing points")

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    def unwhiten(self, chol_K: torch.Tensor):
        """Return (m, Q) of q(u) given the prior factor ``chol_K``."""
        m = chol_K @ self.whitened_mean
        A = chol_K @ self.whitened_chol
        return m, A @ A.T


@dataclass
class PathNoise:
    """All standard-normal / uniform draws behind a batch of paths.

    Keeping them separate from the parameters lets a caller hold randomness
    fixed while parameters move (common random numbers).
    """

    w: torch.Tensor  # (P, S)
    eps_alpha: torch.Tensor  # (P, S, 2D)
    beta: torch.Tensor  # (P, S)
    eps_u: torch.Tensor  # (P, M)

    @classmethod
    def draw(cls, n_paths: int, S: int, M: int, dim: int, generator=None) -> "PathNoise":
        if S < 1:
            raise ValueError(f"need at least one basis function, got S={S}")
        w = torch.randn(n_paths, S, generator=generator, dtype=DTYPE)
        eps_alpha = torch.randn(n_paths, S, dim, generator=generator, dtype=DTYPE)
        beta = 2 * torch.pi * torch.rand(n_paths, S, generator=generator, dtype=DTYPE)
        eps_u = torch.randn(n_paths, M, generator=generator, dtype=DTYPE)
        return cls(w, eps_alpha, beta, eps_u)

    @property
    def n_paths(self) -> int:
        return self.w.shape[0]


@dataclass
class PathSample:
    w: torch.Tensor  # (P, S)
    basis: SpectralFrequencies  # alpha (P, S, 2D), beta (P, S)
    nu: torch.Tensor  # (P, M)
    u_draw: torch.Tensor  # (P, M)
    hyp: KernelHyper
    Z: torch.Tensor  # (M, 2D)
    batched: bool = True

    @property
    def n_paths(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.Z.shape[-1]

    @property
    def amplitude(self) -> torch.Tensor:
        return rff_amplitude(self.hyp, self.w.shape[-1])

    def hamiltonian(self, x):
        return eval_H(self, x)

    def gradient(self, x):
        return grad_H(self, x)

    def field(self, x):
        return vector_field(self, x)

    def fast_field(self):
        return compiled_field(self)

    def __getitem__(self, idx) -> "PathSample":
        """Select one path (as an unbatched sample) or a sub-batch."""
        sl = slice(idx, idx + 1) if isinstance(idx, int) else idx
        return PathSample(self.w[sl], SpectralFrequencies(self.basis.alpha[sl], self.basis.beta[sl]),
                          self.nu[sl], self.u_draw[sl], self.hyp, self.Z,
                          batched=not isinstance(idx, int))


def draw_path(ind: InducingSet, hyp: KernelHyper, S: int = DEFAULT_BASES, generator=None,
              n_paths: int | None = None, noise: PathNoise | None = None,
              chol_K: torch.Tensor | None = None) -> PathSample:
    """Sample Fourier weights/frequencies from the prior and u from q(u), then
    solve for the kernel coefficients.

    ``n_paths=None`` returns a single unbatched path.  Pass ``noise`` to reuse
    fixed draws and ``chol_K`` to reuse a cached prior factor.
    """
    P = 1 if n_paths is None else n_paths
    M, d = ind.Z.shape
    if d != hyp.dim:
        raise DimensionError(f"inducing inputs have dimension {d}, kernel expects {hyp.dim}")
    if noise is None:
        noise = PathNoise.draw(P, S, M, d, generator)
    elif noise.n_paths != P:
        raise ValueError(f"noise holds {noise.n_paths} paths, asked for {P}")
    S = noise.w.shape[-1]
    if chol_K is None:
        chol_K = gram_chol(ind.Z, hyp)
    u_white = ind.whitened_mean + noise.eps_u @ ind.whitened_chol.T
    u = u_white @ chol_K.T
    basis = SpectralFrequencies(noise.eps_alpha / hyp.lengthscales, noise.beta)
    amp = rff_amplitude(hyp, S)
    # Phi: (P, M, S)
    Phi = amp * torch.cos(ind.Z @ basis.alpha.transpose(-1, -2) + basis.beta.unsqueeze(-2))
    resid = u - (Phi @ noise.w.unsqueeze(-1)).squeeze(-1)
    nu = torch.cholesky_solve(resid.unsqueeze(-1), chol_K).squeeze(-1)
    return PathSample(noise.w, basis, nu, u, hyp, ind.Z, batched=n_paths is not None)


def _flatten(path: PathSample, x):
    x = as_tensor(x)
    if x.shape[-1] != path.dim:
        raise DimensionError(f"point dimension {x.shape[-1]} does not match path dimension {path.dim}")
    if not path.batched:
        x = x.unsqueeze(0)
    elif x.ndim < 2 or x.shape[0] != path.n_paths:
        raise DimensionError("batched paths need inputs with a leading path axis")
    lead = x.shape[:-1]
    return x.reshape(x.shape[0], -1, x.shape[-1]), lead


def _unflatten(path, out, lead):
    out = out.reshape(*lead, *out.shape[2:])
    return out.squeeze(0) if not path.batched else out


def eval_H(path: PathSample, x) -> torch.Tensor:
    xf, lead = _flatten(path, x)
    proj = xf @ path.basis.alpha.transpose(-1, -2) + path.basis.beta.unsqueeze(-2)
    rff = path.amplitude * (torch.cos(proj) @ path.w.unsqueeze(-1)).squeeze(-1)
    kern = (k_H(xf, path.Z, path.hyp) @ path.nu.unsqueeze(-1)).squeeze(-1)
    return _unflatten(path, rff + kern, lead)


def grad_H(path: PathSample, x) -> torch.Tensor:
    xf, lead = _flatten(path, x)
    alpha = path.basis.alpha
    proj = xf @ alpha.transpose(-1, -2) + path.basis.beta.unsqueeze(-2)
    g_rff = -path.amplitude * (torch.sin(proj) * path.w.unsqueeze(-2)) @ alpha
    # sum_j nu_j dk(x, z_j)/dx = -(x sum_j nu_j k_j - sum_j nu_j k_j z_j) / l^2
    kn = k_H(xf, path.Z, path.hyp) * path.nu.unsqueeze(-2)
    g_kern = -(xf * kn.sum(-1, keepdim=True) - kn @ path.Z) * torch.exp(-2.0 * path.hyp.log_lengthscales)
    return _unflatten(path, g_rff + g_kern, lead)


def vector_field(path: PathSample, x) -> torch.Tensor:
    """Hamilton's equations applied to the sample: (dH/dp, -dH/dq)."""
    return symplectic(grad_H(path, x))


def _poisson_matrix(d: int) -> torch.Tensor:
    """Matrix P with v @ P == symplectic(v) for row vectors v."""
    h = d // 2
    P = torch.zeros(d, d, dtype=DTYPE)
    P[h:, :h] = torch.eye(h, dtype=DTYPE)
    P[:h, h:] = -torch.eye(h, dtype=DTYPE)
    return P


def compiled_field(path: PathSample):
    """Vector field of a batched path for inputs (P, n, 2D), with all
    per-path constants folded in once.

    Same values as :func:`vector_field` but far fewer tensor operations per
    call, which is what dominates a long RK4 rollout.
    """
    if not path.batched:
        raise ValueError("compiled_field expects a batched path")
    d = path.dim
    Pm = _poisson_matrix(d)
    inv_l2 = torch.exp(-2.0 * path.hyp.log_lengthscales)
    alpha = path.basis.alpha  # (P, S, d)
    A = alpha.transpose(-1, -2)  # (P, d, S)
    beta = path.basis.beta.unsqueeze(-2)  # (P, 1, S)
    aw = (path.amplitude * path.w).unsqueeze(-2)  # (P, 1, S)
    Zs = path.Z * inv_l2  # (M, d)
    z2 = (path.Z * Zs).sum(-1)  # (M,)
    ZsT = Zs.T
    log_var = path.hyp.log_variance
    nu = path.nu.unsqueeze(-2)  # (P, 1, M)
    # f = [-(sin(proj) * aw), kn] @ [[alpha P], [Zs P]] - (x * inv_l2) P * sum(kn)
    W = torch.cat([-(alpha @ Pm), (Zs @ Pm).expand(alpha.shape[0], -1, -1)], dim=-2)
    D = torch.diag(inv_l2) @ Pm

    def f(x):
        proj = torch.baddbmm(beta, x, A)
        s = torch.sin(proj) * aw
        r2 = (x * x * inv_l2).sum(-1, keepdim=True) - 2 * (x @ ZsT) + z2
        kn = torch.exp(log_var - 0.5 * r2) * nu
        out = torch.bmm(torch.cat([s, kn], dim=-1), W)
        return out - (x @ D) * kn.sum(-1, keepdim=True)

    return f
