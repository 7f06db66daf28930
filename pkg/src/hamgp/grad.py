"""Reverse-mode gradients of scalar objectives with respect to registered parameters.

Differentiation itself is delegated to ``torch.autograd``; this module keeps the
bookkeeping: every optimized tensor is registered once under a role, gradients
come back keyed by name, and non-finite values are reported with the operation
that produced them.  A central finite-difference routine is included for
verification with frozen randomness.
"""
from __future__ import annotations

import re
import warnings
from typing import Callable, Iterable

import torch

from .errors import NonFiniteError

ROLES = (
    "whitened_mean",
    "whitened_chol",
    "inducing_inputs",
    "log_lengthscale",
    "log_signal_variance",
    "log_obs_noise",
    "initial_state_mean",
    "initial_state_log_std",
    "shooting_mean",
    "shooting_log_std",
)


class ParameterRegistry:
    """Named leaf tensors with a role each; a tensor may be registered only once."""

    def __init__(self):
        self._params: dict[str, torch.Tensor] = {}
        self._roles: dict[str, str] = {}

    def register(self, name: str, tensor: torch.Tensor, role: str) -> torch.Tensor:
        if role not in ROLES:
            raise ValueError(f"unknown parameter role {role!r}")
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        if any(t is tensor for t in self._params.values()):
            raise ValueError(f"tensor for {name!r} is already registered under another name")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self._params[name] = tensor
        self._roles[name] = role
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def role(self, name: str) -> str:
        return self._roles[name]

    def by_role(self, role: str) -> list[str]:
        return [n for n, r in self._roles.items() if r == role]


def _as_dict(params) -> dict[str, torch.Tensor]:
    if isinstance(params, ParameterRegistry):
        return dict(params.items())
    if isinstance(params, dict):
        return params
    return dict(params)


def _offending_op(objective: Callable, params: dict) -> str:
    """Rerun under anomaly detection to name the backward op producing NaN."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with torch.autograd.detect_anomaly(check_nan=True):
                val = objective()
                torch.autograd.grad(val, list(params.values()), allow_unused=True)
    except RuntimeError as exc:
        m = re.search(r"Function '(\w+)' returned nan", str(exc))
        if m:
            return m.group(1)
        return str(exc).splitlines()[0]
    return "unknown operation"


def gradient(objective: Callable[[], torch.Tensor], params) -> dict[str, torch.Tensor]:
    """Evaluate ``objective()`` and return d objective / d param for every parameter.

    Parameters that do not influence the objective get a zero gradient.
    """
    params = _as_dict(params)
    value = objective()
    if value.numel() != 1:
        raise ValueError("objective must be a scalar")
    if not torch.isfinite(value):
        op = value.grad_fn.name() if value.grad_fn is not None else "objective"
        raise NonFiniteError(f"objective evaluated to {float(value.detach())} (last operation {op})")
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient for {name!r}, produced by {_offending_op(objective, params)}"
            )
        out[name] = g
    return out


@torch.no_grad()
def numerical_gradient(objective: Callable[[], torch.Tensor], params, names: Iterable[str] | None = None,
                       step: float = 1e-5) -> dict[str, torch.Tensor]:
    """Central finite differences on the unconstrained values of ``params``.

    The objective must be deterministic (all randomness frozen by the caller).
    """
    params = _as_dict(params)
    names = list(names) if names is not None else list(params)
    out = {}
    for name in names:
        p = params[name]
        g = torch.zeros_like(p)
        flat = p.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(objective())
            flat[i] = orig - step
            fm = float(objective())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out[name] = g
    return out


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over the whole tensor."""
    denom = max(float(a.norm()), float(b.norm()), floor)
    return float((a - b).norm()) / denom
