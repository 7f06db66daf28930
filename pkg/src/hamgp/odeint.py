"""ODE integration for autonomous phase-space vector fields.

Two solvers are provided: fixed-step classical RK4, used for training so the
discrete solution is differentiated exactly, and explicit Dormand-Prince 4(5)
with per-lane step-size control, used for prediction and data generation.

Everything works on *lanes*: the second-to-last axis of the state tensor
indexes independent initial-value problems that are advanced in lockstep.  A
leading axis in front of the lanes (e.g. independent function samples) is passed
through untouched, so the field callable sees tensors of shape (..., lanes, 2D).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from ._tensor import DTYPE, as_tensor
from .errors import IntegrationError

DEFAULT_SUBSTEPS = 10


@dataclass
class TimeGrid:
    times: torch.Tensor

    def __post_init__(self):
        self.times = as_tensor(self.times).reshape(-1)
        if self.times.numel() < 1:
            raise ValueError("time grid is empty")
        if not torch.all(torch.isfinite(self.times)):
            raise ValueError("time grid has non-finite entries")
        if torch.any(self.times[1:] <= self.times[:-1]):
            raise ValueError("time grid must be strictly increasing")

    def __len__(self):
        return self.times.numel()

    @property
    def spacing(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(torch.min(self.times[1:] - self.times[:-1]))


@dataclass
class SolverSpec:
    """``{method: rk4, step | substeps}`` or ``{method: dopri5, rtol, atol}``.

    For RK4, ``step`` caps the step length; otherwise every grid interval is
    cut into ``substeps`` equal steps.
    """

    method: str = "rk4"
    step: float | None = None
    substeps: int = DEFAULT_SUBSTEPS
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 100_000
    min_step: float = 1e-12

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver {self.method!r}")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")

    @property
    def tolerance(self) -> float:
        """Nominal accuracy, used by callers that compare against solver error."""
        if self.method == "dopri5":
            return max(self.rtol, self.atol)
        return 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "SolverSpec":
        keys = {"method", "step", "substeps", "rtol", "atol", "max_steps", "min_step"}
        return cls(**{k: v for k, v in d.items() if k in keys})


@dataclass
class SegmentPlan:
    """Shooting layout over an observation grid.

    ``starts[l]`` is the grid index of shooting time ``t_l``; observation ``i``
    belongs to segment ``obs_map[i]``, the last shooting time at or before it.
    """

    starts: np.ndarray
    n_obs: int
    obs_map: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=int).reshape(-1)
        if self.starts.size < 1 or self.starts[0] != 0:
            raise ValueError("the first shooting time must coincide with the first observation")
        if np.any(np.diff(self.starts) <= 0) or self.starts[-1] >= self.n_obs:
            raise ValueError("shooting indices must be strictly increasing and inside the grid")
        self.obs_map = np.searchsorted(self.starts, np.arange(self.n_obs), side="right") - 1

    @property
    def n_states(self) -> int:
        return self.starts.size

    @property
    def n_boundaries(self) -> int:
        return self.starts.size - 1

    def boundaries(self, grid: TimeGrid) -> torch.Tensor:
        return grid.times[torch.as_tensor(self.starts)]

    @classmethod
    def every(cls, n_obs: int, per_state: int = 4) -> "SegmentPlan":
        """``floor(n_obs / per_state)`` boundaries, i.e. that many + 1 shooting states,
        spread evenly over the grid."""
        L = n_obs // per_state
        starts = np.unique(np.floor(np.arange(L + 1) * n_obs / (L + 1)).astype(int))
        return cls(starts, n_obs)

    @classmethod
    def single(cls, n_obs: int) -> "SegmentPlan":
        return cls(np.array([0]), n_obs)


# Dormand-Prince 5(4) tableau
_C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
_B4 = [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
_E = [b5 - b4 for b5, b4 in zip(_B5, _B4)]


def rk4_step(field, x, h):
    k1 = field(x)
    k2 = field(x + 0.5 * h * k1)
    k3 = field(x + 0.5 * h * k2)
    k4 = field(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_lanes(field, x0, intervals, step=None, substeps=DEFAULT_SUBSTEPS):
    """Fixed-step RK4 over per-lane interval lists.

    x0: (..., lanes, d); intervals: (lanes, n) durations, zero-padded where a
    lane has fewer intervals (a zero interval leaves the state unchanged).
    Returns the states at every interval end including the start,
    shape (..., lanes, n + 1, d).
    """
    intervals = as_tensor(intervals)
    if intervals.ndim == 1:
        intervals = intervals.unsqueeze(0)
    out = [x0]
    x = x0
    for k in range(intervals.shape[-1]):
        dt = intervals[:, k]
        if step is not None:
            n_sub = max(1, math.ceil(float(dt.max()) / step - 1e-9))
        else:
            n_sub = substeps
        h = (dt / n_sub).unsqueeze(-1)
        for _ in range(n_sub):
            x = rk4_step(field, x, h)
        out.append(x)
    return torch.stack(out, dim=-2)


def _rms(z):
    return torch.sqrt(torch.mean(z * z, dim=-1))


def dopri5(field, x0, times, rtol=1e-6, atol=1e-8, t0=None, max_steps=100_000,
           min_step=1e-12, raise_on_failure=True):
    """Adaptive Dormand-Prince 4(5) with independent step control per lane.

    x0: (..., d) with every leading index an independent problem; times: (n,)
    output grid shared by all lanes.  Each lane lands exactly on every output
    time.  Returns ``(states (..., n, d), failed (...) bool, t_last (...))``.
    Failed lanes hold NaN after their last good time.
    """
    times = as_tensor(times).reshape(-1)
    x = as_tensor(x0)
    if x.ndim == 1:
        out, failed, t = dopri5(field, x.unsqueeze(0), times, rtol, atol, t0, max_steps,
                                min_step, raise_on_failure)
        return out[0], failed[0], t[0]
    lead = x.shape[:-1]
    n = times.numel()
    t_start = times[0] if t0 is None else as_tensor(t0)
    t = torch.full(lead, float(t_start), dtype=DTYPE)
    out = torch.full((*lead, n, x.shape[-1]), float("nan"), dtype=DTYPE)
    k_next = torch.zeros(lead, dtype=torch.long)
    if t0 is None or float(t0) == float(times[0]):
        out[..., 0, :] = x
        k_next += 1
    done = k_next >= n
    failed = torch.zeros(lead, dtype=torch.bool)

    f0 = field(x)
    scale = atol + rtol * x.abs()
    d0, d1 = _rms(x / scale), _rms(f0 / scale)
    span = float(times[-1] - t_start) if n else 0.0
    h = torch.where((d0 < 1e-5) | (d1 < 1e-5), torch.full_like(d0, 1e-6), 0.01 * d0 / d1)
    h = torch.clamp(h, max=max(span, 1e-12))
    k1 = f0

    steps = 0
    while not bool(torch.all(done)):
        steps += 1
        if steps > max_steps:
            failed |= ~done
            break
        target = times[torch.clamp(k_next, max=n - 1)]
        remaining = target - t
        hits = h >= remaining
        h_eff = torch.where(hits, remaining, h)
        h_eff = torch.where(done, torch.zeros_like(h_eff), h_eff)
        he = h_eff.unsqueeze(-1)

        ks = [k1]
        for i in range(1, 7):
            xi = x + he * sum(a * kj for a, kj in zip(_A[i], ks) if a != 0.0)
            ks.append(field(xi))
        y5 = x + he * sum(b * kj for b, kj in zip(_B5, ks) if b != 0.0)
        err_vec = he * sum(e * kj for e, kj in zip(_E, ks) if e != 0.0)
        sc = atol + rtol * torch.maximum(x.abs(), y5.abs())
        err = _rms(err_vec / sc)
        finite = torch.isfinite(err) & torch.all(torch.isfinite(y5), dim=-1)
        accept = finite & (err <= 1.0) & ~done

        acc = accept.unsqueeze(-1)
        x = torch.where(acc, y5, x)
        k1 = torch.where(acc, ks[6], k1)
        t = torch.where(accept, torch.where(hits, target, t + h_eff), t)

        landed = accept & hits
        if bool(torch.any(landed)):
            idx = torch.nonzero(landed, as_tuple=True)
            out[(*idx, k_next[idx])] = x[idx]
            k_next = k_next + landed.long()
            done = done | (k_next >= n)

        safe_err = torch.where(finite, err, torch.full_like(err, 1e10))
        factor = torch.clamp(0.9 * safe_err.clamp(min=1e-10) ** -0.2, 0.2, 10.0)
        factor = torch.where(finite, factor, torch.full_like(factor, 0.2))
        h_new = h_eff * factor
        # a step shortened to land on an output time says little about the natural step
        h_new = torch.where(hits & accept, torch.maximum(h_new, h), h_new)
        h = torch.where(done, h, h_new)

        tiny = (h < min_step * torch.clamp(t.abs(), min=1.0)) & ~done
        if bool(torch.any(tiny)):
            failed |= tiny
            done = done | tiny

    if raise_on_failure and bool(torch.any(failed)):
        t_bad = float(t[failed].min())
        raise IntegrationError("adaptive step size underflow", t_last=t_bad)
    return out, failed, t


def integrate(field, x0, grid, solver: SolverSpec | None = None):
    """Solve x' = field(x) from x0 at grid.times[0]; return states at every grid time.

    x0 may carry leading batch axes; output shape is (..., n, d).
    """
    solver = solver or SolverSpec()
    grid = grid if isinstance(grid, TimeGrid) else TimeGrid(grid)
    x0 = as_tensor(x0)
    if len(grid) == 1:
        return x0.unsqueeze(-2)
    if solver.method == "dopri5":
        out, _, _ = dopri5(field, x0, grid.times, rtol=solver.rtol, atol=solver.atol,
                           max_steps=solver.max_steps, min_step=solver.min_step)
        return out
    intervals = (grid.times[1:] - grid.times[:-1]).unsqueeze(0)
    lanes = x0.unsqueeze(-2)
    traj = rk4_lanes(field, lanes, intervals, step=solver.step, substeps=solver.substeps)
    if not bool(torch.isfinite(traj).all()):
        ok = torch.isfinite(traj).all(-1).reshape(-1, traj.shape[-2]).all(0)
        k_bad = int(torch.nonzero(~ok)[0])
        raise IntegrationError("non-finite state in fixed-step rollout", t_last=float(grid.times[k_bad - 1]))
    return traj.squeeze(-3)


@dataclass
class LaneLayout:
    """Where every observation and segment end lives in a lane-major rollout."""

    intervals: torch.Tensor  # (lanes, n_max)
    obs_lane: np.ndarray  # (N,)
    obs_local: np.ndarray  # (N,)
    end_lane: np.ndarray  # (L,)
    end_local: np.ndarray  # (L,)


def segment_layout(grid: TimeGrid, plan: SegmentPlan) -> LaneLayout:
    if plan.n_obs != len(grid):
        raise ValueError(f"plan covers {plan.n_obs} observations, grid has {len(grid)}")
    starts = list(plan.starts) + [len(grid) - 1]
    dts = grid.times[1:] - grid.times[:-1]
    rows = []
    for l in range(plan.n_states):
        a, b = starts[l], starts[l + 1]
        rows.append(dts[a:b])
    n_max = max(max(r.numel() for r in rows), 1)
    intervals = torch.zeros(len(rows), n_max, dtype=DTYPE)
    for l, r in enumerate(rows):
        intervals[l, : r.numel()] = r
    obs_lane = plan.obs_map.copy()
    obs_local = np.arange(plan.n_obs) - plan.starts[obs_lane]
    end_lane = np.arange(plan.n_boundaries)
    end_local = plan.starts[1:] - plan.starts[:-1]
    return LaneLayout(intervals, obs_lane, obs_local, end_lane, end_local)


def run_lanes(field, x0, intervals, solver: SolverSpec | None = None, workers: int = 1):
    """RK4 over lanes, optionally split into ``workers`` groups run concurrently.

    Each group is itself advanced in lockstep.  Lanes never interact, so the
    result does not depend on how they are grouped.
    """
    solver = solver or SolverSpec()
    if solver.method != "rk4":
        raise ValueError("segment rollouts use the fixed-step solver")
    n_lanes = intervals.shape[0]
    workers = max(1, min(workers, n_lanes))
    if workers == 1:
        return rk4_lanes(field, x0, intervals, step=solver.step, substeps=solver.substeps)
    bounds = np.linspace(0, n_lanes, workers + 1).round().astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def job(ab):
        a, b = ab
        return rk4_lanes(field, x0[..., a:b, :], intervals[a:b], step=solver.step,
                         substeps=solver.substeps)

    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(job, chunks))
    return torch.cat(parts, dim=-3)


def _check_finite(traj, intervals, t_start):
    """Raise for the first lane whose fixed-step rollout left the finite reals."""
    ok = torch.isfinite(traj).all(-1)  # (..., lanes, n + 1)
    while ok.ndim > 2:
        ok = ok.all(0)
    if bool(ok.all()):
        return
    lane = int(torch.nonzero(~ok.all(-1))[0])
    k_bad = int(torch.nonzero(~ok[lane])[0])
    t_last = float(t_start[lane] + intervals[lane, : max(k_bad - 1, 0)].sum())
    raise IntegrationError("non-finite state in fixed-step rollout", t_last=t_last, segment=lane)


def integrate_segments(field, shooting_states, plan: SegmentPlan, grid, solver=None, workers=1):
    """Integrate every shooting segment from its own start state.

    shooting_states: (..., n_states, d).  Returns ``(obs, ends)`` where ``obs``
    (..., N, d) holds each observation predicted from its own segment and
    ``ends`` (..., n_states - 1, d) holds x(t_{l+1}; s_l) for the tolerance prior.
    """
    grid = grid if isinstance(grid, TimeGrid) else TimeGrid(grid)
    layout = segment_layout(grid, plan)
    s = as_tensor(shooting_states)
    if s.shape[-2] != plan.n_states:
        raise ValueError(f"expected {plan.n_states} shooting states, got {s.shape[-2]}")
    traj = run_lanes(field, s, layout.intervals, solver, workers)
    _check_finite(traj, layout.intervals, grid.times[torch.as_tensor(plan.starts)])
    obs = traj[..., layout.obs_lane, layout.obs_local, :]
    ends = traj[..., layout.end_lane, layout.end_local, :]
    return obs, ends
