"""Benchmark Hamiltonian systems and noisy trajectory datasets.

Three systems are provided: the fixed pendulum (``fp``, one degree of
freedom), the spring pendulum (``sp``) and Henon-Heiles (``hh``), both with
two degrees of freedom.  States are ``(q_1..q_D, p_1..p_D)``.

Energy functions accept numpy arrays or torch tensors of shape (..., 2D).
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ._tensor import DTYPE, as_tensor, to_numpy
from .errors import DimensionError, SamplerExhausted
from .odeint import dopri5

SYSTEMS = ("fp", "sp", "hh")
DIMS = {"fp": 2, "sp": 4, "hh": 4}
# train rate, test rate (Hz)
RATES = {"fp": (8.0, 15.0), "sp": (6.0, 10.0), "hh": (4.0, 10.0)}
TASK1_LENGTH = {"fp": 8.0, "sp": 16.0, "hh": 40.0}
TASK2_LENGTH = {"fp": 4.0, "sp": 6.0, "hh": 12.0}
MAX_ATTEMPTS = 10_000
GEN_RTOL, GEN_ATOL = 1e-10, 1e-12


@dataclass
class SystemParams:
    mass: float = 1.0
    rest_length: float = 1.0
    gravity: float = 9.81
    spring_k: float = 10.0
    hh_mu: float = 0.8

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive, got {v}")

    @classmethod
    def default(cls, system: str) -> "SystemParams":
        _check_system(system)
        return cls(rest_length=3.0) if system == "sp" else cls()


def _check_system(system):
    if system not in SYSTEMS:
        raise ValueError(f"unknown system {system!r}; choose from {SYSTEMS}")


def _xp(x):
    return torch if isinstance(x, torch.Tensor) else np


def _split(system, x):
    _check_system(system)
    if x.shape[-1] != DIMS[system]:
        raise DimensionError(f"{system} states have dimension {DIMS[system]}, got {x.shape[-1]}")
    return [x[..., i] for i in range(x.shape[-1])]


def _sp_radius(q1, r):
    rad = q1 + r
    if bool((rad == 0).any()):
        raise ValueError("spring pendulum momentum term is singular at q1 = -r")
    return rad


def hh_cutoff(params: SystemParams) -> float:
    """Largest energy with bounded Henon-Heiles level sets: 1 / (6 mu^2)."""
    return 1.0 / (6.0 * params.hh_mu**2)


def true_H(system: str, params: SystemParams, x):
    if not isinstance(x, torch.Tensor):
        x = np.asarray(x, dtype=float)
    xp = _xp(x)
    m, r, g, k, mu = params.mass, params.rest_length, params.gravity, params.spring_k, params.hh_mu
    if system == "fp":
        q, p = _split(system, x)
        return m * g * r * (1 - xp.cos(q)) + p**2 / (2 * m * r**2)
    if system == "sp":
        q1, q2, p1, p2 = _split(system, x)
        rad = _sp_radius(q1, r)
        return (p1**2 + p2**2 / rad**2) / (2 * m) + 0.5 * k * q1**2 - m * g * r * xp.cos(q2)
    q1, q2, p1, p2 = _split(system, x)
    return 0.5 * (q1**2 + q2**2 + p1**2 + p2**2) + mu * (q2 * q1**2 - q2**3 / 3.0)


def true_field(system: str, params: SystemParams, x):
    """Hand-derived (dH/dp, -dH/dq)."""
    if not isinstance(x, torch.Tensor):
        x = np.asarray(x, dtype=float)
    xp = _xp(x)
    m, r, g, k, mu = params.mass, params.rest_length, params.gravity, params.spring_k, params.hh_mu
    if system == "fp":
        q, p = _split(system, x)
        return xp.stack([p / (m * r**2), -m * g * r * xp.sin(q)], -1)
    if system == "sp":
        q1, q2, p1, p2 = _split(system, x)
        rad = _sp_radius(q1, r)
        return xp.stack([
            p1 / m,
            p2 / (m * rad**2),
            p2**2 / (m * rad**3) - k * q1,
            -m * g * r * xp.sin(q2),
        ], -1)
    q1, q2, p1, p2 = _split(system, x)
    return xp.stack([p1, p2, -q1 - 2 * mu * q1 * q2, -q2 - mu * (q1**2 - q2**2)], -1)


def sample_initial(system: str, params: SystemParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one initial condition following the per-system protocol."""
    _check_system(system)
    d = DIMS[system]
    if system == "sp":
        return rng.uniform(-0.25, 0.25, size=d)
    cutoff = params.mass * params.gravity * params.rest_length if system == "fp" else hh_cutoff(params)
    for _ in range(MAX_ATTEMPTS):
        x = rng.uniform(-1.0, 1.0, size=d)
        if true_H(system, params, x) <= cutoff:
            return x
    raise SamplerExhausted(f"no {system} initial condition with E <= {cutoff:.6g} in {MAX_ATTEMPTS} draws")


def simulate(system: str, params: SystemParams, x0, times, rtol=GEN_RTOL, atol=GEN_ATOL) -> np.ndarray:
    """Clean trajectories from x0 (..., 2D) at ``times``; returns (..., n, 2D)."""
    f = lambda x: true_field(system, params, x)
    out, _, _ = dopri5(f, as_tensor(x0), as_tensor(times), rtol=rtol, atol=atol)
    return to_numpy(out)


@dataclass
class DatasetSpec:
    """What to generate.  Task 1: one trajectory on [0, T) with its clean
    continuation on [T, 2T].  Task 2: ``n_train`` trajectories on [0, T) and
    ``n_test`` fresh clean trajectories of length ``test_factor * T``."""

    system: str = "fp"
    task: int = 1
    train_length: float | None = None
    train_rate: float | None = None
    test_rate: float | None = None
    noise_fraction: float = 0.05
    n_train: int = 1
    n_test: int = 25
    test_factor: float = 3.0
    seed: int = 0

    def __post_init__(self):
        _check_system(self.system)
        if self.task not in (1, 2):
            raise ValueError("task must be 1 or 2")
        tr, te = RATES[self.system]
        if self.train_length is None:
            self.train_length = (TASK1_LENGTH if self.task == 1 else TASK2_LENGTH)[self.system]
        self.train_rate = tr if self.train_rate is None else self.train_rate
        self.test_rate = te if self.test_rate is None else self.test_rate
        if self.train_rate <= 0 or self.test_rate <= 0 or self.train_length <= 0:
            raise ValueError("rates and lengths must be positive")
        if not 0 <= self.noise_fraction < 1:
            raise ValueError("noise fraction must lie in [0, 1)")
        if self.task == 1:
            self.n_train = 1
        if self.n_train < 1:
            raise ValueError("need at least one training trajectory")


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, Y: np.ndarray) -> "Standardizer":
        flat = Y.reshape(-1, Y.shape[-1])
        return cls(flat.mean(0), flat.std(0))

    def forward(self, x):
        if isinstance(x, torch.Tensor):
            return (x - as_tensor(self.mean)) / as_tensor(self.std)
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, z):
        if isinstance(z, torch.Tensor):
            return z * as_tensor(self.std) + as_tensor(self.mean)
        return np.asarray(z) * self.std + self.mean


@dataclass
class Dataset:
    """Standardized training/test trajectories plus raw-coordinate bookkeeping.

    Arrays are stacked as (trajectories, times, 2D).
    """

    spec: DatasetSpec
    params: SystemParams
    scaler: Standardizer
    train_times: np.ndarray
    train_obs: np.ndarray
    train_clean: np.ndarray
    test_times: np.ndarray
    test_clean: np.ndarray
    noise_var: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def system(self) -> str:
        return self.spec.system

    @property
    def dim(self) -> int:
        return DIMS[self.spec.system]

    def energy(self, z_standardized):
        """True energy of standardized states, computed in raw coordinates."""
        return true_H(self.system, self.params, self.scaler.inverse(z_standardized))

    @property
    def test_initial(self) -> np.ndarray:
        return self.test_clean[:, 0]


def _grid(length, rate, include_end=False):
    n = int(round(length * rate))
    return np.arange(n + (1 if include_end else 0)) / rate


def generate(spec: DatasetSpec, params: SystemParams | None = None, rng=None) -> Dataset:
    params = params or SystemParams.default(spec.system)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    T = spec.train_length
    t_train = _grid(T, spec.train_rate)
    x0 = np.stack([sample_initial(spec.system, params, rng) for _ in range(spec.n_train)])
    if spec.task == 1:
        t_test = T + _grid(T, spec.test_rate, include_end=True)
        t_all = np.union1d(t_train, t_test)
        traj = simulate(spec.system, params, x0, t_all)
        clean = traj[:, np.searchsorted(t_all, t_train)]
        test_raw = traj[:, np.searchsorted(t_all, t_test)]
    else:
        clean = simulate(spec.system, params, x0, t_train)
        t_test = _grid(spec.test_factor * T, spec.test_rate, include_end=True)
        xt = np.stack([sample_initial(spec.system, params, rng) for _ in range(spec.n_test)])
        test_raw = simulate(spec.system, params, xt, t_test)
    flat = clean.reshape(-1, clean.shape[-1])
    noise_var = spec.noise_fraction * flat.var(0)
    noisy = clean + rng.normal(size=clean.shape) * np.sqrt(noise_var)
    scaler = Standardizer.fit(noisy)
    return Dataset(spec, params, scaler, t_train, scaler.forward(noisy), scaler.forward(clean),
                   t_test, scaler.forward(test_raw), noise_var)


# ---------------------------------------------------------------------------
# files: one CSV per trajectory (raw coordinates) and a key = value manifest


def _header(d):
    D = d // 2
    return ["t"] + [f"q{i + 1}" for i in range(D)] + [f"p{i + 1}" for i in range(D)]


def write_trajectory(path, times, states):
    d = states.shape[-1]
    data = np.column_stack([times, states])
    np.savetxt(path, data, delimiter=",", header=",".join(_header(d)), comments="", fmt="%.17g")


def read_trajectory(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]


def _fmt(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(repr(float(x)) for x in np.asarray(v).reshape(-1))
    return str(v)


def save_dataset(ds: Dataset, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    files = {"train": [], "train_clean": [], "test": []}
    for k in range(ds.train_obs.shape[0]):
        for kind, arr in (("train", ds.train_obs), ("train_clean", ds.train_clean)):
            name = f"{kind}_{k:03d}.csv"
            write_trajectory(os.path.join(out_dir, name), ds.train_times, ds.scaler.inverse(arr[k]))
            files[kind].append(name)
    for k in range(ds.test_clean.shape[0]):
        name = f"test_{k:03d}.csv"
        write_trajectory(os.path.join(out_dir, name), ds.test_times, ds.scaler.inverse(ds.test_clean[k]))
        files["test"].append(name)
    lines = ["format = hamgp-dataset-1"]
    lines += [f"spec.{k} = {v}" for k, v in asdict(ds.spec).items()]
    lines += [f"params.{k} = {v}" for k, v in asdict(ds.params).items()]
    lines += [f"scaler.mean = {_fmt(ds.scaler.mean)}", f"scaler.std = {_fmt(ds.scaler.std)}",
              f"noise_var = {_fmt(ds.noise_var)}"]
    lines += [f"files.{kind} = {' '.join(names)}" for kind, names in files.items()]
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def _parse_scalar(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return None if v == "None" else v


def load_dataset(out_dir: str) -> Dataset:
    kv = _read_kv(os.path.join(out_dir, "manifest.txt"))
    if kv.get("format") != "hamgp-dataset-1":
        raise ValueError(f"unrecognised dataset manifest in {out_dir}")
    spec = DatasetSpec(**{k[5:]: _parse_scalar(v) for k, v in kv.items() if k.startswith("spec.")})
    params = SystemParams(**{k[7:]: float(v) for k, v in kv.items() if k.startswith("params.")})
    vec = lambda key: np.array([float(x) for x in kv[key].split()])
    scaler = Standardizer(vec("scaler.mean"), vec("scaler.std"))

    def stack(kind):
        names = kv[f"files.{kind}"].split()
        trajs = [read_trajectory(os.path.join(out_dir, n)) for n in names]
        return trajs[0][0], np.stack([scaler.forward(s) for _, s in trajs])

    t_train, obs = stack("train")
    _, clean = stack("train_clean")
    t_test, test = stack("test")
    return Dataset(spec, params, scaler, t_train, obs, clean, t_test, test, vec("noise_var"))
