"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .field import DEFAULT_BASES, PREDICTION_PATHS
from .systems import SYSTEMS

MODES = ("hgp_standard", "hgp_shooting", "hgp_energy_shooting", "hgp_batched", "gpode_shooting")


@dataclass
class RunConfig:
    task: int = 1
    system: str = "fp"
    mode: str = "hgp_energy_shooting"
    M: int | None = None  # 48 for task 1, 128 for task 2
    S: int = DEFAULT_BASES
    iterations: int = 2500
    lr: float = 3e-3
    seed: int = 0
    per_state: int = 4  # observations per shooting state, L = floor(N / per_state)
    substeps: int = 10  # RK4 steps per observation interval during training
    pred_method: str = "dopri5"
    pred_rtol: float = 1e-6
    pred_atol: float = 1e-8
    noise_fraction: float = 0.05
    K: int = 8
    n_paths: int = PREDICTION_PATHS
    train_length: float | None = None
    n_test: int = 25
    workers: int = 1
    window: int = 6
    batch_size: int = 16

    def __post_init__(self):
        if self.task not in (1, 2):
            raise ValueError("task must be 1 or 2")
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.M is None:
            self.M = 48 if self.task == 1 else 128
        if self.iterations < 0 or self.lr <= 0 or self.M < 1 or self.S < 1:
            raise ValueError("iterations, lr, M and S must be positive")
        if self.task == 1:
            self.K = 1

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise KeyError(f"unknown config key {name!r}")
    raw = raw.strip()
    t = str(types[name])
    if raw.lower() in ("none", "") and "None" in t:
        return None
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); overrides win."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        values[k.strip()] = _coerce(k.strip(), v)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path: str | None, **overrides) -> RunConfig:
    text = ""
    if path:
        with open(path) as fh:
            text = fh.read()
    return parse_config(text, **overrides)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
