"""Self-describing model archives (.npz with a versioned JSON header)."""
from __future__ import annotations

import json

import numpy as np
import torch

from ..gpode import GPODEPrior
from ..odeint import SegmentPlan, SolverSpec
from .model import HamiltonianPrior, HGPModel, NoiseModel, Trajectory

FORMAT = "hamgp-checkpoint"
VERSION = 1


def save_checkpoint(path: str, model: HGPModel, generator: torch.Generator | None = None,
                    meta: dict | None = None) -> None:
    prior = model.prior
    header = {
        "format": FORMAT,
        "version": VERSION,
        "prior": "gpode" if isinstance(prior, GPODEPrior) else "hgp",
        "n_bases": prior.n_bases,
        "jitter": prior.jitter,
        "energy": model.energy,
        "noise": {"shoot_var": model.noise.shoot_var, "energy_var": model.noise.energy_var},
        "solver": vars(model.solver),
        "plans": [[int(s) for s in p.starts] for p in model.plans],
        "n_trajectories": len(model.data),
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    for k, tr in enumerate(model.data):
        arrays[f"data/{k}/times"] = tr.times.numpy()
        arrays[f"data/{k}/Y"] = tr.Y.numpy()
    if generator is not None:
        arrays["rng"] = generator.get_state().numpy()
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str):
    """Return (model, generator or None, header)."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path} is not a model checkpoint")
        if header["version"] > VERSION:
            raise ValueError(f"checkpoint version {header['version']} is newer than supported {VERSION}")
        params = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
        data = [Trajectory(z[f"data/{k}/times"], z[f"data/{k}/Y"]) for k in range(header["n_trajectories"])]
        gen = None
        if "rng" in z.files:
            gen = torch.Generator()
            gen.set_state(torch.from_numpy(z["rng"].copy()))
    cls = GPODEPrior if header["prior"] == "gpode" else HamiltonianPrior
    Z = params["prior.Z"]
    prior = cls(Z, n_bases=header["n_bases"], jitter=header["jitter"])
    plans = [SegmentPlan(np.array(s), tr.n_obs) for s, tr in zip(header["plans"], data)] or None
    model = HGPModel(prior, data or None, plans, NoiseModel(**header["noise"]),
                     energy=header["energy"], solver=SolverSpec(**header["solver"]))
    model.load_state_dict(params)
    return model, gen, header
