import math
import os

import numpy as np
import pytest
import torch

from hamgp.errors import DimensionError, SamplerExhausted
from hamgp.systems import (DIMS, DatasetSpec, Standardizer, SystemParams, generate, hh_cutoff, load_dataset,
                           read_trajectory, sample_initial, save_dataset, simulate, true_field, true_H,
                           write_trajectory)


def fd_field(system, p, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (true_H(system, p, x + e) - true_H(system, p, x - e)) / (2 * h)
    D = x.size // 2
    return np.concatenate([g[D:], -g[:D]])


def test_defaults():
    assert SystemParams.default("sp").rest_length == 3.0
    assert SystemParams.default("fp").rest_length == 1.0
    with pytest.raises(ValueError):
        SystemParams(mass=0.0)
    with pytest.raises(ValueError):
        SystemParams.default("xx")


def test_energy_values():
    p = SystemParams.default("fp")
    assert true_H("fp", p, np.zeros(2)) == 0.0
    assert true_H("fp", p, np.array([math.pi / 2, 0.0])) == pytest.approx(9.81, abs=1e-12)
    assert true_H("hh", SystemParams.default("hh"), np.zeros(4)) == 0.0
    with pytest.raises(DimensionError):
        true_H("hh", p, np.zeros(2))


def test_sp_singularity():
    p = SystemParams.default("sp")
    with pytest.raises(ValueError):
        true_H("sp", p, np.array([-3.0, 0.1, 0.2, 0.3]))
    with pytest.raises(ValueError):
        true_field("sp", p, np.array([-3.0, 0.1, 0.2, 0.3]))


def test_fp_field_values():
    p = SystemParams.default("fp")
    assert np.allclose(true_field("fp", p, np.array([0.0, 1.0])), [1.0, 0.0])
    assert np.all(true_field("fp", p, np.zeros(2)) == 0)


@pytest.mark.parametrize("system", ["fp", "sp", "hh"])
def test_field_matches_finite_differences_and_conserves(system):
    p = SystemParams.default(system)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.uniform(-1, 1, DIMS[system])
        f = true_field(system, p, x)
        fd = fd_field(system, p, x)
        assert np.linalg.norm(f - fd) / np.linalg.norm(f) < 1e-8
        g = np.concatenate([-f[DIMS[system] // 2:], f[:DIMS[system] // 2]])  # grad H recovered from f
        assert abs(f @ g) <= 1e-12 * (np.linalg.norm(f) ** 2 + 1)


def test_torch_inputs_supported():
    p = SystemParams.default("sp")
    x = torch.tensor([0.1, 0.2, -0.1, 0.05])
    assert np.isclose(float(true_H("sp", p, x)), true_H("sp", p, x.numpy()))
    assert np.allclose(true_field("sp", p, x).numpy(), true_field("sp", p, x.numpy()))


def test_initial_sampling_rules():
    rng = np.random.default_rng(1)
    fp, hh = SystemParams.default("fp"), SystemParams.default("hh")
    assert hh_cutoff(hh) == pytest.approx(1 / (6 * 0.8**2))
    assert hh_cutoff(hh) == pytest.approx(0.26042, abs=1e-5)
    for _ in range(200):
        assert true_H("fp", fp, sample_initial("fp", fp, rng)) < 9.81
        assert true_H("hh", hh, sample_initial("hh", hh, rng)) <= hh_cutoff(hh)
        x = sample_initial("sp", SystemParams.default("sp"), rng)
        assert np.all(np.abs(x) <= 0.25)
    a = sample_initial("hh", hh, np.random.default_rng(5))
    b = sample_initial("hh", hh, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_hh_cutoff_is_enforced_exactly():
    """Accept exactly when E <= 1/(6 mu^2): compare against a replay of the same uniform stream."""
    hh = SystemParams.default("hh")
    rng, replay = np.random.default_rng(7), np.random.default_rng(7)
    for _ in range(50):
        x = sample_initial("hh", hh, rng)
        while True:
            y = replay.uniform(-1.0, 1.0, size=4)
            if true_H("hh", hh, y) <= hh_cutoff(hh):
                break
        assert np.array_equal(x, y)


def test_sampler_exhaustion(monkeypatch):
    import hamgp.systems as systems

    monkeypatch.setattr(systems, "MAX_ATTEMPTS", 0)
    with pytest.raises(SamplerExhausted):
        sample_initial("fp", SystemParams.default("fp"), np.random.default_rng(0))


@pytest.mark.parametrize("system", ["fp", "sp", "hh"])
def test_generated_data_conserves_energy(system):
    ds = generate(DatasetSpec(system, 1, seed=3))
    E = ds.energy(ds.train_clean[0])
    assert np.max(np.abs(E - E[0])) / abs(E[0]) < 1e-8
    Et = ds.energy(ds.test_clean[0])
    assert np.max(np.abs(Et - E[0])) / abs(E[0]) < 1e-8


def test_dataset_shapes_and_standardization():
    ds = generate(DatasetSpec("sp", 2, n_train=3, n_test=4, seed=0))
    assert ds.train_obs.shape == (3, 36, 4)
    assert ds.test_clean.shape == (4, 181, 4)
    flat = ds.train_obs.reshape(-1, 4)
    assert np.all(np.abs(flat.mean(0)) < 1e-10)
    assert np.all(np.abs(flat.std(0) - 1) < 1e-10)
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert np.allclose(ds.scaler.inverse(ds.scaler.forward(x)), x, atol=1e-12)
    ds1 = generate(DatasetSpec("fp", 1, seed=0))
    assert ds1.train_times[-1] < 8.0 and ds1.test_times[0] == 8.0 and ds1.test_times[-1] == pytest.approx(16.0)


def test_zero_noise_gives_clean_observations():
    ds = generate(DatasetSpec("fp", 1, noise_fraction=0.0, seed=1))
    assert np.allclose(ds.train_obs, ds.train_clean, atol=1e-12)


def test_noise_level():
    ds = generate(DatasetSpec("hh", 2, n_train=20, noise_fraction=0.05, seed=2))
    raw_clean = ds.scaler.inverse(ds.train_clean).reshape(-1, 4)
    raw_noisy = ds.scaler.inverse(ds.train_obs).reshape(-1, 4)
    ratio = (raw_noisy - raw_clean).var(0) / raw_clean.var(0)
    assert np.all(np.abs(ratio - 0.05) < 0.01)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec("fp", 3)
    with pytest.raises(ValueError):
        DatasetSpec("fp", 1, noise_fraction=1.0)
    assert DatasetSpec("hh", 1).train_length == 40.0
    assert DatasetSpec("sp", 2).train_length == 6.0


def test_file_round_trip(tmp_path):
    ds = generate(DatasetSpec("sp", 2, n_train=2, n_test=2, seed=4))
    save_dataset(ds, str(tmp_path / "d"))
    back = load_dataset(str(tmp_path / "d"))
    assert np.allclose(back.train_obs, ds.train_obs, atol=1e-12)
    assert np.allclose(back.test_clean, ds.test_clean, atol=1e-12)
    assert back.spec.system == "sp" and back.spec.seed == 4
    path = tmp_path / "one.csv"
    write_trajectory(str(path), ds.train_times, ds.scaler.inverse(ds.train_obs[0]))
    with open(path) as fh:
        assert fh.readline().strip() == "t,q1,q2,p1,p2"
    t, X = read_trajectory(str(path))
    assert np.allclose(t, ds.train_times) and X.shape == (36, 4)


def test_simulate_matches_closed_form_small_angle():
    p = SystemParams.default("fp")
    t = np.linspace(0, 2, 11)
    x = simulate("fp", p, np.array([1e-4, 0.0]), t)
    w = math.sqrt(p.gravity / p.rest_length)
    assert np.allclose(x[:, 0], 1e-4 * np.cos(w * t), atol=1e-10)
