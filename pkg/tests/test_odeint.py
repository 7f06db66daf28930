import math

import numpy as np
import pytest
import torch

from hamgp.errors import IntegrationError
from hamgp.odeint import (SegmentPlan, SolverSpec, TimeGrid, dopri5, integrate, integrate_segments,
                          rk4_lanes, run_lanes, segment_layout)
from hamgp.systems import SystemParams, TASK1_LENGTH, sample_initial, true_field, true_H


def osc(x):
    return torch.stack([x[..., 1], -x[..., 0]], -1)


def osc_exact(t):
    return torch.stack([torch.cos(t), -torch.sin(t)], -1)


def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(torch.tensor([0.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(torch.tensor([]))
    with pytest.raises(ValueError):
        TimeGrid(torch.tensor([0.0, float("nan")]))
    assert TimeGrid(torch.tensor([0.0, 0.5, 2.0])).spacing == 0.5


def test_solver_spec_validation():
    with pytest.raises(ValueError):
        SolverSpec("euler")
    with pytest.raises(ValueError):
        SolverSpec("rk4", step=-1.0)
    s = SolverSpec.from_dict({"method": "dopri5", "rtol": 1e-7, "atol": 1e-9, "ignored": 1})
    assert s.method == "dopri5" and s.tolerance == 1e-7


def test_zero_field_keeps_state():
    x0 = torch.tensor([0.3, -1.2])
    t = torch.linspace(0, 3, 7)
    for solver in (SolverSpec("rk4"), SolverSpec("dopri5")):
        out = integrate(lambda x: torch.zeros_like(x), x0, t, solver)
        assert torch.equal(out, x0.expand(7, 2))


def test_rk4_harmonic_oscillator():
    t = torch.linspace(0, 10, 1001)
    out = integrate(osc, torch.tensor([1.0, 0.0]), t, SolverSpec("rk4", step=0.01))
    assert torch.equal(out[0], torch.tensor([1.0, 0.0]))
    assert float((out - osc_exact(t)).abs().max()) < 1e-6


def test_rk4_fourth_order_convergence():
    t = torch.linspace(0, 10, 11)
    errs = []
    for h in (0.1, 0.05):
        out = integrate(osc, torch.tensor([1.0, 0.0]), t, SolverSpec("rk4", step=h))
        errs.append(float((out - osc_exact(t)).abs().max()))
    assert 12 <= errs[0] / errs[1] <= 20


def test_rk4_conserves_fp_energy():
    p = SystemParams.default("fp")
    t = torch.linspace(0, 8, 801)
    out = integrate(lambda x: true_field("fp", p, x), torch.tensor([0.5, 0.0]), t, SolverSpec("rk4", step=0.01))
    E = true_H("fp", p, out)
    assert float((E - E[0]).abs().max()) < 1e-6


def test_dopri5_accuracy_and_batching():
    t = torch.linspace(0, 10, 21)
    out, failed, _ = dopri5(osc, torch.tensor([1.0, 0.0]), t, rtol=1e-10, atol=1e-12)
    assert not bool(failed)
    assert float((out - osc_exact(t)).abs().max()) < 1e-8
    x0 = torch.randn(3, 4, 2)
    outb, fb, _ = dopri5(osc, x0, t, rtol=1e-8, atol=1e-10)
    assert outb.shape == (3, 4, 21, 2) and not fb.any()
    single, _, _ = dopri5(osc, x0[1, 2], t, rtol=1e-8, atol=1e-10)
    assert torch.allclose(single, outb[1, 2], atol=1e-7)


def test_dopri5_start_time_offset():
    t = torch.tensor([1.0, 2.0, 3.0])
    out, _, _ = dopri5(osc, torch.tensor([1.0, 0.0]), t, rtol=1e-10, atol=1e-12, t0=0.0)
    assert torch.allclose(out, osc_exact(t), atol=1e-8)


def test_dopri5_failure_reports_last_time():
    blowup = lambda x: x**2  # x' = x^2 from x0 = 1 explodes at t = 1
    t = torch.tensor([0.0, 0.5, 2.0])
    with pytest.raises(IntegrationError) as exc:
        dopri5(blowup, torch.tensor([1.0, 1.0]), t, max_steps=2000)
    assert exc.value.t_last is not None and 0.5 <= exc.value.t_last <= 1.01
    out, failed, _ = dopri5(blowup, torch.tensor([[1.0, 1.0], [0.1, 0.1]]), t, max_steps=2000,
                            raise_on_failure=False)
    assert failed.tolist() == [True, False]
    assert torch.isnan(out[0, -1]).all() and torch.isfinite(out[1]).all()


@pytest.mark.parametrize("system", ["fp", "sp"])
def test_adaptive_agrees_with_fine_rk4(system):
    p = SystemParams.default(system)
    x0 = torch.as_tensor(sample_initial(system, p, np.random.default_rng(0)))
    T = TASK1_LENGTH[system]
    t = torch.linspace(0, T, int(T * 2) + 1)
    f = lambda x: true_field(system, p, x)
    a = integrate(f, x0, t, SolverSpec("dopri5", rtol=1e-6, atol=1e-8))
    b = integrate(f, x0, t, SolverSpec("rk4", step=1e-3))
    assert float((a - b).abs().max()) < 1e-5


def test_adaptive_global_error_on_long_henon_heiles_horizon():
    """Over 40 s of Henon-Heiles, local error control at rtol 1e-6 accumulates to a
    few 1e-5 globally.  Check we are no worse than scipy's RK45 at the same
    tolerances and that tightening rtol by 10x brings us under 1e-5."""
    from scipy.integrate import solve_ivp

    p = SystemParams.default("hh")
    x0 = torch.as_tensor(sample_initial("hh", p, np.random.default_rng(0)))
    t = torch.linspace(0, TASK1_LENGTH["hh"], 81)
    f = lambda x: true_field("hh", p, x)
    fine = integrate(f, x0, t, SolverSpec("rk4", step=1e-3))
    ours = float((integrate(f, x0, t, SolverSpec("dopri5", rtol=1e-6, atol=1e-8)) - fine).abs().max())
    sol = solve_ivp(lambda _, x: true_field("hh", p, x), (0, float(t[-1])), x0.numpy(), method="RK45",
                    t_eval=t.numpy(), rtol=1e-6, atol=1e-8)
    theirs = float(np.abs(sol.y.T - fine.numpy()).max())
    assert ours <= 1.5 * theirs
    tight = integrate(f, x0, t, SolverSpec("dopri5", rtol=1e-7, atol=1e-9))
    assert float((tight - fine).abs().max()) < 1e-5


def test_segment_plan_rules():
    plan = SegmentPlan.every(64, 4)
    assert plan.n_boundaries == 16 and plan.n_states == 17
    assert plan.obs_map[0] == 0 and np.all(np.diff(plan.obs_map) >= 0)
    for i, l in enumerate(plan.obs_map):
        assert plan.starts[l] <= i and (l == plan.n_states - 1 or plan.starts[l + 1] > i)
    with pytest.raises(ValueError):
        SegmentPlan(np.array([1, 3]), 10)
    with pytest.raises(ValueError):
        SegmentPlan(np.array([0, 3, 3]), 10)
    grid = TimeGrid(torch.arange(10.0))
    assert torch.equal(SegmentPlan(np.array([0, 4, 7]), 10).boundaries(grid), torch.tensor([0.0, 4.0, 7.0]))


def test_single_segment_equals_integrate():
    t = torch.linspace(0, 5, 21)
    x0 = torch.tensor([0.7, -0.1])
    obs, ends = integrate_segments(osc, x0[None], SegmentPlan.single(21), t)
    assert ends.shape == (0, 2)
    assert torch.equal(obs, integrate(osc, x0, t))


def test_exact_shooting_states_reproduce_rollout():
    p = SystemParams.default("hh")
    f = lambda x: true_field("hh", p, x)
    t = torch.linspace(0, 10, 41)
    x0 = torch.as_tensor(sample_initial("hh", p, np.random.default_rng(3)))
    solver = SolverSpec("rk4", substeps=10)
    full = integrate(f, x0, t, solver)
    plan = SegmentPlan.every(41, 4)
    s = full[torch.as_tensor(plan.starts)]
    obs, ends = integrate_segments(f, s, plan, t, solver)
    tol = 10 * 1e-6
    assert float((obs - full).abs().max()) < tol
    assert float((ends - s[1:]).abs().max()) < tol


def test_parallel_lanes_bitwise_identical():
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(2, 9, 2, generator=g)
    iv = torch.rand(9, 5, generator=g)
    seq = run_lanes(osc, x0, iv, SolverSpec(), workers=1)
    par = run_lanes(osc, x0, iv, SolverSpec(), workers=4)
    assert torch.equal(seq, par)


def test_padded_lanes_and_layout():
    t = torch.tensor([0.0, 0.3, 0.5, 1.0, 1.1, 1.5, 2.0])
    plan = SegmentPlan(np.array([0, 3, 5]), 7)
    lay = segment_layout(TimeGrid(t), plan)
    assert lay.intervals.shape == (3, 3)
    assert torch.allclose(lay.intervals[2], torch.tensor([0.5, 0.0, 0.0]))
    assert lay.obs_lane.tolist() == [0, 0, 0, 1, 1, 2, 2]
    assert lay.end_local.tolist() == [3, 2]
    traj = rk4_lanes(osc, torch.randn(3, 2), lay.intervals)
    assert torch.equal(traj[2, 1], traj[2, 2])  # zero padding leaves the state unchanged


def test_nonfinite_rollout_is_tagged_with_segment():
    t = torch.linspace(0, 2, 9)
    plan = SegmentPlan.every(9, 4)
    s = torch.tensor([[0.1, 0.1], [0.1, 0.1], [50.0, 50.0]])
    with pytest.raises(IntegrationError, match="segment 2"):
        integrate_segments(lambda x: x**3, s, plan, t, SolverSpec("rk4", substeps=2))


def test_chain_rule_through_rk4():
    t = torch.linspace(0, 2, 5)
    f = lambda x: torch.stack([x[..., 1], -torch.sin(x[..., 0])], -1)
    x0 = torch.tensor([0.4, 0.2], requires_grad=True)
    end = integrate(f, x0, t)[-1]
    delta = torch.tensor([1e-6, -2e-6])
    J = torch.stack([torch.autograd.grad(end[i], x0, retain_graph=True)[0] for i in range(2)])
    with torch.no_grad():
        moved = integrate(f, x0 + delta, t)[-1]
    assert torch.allclose(moved - end.detach(), J @ delta, atol=1e-10)
