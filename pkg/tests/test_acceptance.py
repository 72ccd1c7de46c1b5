"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary.
"""

import time

import numpy as np
import pytest

from mfpmp.cli import main
from mfpmp.experiments import load_config, run_convergence_study, run_uniqueness_study, \
    uniqueness_config
from mfpmp.hjb import CoarseControls, costate_consistency, dpp_check, solve_classical_hjb_1d, \
    theta_grid_1d
from mfpmp.models import constant_drive, tanh_bilinear
from mfpmp.ode import ControlPath, TimeGrid
from mfpmp.pmp import SolverConfig, hessian_check, loss, loss_batch, msa_solve
from mfpmp.population import PopulationSpec
from mfpmp.validation import (check_gradient_identity, check_hamiltonian_constancy,
                              check_restart, check_w2, tanh_desk_population_1d)

from conftest import ACCEPTANCE_LINES

LQ_ATOM = PopulationSpec([[0.0]], [[1.0]], [1.0])
LQ_BOX = constant_drive(0.5, theta_box=(-1.0, 1.0))


def record(number, name, passed, detail, elapsed, budget=None):
    budget = float("inf") if budget is None else budget
    ok = passed and elapsed <= budget
    limit = "no limit" if budget == float("inf") else f"{budget:g}s"
    line = (f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {name:32s} {detail}  "
            f"[{elapsed:.1f}s / {limit}]")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line
    assert elapsed <= budget, line


def test_01_gradient_identity():
    t = time.perf_counter()
    r = check_gradient_identity(n_controls=50, n_steps=100, seed=11)
    record(1, "gradient identity", r.passed, f"max rel err {r.observed:.2e} <= 1e-5",
           time.perf_counter() - t, 30)


def test_02_lq_closed_form():
    t = time.perf_counter()
    model = constant_drive(0.5)
    grid = TimeGrid(1.0, 20)
    sol = msa_solve(model, LQ_ATOM, ControlPath.constant(grid, 0.0),
                    SolverConfig(damping=1.0, tol=1e-12))
    theta_err = float(np.max(np.abs(sol.control.values - 0.5)))
    j = loss(model, LQ_ATOM, sol.control)
    cs = np.arange(-10000, 20001) * 1e-4
    values = loss_batch(model, LQ_ATOM, np.broadcast_to(cs[None, :, None], (20, cs.size, 1)),
                        grid)
    i = int(np.argmin(values))
    search_gap = max(abs(cs[i] - sol.control.values[0, 0]), abs(values[i] - j))
    ok = sol.converged and theta_err <= 1e-8 and abs(j - 0.25) <= 1e-8 and search_gap <= 1e-4
    record(2, "LQ closed form", ok,
           f"|theta-0.5| {theta_err:.1e}, |J-0.25| {abs(j - 0.25):.1e}, search gap "
           f"{search_gap:.1e}", time.perf_counter() - t, 5)


def test_03_hamiltonian_constancy():
    t = time.perf_counter()
    spread, factor = check_hamiltonian_constancy(n_steps=1000)
    ok = spread.observed <= 1e-3 and factor.observed >= 1.8
    record(3, "Hamiltonian constancy", ok,
           f"spread {spread.observed:.2e} <= 1e-3, refinement factor {factor.observed:.2f} >= 1.8",
           time.perf_counter() - t, 60)


def test_04_restart():
    t = time.perf_counter()
    r = check_restart()
    record(4, "flow/restart property", r.observed == 0.0, f"max gap {r.observed!r} == 0",
           time.perf_counter() - t, 5)


def test_05_w2():
    t = time.perf_counter()
    match, axioms = check_w2(n_instances=200, seed=3)
    ok = match.observed == 0.0 and axioms.observed <= 1e-12
    record(5, "W2 correctness", ok,
           f"brute-force gap {match.observed!r}, axiom defect {axioms.observed:.1e}",
           time.perf_counter() - t, 10)


def _dpp(step):
    n = int(round(2.0 / step)) + 1
    coarse = CoarseControls(TimeGrid(1.0, 50), 2, theta_grid_1d(-1.0, 1.0, n))
    return dpp_check(LQ_BOX, LQ_ATOM, 0.0, 0.5, coarse).residual


def test_06_dpp():
    t = time.perf_counter()
    r1, r2 = _dpp(1e-2), _dpp(5e-3)
    # both sides enumerate the same family, so the residual sits at rounding level;
    # "shrinks" is checked up to one rounding unit of the value
    ok = r1 <= 1e-3 and r2 <= r1 + np.spacing(0.25)
    record(6, "dynamic programming principle", ok,
           f"residual {r1:.1e} (step 1e-2) -> {r2:.1e} (step 5e-3)", time.perf_counter() - t, 120)


def _lq_value_grid(h, y=1.0):
    return solve_classical_hjb_1d(LQ_BOX, [y], -1.0, 2.0, int(round(3.0 / h)) + 1,
                                  theta_grid_1d(-1.0, 1.0, int(round(2.0 / h)) + 1),
                                  TimeGrid(1.0, int(round(1.0 / h))))


def test_07_hjb_single_atom():
    t = time.perf_counter()
    hs = (0.04, 0.02, 0.01)
    errs = [abs(float(_lq_value_grid(h).value(0.0, 0.0)) - 0.25) for h in hs]
    order = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    ok = errs[-1] <= 2e-3 and 0.8 <= order <= 1.2
    record(7, "HJB single-atom reduction", ok,
           f"|v(0,0)-0.25| {errs[-1]:.2e} <= 2e-3, observed order {order:.2f}",
           time.perf_counter() - t, 120)


def _mismatch(h, y):
    vg = _lq_value_grid(h, y)
    sol = msa_solve(LQ_BOX, PopulationSpec([[0.0]], [[y]], [1.0]),
                    ControlPath.constant(vg.grid, 0.0), SolverConfig(tol=1e-12))
    return costate_consistency(LQ_BOX, sol, vg)


def test_08_costate_characteristics():
    t = time.perf_counter()
    hs = (0.04, 0.02, 0.01)
    desk = [_mismatch(h, 1.0) for h in hs]
    # the desk trajectory runs through grid nodes, so its mismatch is at rounding
    # level; the decrease is observed on an off-node target
    off = [_mismatch(h, 0.77) for h in hs]
    bound_ok = all(m <= 5 * h for m, h in zip(desk + off, hs + hs))
    decreasing = all(b < a for a, b in zip(off, off[1:])) and max(desk) <= 1e-12
    record(8, "costate/characteristics", bound_ok and decreasing,
           f"desk max {max(desk):.1e}, off-node {off[0]:.1e}->{off[1]:.1e}->{off[2]:.1e}",
           time.perf_counter() - t, 60)


def test_09_small_time_uniqueness():
    t = time.perf_counter()
    cfg = uniqueness_config(overrides={"study": {"t_list": [0.1], "init_count": 10}})
    res = run_uniqueness_study(cfg)
    ok = res.all_converged[0.1] and res.max_dist[0.1] <= 1e-6
    record(9, "small-time uniqueness", ok,
           f"max pairwise {res.max_dist[0.1]:.1e} <= 1e-6, all converged "
           f"{res.all_converged[0.1]}", time.perf_counter() - t, 60)


def test_10_sampled_convergence():
    t = time.perf_counter()
    res = run_convergence_study(load_config())
    ns = sorted(res.loss_gap_medians)
    gaps = [res.loss_gap_medians[n] for n in ns]
    monotone = all(b <= a for a, b in zip(gaps, gaps[1:]))
    slope_ok = res.slope is not None and -0.65 <= res.slope <= -0.35
    record(10, "sampled -> mean-field", slope_ok and monotone and res.excluded == 0,
           f"slope {res.slope:.3f} in [-0.65,-0.35], loss-gap medians non-increasing "
           f"{monotone} ({', '.join(f'{g:.2e}' for g in gaps)})",
           time.perf_counter() - t, 600)


def test_11_hessian_concavity():
    t = time.perf_counter()
    ok = True
    worst = []
    for lam, d in ((0.5, 1), (1.0, 1), (0.1, 2)):
        model = tanh_bilinear(lam, d)
        spec = tanh_desk_population_1d() if d == 1 else PopulationSpec(
            [[1.0, 0.0], [-1.0, 0.5]], [[2.0, -1.0], [-1.0, 1.0]], [0.5, 0.5])
        sol = msa_solve(model, spec, ControlPath.constant(TimeGrid(1.0, 20), np.zeros(d * d)))
        rep = hessian_check(model, sol, 2 * lam * (1 - 1e-12))
        ok = ok and sol.converged and rep.passed
        worst.append(rep.worst_eigenvalue)
    record(11, "Hessian concavity", ok, f"worst eigenvalues {worst}", time.perf_counter() - t, 5)


def test_12_determinism(tmp_path):
    t = time.perf_counter()
    bodies = []
    for i, threads in enumerate((1, 4, 1, 4)):
        out = tmp_path / f"run{i}"
        code = main(["validate", "--out", str(out), "--threads", str(threads)])
        assert code == 0
        bodies.append((out / "validate.csv").read_bytes())
    ok = all(b == bodies[0] for b in bodies)
    record(12, "determinism", ok, "validate.csv bit-identical for threads {1,4}, repeated",
           time.perf_counter() - t)
