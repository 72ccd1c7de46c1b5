"""Registered invariant checks run by ``mfpmp validate``.

Each check builds its own problem with fixed seeds and tolerances, so the
outcome does not depend on the user config; the config is only echoed in
the manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .hjb import (CoarseControls, costate_consistency, dpp_check, solve_classical_hjb_1d,
                  theta_grid_1d)
from .models import constant_drive, linear_scalar, tanh_bilinear
from .ode import ControlPath, TimeGrid, restart_consistency
from .pmp import (SolverConfig, adjoint_gradient, hamiltonian_constancy, hessian_check,
                  loss, loss_batch, msa_solve)
from .population import (EmpiricalMeasure, PopulationSpec, chain_rule_probe,
                         wasserstein2, wasserstein2_bruteforce)

FAULTS = ("gradient_sign",)


@dataclass(frozen=True)
class CheckResult:
    name: str
    tolerance: float
    observed: float
    passed: bool

    def row(self):
        return (self.name, self.tolerance, self.observed, self.passed)


def lq_population() -> PopulationSpec:
    return PopulationSpec([[0.0]], [[1.0]], [1.0])


def tanh_desk_population_1d() -> PopulationSpec:
    return PopulationSpec([[1.0], [-1.0]], [[2.0], [-2.0]], [0.5, 0.5])


def tanh_desk_population_2d() -> PopulationSpec:
    return PopulationSpec([[1.0, 0.0], [-1.0, 0.5], [0.5, -1.0]],
                          [[2.0, -1.0], [-1.0, 1.0], [0.0, -2.0]], [0.4, 0.3, 0.3])


def gradient_models():
    """Built-in models with populations for the gradient identity."""
    return [
        (tanh_bilinear(0.1, 2), tanh_desk_population_2d()),
        (linear_scalar(), PopulationSpec([[1.0], [0.5]], [[0.0], [2.0]], [0.5, 0.5])),
        (constant_drive(0.5, 2), PopulationSpec([[0.0, 0.0], [1.0, -1.0]],
                                                [[1.0, 0.5], [0.0, 0.0]], [0.5, 0.5])),
    ]


def fd_gradient(model, pop, ctrl: ControlPath, eps: float) -> np.ndarray:
    """Central differences of the loss in every interval value, per unit time."""
    n, m = ctrl.values.shape
    k = n * m
    pert = np.repeat(ctrl.values[:, None, :], 2 * k, axis=1)
    for j in range(k):
        i, a = divmod(j, m)
        pert[i, 2 * j, a] += eps
        pert[i, 2 * j + 1, a] -= eps
    vals = loss_batch(model, pop, pert, ctrl.grid)
    return ((vals[0::2] - vals[1::2]) / (2 * eps)).reshape(n, m) / ctrl.grid.dt


def relative_gradient_error(adj: np.ndarray, fd: np.ndarray, floor: float = 1e-2) -> float:
    """Max componentwise relative error.

    Components smaller than ``floor`` times the largest one are measured
    against that scale instead of their own magnitude.
    """
    scale = np.maximum(np.abs(fd), floor * np.max(np.abs(fd)))
    return float(np.max(np.abs(adj - fd) / scale))


def check_gradient_identity(n_controls=5, n_steps=200, seed=11, fault=None):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for model, pop in gradient_models():
        grid = TimeGrid(1.0, n_steps)
        for _ in range(n_controls):
            ctrl = ControlPath(grid, rng.uniform(-1.0, 1.0, (n_steps, model.m)))
            adj = adjoint_gradient(model, pop, ctrl)
            if fault == "gradient_sign":
                adj = -adj
            worst = max(worst, relative_gradient_error(adj, fd_gradient(model, pop, ctrl, 1e-5)))
    return CheckResult("gradient_identity", 1e-5, worst, worst <= 1e-5)


def check_lq_closed_form():
    model = constant_drive(0.5)
    grid = TimeGrid(1.0, 20)
    sol = msa_solve(model, lq_population(), ControlPath.constant(grid, [0.0]),
                    SolverConfig(tol=1e-12))
    err = max(float(np.max(np.abs(sol.control.values - 0.5))),
              abs(loss(model, lq_population(), sol.control) - 0.25))
    return CheckResult("lq_closed_form", 1e-8, err, sol.converged and err <= 1e-8)


def check_hamiltonian_constancy(n_steps=250):
    """Spread at ``n_steps`` and its reduction factor when the grid is doubled."""
    model = tanh_bilinear(0.1, 2)
    pop = tanh_desk_population_2d()
    spreads = []
    for n in (n_steps, 2 * n_steps):
        sol = msa_solve(model, pop, ControlPath.constant(TimeGrid(1.0, n), np.zeros(4)),
                        SolverConfig(tol=1e-10, damping=1.0))
        spreads.append(hamiltonian_constancy(model, sol))
    ratio = spreads[0] / spreads[1] if spreads[1] > 0 else math.inf
    return [CheckResult("hamiltonian_spread", 1e-3, spreads[0], spreads[0] <= 1e-3),
            CheckResult("hamiltonian_spread_refinement_factor", 1.8, ratio, ratio >= 1.8)]


def check_restart(seed=5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for model, pop in gradient_models():
        grid = TimeGrid(1.0, 40)
        ctrl = ControlPath(grid, rng.uniform(-1.0, 1.0, (40, model.m)))
        for k in range(41):
            worst = max(worst, restart_consistency(model, pop.x0, ctrl, k))
    return CheckResult("restart_consistency", 0.0, worst, worst == 0.0)


def check_w2(n_instances=200, seed=3):
    rng = np.random.default_rng(seed)
    worst_match = 0.0
    worst_axiom = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 7))
        a, b, c = (EmpiricalMeasure(rng.normal(size=(n, 1)), rng.normal(size=(n, 1)))
                   for _ in range(3))
        ab, ba = wasserstein2(a, b), wasserstein2(b, a)
        bc, ac = wasserstein2(b, c), wasserstein2(a, c)
        worst_match = max(worst_match, abs(ab - wasserstein2_bruteforce(a, b)))
        worst_axiom = max(worst_axiom, abs(ab - ba), max(0.0, ac - ab - bc), max(0.0, -ab),
                          wasserstein2(a, a))
    return [CheckResult("w2_bruteforce", 0.0, worst_match, worst_match == 0.0),
            CheckResult("w2_axioms", 1e-12, worst_axiom, worst_axiom <= 1e-12)]


def check_chain_rule():
    model = constant_drive(0.5)
    pop = PopulationSpec([[0.0], [1.0]], [[1.0], [0.0]], [0.5, 0.5])
    ctrl = ControlPath.constant(TimeGrid(1.0, 50), [0.7])
    defect = chain_rule_probe(model, pop, ctrl, lambda w: w[:, 0],
                              lambda w: np.column_stack([np.ones(len(w)), np.zeros(len(w))]))
    return CheckResult("chain_rule_linear", 1e-10, defect, defect <= 1e-10)


def check_dpp():
    model = constant_drive(0.5, theta_box=(-1.0, 1.0))
    coarse = CoarseControls(TimeGrid(1.0, 20), 2, theta_grid_1d(-1.0, 1.0, 101))
    r = dpp_check(model, lq_population(), 0.0, 0.5, coarse).residual
    return CheckResult("dpp_residual", 1e-3, r, r <= 1e-3)


def check_hjb_and_costate(h=0.02):
    model = constant_drive(0.5, theta_box=(-1.0, 1.0))
    n = int(round(1.0 / h))
    grid = TimeGrid(1.0, n)
    vg = solve_classical_hjb_1d(model, [1.0], -1.0, 2.0, int(round(3.0 / h)) + 1,
                                theta_grid_1d(-1.0, 1.0, int(round(2.0 / h)) + 1), grid)
    err = abs(float(vg.value(0.0, 0.0)) - 0.25)
    sol = msa_solve(model, lq_population(), ControlPath.constant(grid, [0.0]))
    mis = costate_consistency(model, sol, vg)
    return [CheckResult("hjb_value_lq", 2e-3 * h / 0.01, err, err <= 2e-3 * h / 0.01),
            CheckResult("costate_value_gradient", 5 * h, mis, mis <= 5 * h)]


def check_hessian():
    model = tanh_bilinear(0.5, 1)
    rep = hessian_check(model, None, 2 * 0.5 * (1 - 1e-12))
    return CheckResult("hessian_concavity", -2 * 0.5 * (1 - 1e-12), rep.worst_eigenvalue,
                       rep.passed)


REGISTRY: list[tuple[str, Callable]] = [
    ("gradient_identity", check_gradient_identity),
    ("lq_closed_form", check_lq_closed_form),
    ("hamiltonian_constancy", check_hamiltonian_constancy),
    ("restart_consistency", check_restart),
    ("w2", check_w2),
    ("chain_rule", check_chain_rule),
    ("dpp", check_dpp),
    ("hjb_costate", check_hjb_and_costate),
    ("hessian", check_hessian),
]


def run_validation_suite(threads: int = 1, fault: Optional[str] = None) -> list[CheckResult]:
    """Run every registered check; results are returned in registry order."""
    from .experiments import run_jobs

    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; known: {FAULTS}")

    def run(entry):
        name, fn = entry
        out = fn(fault=fault) if name == "gradient_identity" else fn()
        return out if isinstance(out, list) else [out]

    results = []
    for group in run_jobs(run, REGISTRY, threads):
        results.extend(group)
    return results
