"""Successive-approximation solver for the sampled / finite-support mean-field PMP.

The residual of a control path is the averaged parameter gradient of the
Hamiltonian on each control interval.  It is computed from the discrete
adjoint of the RK4 sweep, so ``-residual * dt`` is exactly the gradient of
the discrete loss and the MSA fixed points coincide with its zeros.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import ModelSpec, argmax_hamiltonian_quadratic, hamiltonian
from .ode import (ControlPath, CostatePath, StatePath, TimeGrid, _check_finite,
                  integrate_costate, integrate_state, interval_map, interval_vjp)
from .population import EmptySampleError, WeightedSamples

logger = logging.getLogger(__name__)

MAXIMIZERS = ("closed_form_quadratic", "projected_gradient")
MIN_DAMPING = 1e-12


class UnsupportedModelError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 500
    tol: float = 1e-10
    damping: float = 0.5
    maximizer: str = "closed_form_quadratic"
    inner_iters: int = 50
    inner_step: float = 0.1

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.maximizer not in MAXIMIZERS:
            raise ValueError(f"unknown maximizer {self.maximizer!r}")

    @classmethod
    def from_config(cls, cfg: dict) -> "SolverConfig":
        kw = {}
        for key, cast in (("max_iter", int), ("tol", float), ("damping", float),
                          ("maximizer", str), ("inner_iters", int), ("inner_step", float)):
            if key in cfg:
                kw[key] = cast(cfg[key])
        return cls(**kw)


@dataclass(frozen=True)
class TrajectoryBundle:
    x0: np.ndarray
    y0: np.ndarray
    states: StatePath
    costates: CostatePath


@dataclass(frozen=True)
class Sweep:
    """Forward and backward sweeps for all samples (sample axis = 1)."""

    states: StatePath
    costates: CostatePath


@dataclass
class PMPSolution:
    control: ControlPath
    samples: WeightedSamples
    sweep: Sweep
    residual_history: list = field(default_factory=list)
    converged: bool = False

    @property
    def residual(self) -> float:
        return self.residual_history[-1]

    @property
    def bundles(self) -> list[TrajectoryBundle]:
        grid = self.control.grid
        st, co = self.sweep.states, self.sweep.costates
        return [TrajectoryBundle(self.samples.x0[i], self.samples.y0[i],
                                 StatePath(grid, st.nodes[:, i]),
                                 CostatePath(grid, co.nodes[:, i], co.theta_sens[:, i]))
                for i in range(len(self.samples))]


def as_samples(obj) -> WeightedSamples:
    if isinstance(obj, WeightedSamples):
        return obj
    if hasattr(obj, "as_samples"):
        return obj.as_samples()
    raise TypeError(f"cannot interpret {type(obj).__name__} as weighted samples")


def sweep(model: ModelSpec, samples, ctrl: ControlPath) -> Sweep:
    samples = as_samples(samples)
    states = integrate_state(model, samples.x0, ctrl)
    costates = integrate_costate(model, states, samples.y0, ctrl)
    return Sweep(states, costates)


def _raw_residual(model: ModelSpec, samples: WeightedSamples, ctrl: ControlPath,
                  sw: Sweep) -> np.ndarray:
    xs = sw.states.nodes[:-1]
    theta = ctrl.values[:, None, :]
    per_sample = sw.costates.theta_sens - model.L_theta(xs, theta)
    return np.stack([samples.mean(per_sample[k]) for k in range(per_sample.shape[0])])


def _project_residual(model: ModelSpec, ctrl: ControlPath, raw: np.ndarray) -> np.ndarray:
    if not model.boxed:
        return raw
    return ctrl.values - model.project(ctrl.values + raw)


def _sup(path: np.ndarray) -> float:
    return float(np.max(np.linalg.norm(path, axis=-1)))


def pmp_residual(model: ModelSpec, samples, ctrl: ControlPath,
                 sw: Optional[Sweep] = None) -> tuple[np.ndarray, float]:
    """Residual path ``F_k`` (one row per control interval) and its sup norm.

    For a boxed control set the projected residual
    ``theta - clamp(theta + F)`` is returned instead.
    """
    samples = as_samples(samples)
    sw = sweep(model, samples, ctrl) if sw is None else sw
    res = _project_residual(model, ctrl, _raw_residual(model, samples, ctrl, sw))
    return res, _sup(res)


def adjoint_gradient(model: ModelSpec, samples, ctrl: ControlPath) -> np.ndarray:
    """Gradient of the loss w.r.t. each interval value, per unit time (``-F``)."""
    samples = as_samples(samples)
    return -_raw_residual(model, samples, ctrl, sweep(model, samples, ctrl))


def loss_batch(model: ModelSpec, samples, thetas: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Loss for a stack of controls.

    ``thetas`` has shape ``(n_intervals, *batch, m)``; the result has shape
    ``batch``.  Running cost uses left-endpoint quadrature.
    """
    samples = as_samples(samples)
    if len(samples) == 0:
        raise EmptySampleError("loss needs at least one sample")
    thetas = np.asarray(thetas, dtype=float)
    th = thetas[..., None, :]  # sample axis just before m
    dt = grid.dt
    x = samples.x0
    running = 0.0
    for k in range(th.shape[0]):
        running = running + model.L(x, th[k]) * dt
        x = interval_map(model, x, th[k], dt, grid.substeps)
        _check_finite(x, k)
    per_sample = model.phi(x, samples.y0) + running
    per_sample = np.broadcast_to(
        per_sample, np.broadcast_shapes(per_sample.shape, th.shape[1:-2] + (len(samples),)))
    return samples.mean(np.moveaxis(per_sample, -1, 0))


def loss(model: ModelSpec, samples, ctrl: ControlPath) -> float:
    return float(loss_batch(model, samples, ctrl.values, ctrl.grid))


def _discrete_theta_grad(model, xs, ps_next, theta, grid, samples):
    """Averaged ``d/dtheta`` of the one-interval discrete Hamiltonian, all intervals."""
    _, tb = interval_vjp(model, xs, theta, grid.dt, grid.substeps, ps_next)
    per_sample = tb / grid.dt - model.L_theta(xs, theta)
    return np.stack([samples.mean(per_sample[k]) for k in range(per_sample.shape[0])])


def maximize_hamiltonian(model: ModelSpec, samples: WeightedSamples, ctrl: ControlPath,
                         sw: Sweep, cfg: SolverConfig) -> np.ndarray:
    """Interval-wise maximiser of the averaged Hamiltonian given the current sweeps."""
    if cfg.maximizer == "closed_form_quadratic":
        lam = model.quadratic_weight
        if lam is None:
            raise UnsupportedModelError(f"{model.name} has no closed-form Hamiltonian maximiser")
        g = np.stack([samples.mean(sw.costates.theta_sens[k])
                      for k in range(ctrl.grid.n_intervals)])
        return argmax_hamiltonian_quadratic(g, lam, model.theta_lo, model.theta_hi)
    xs = sw.states.nodes[:-1]
    ps = sw.costates.nodes[1:]
    theta = ctrl.values.copy()
    for _ in range(cfg.inner_iters):
        g = _discrete_theta_grad(model, xs, ps, theta[:, None, :], ctrl.grid, samples)
        theta = model.project(theta + cfg.inner_step * g)
    return theta


def msa_solve(model: ModelSpec, samples, ctrl0: ControlPath,
              cfg: SolverConfig = SolverConfig()) -> PMPSolution:
    """Damped method of successive approximations.

    Each iteration moves ``theta <- (1 - beta) theta + beta argmax H``.  A
    move that fails to lower the sup-norm residual is rejected and ``beta``
    halved; plain MSA otherwise cycles on problems where the maximisation
    map has slope -1.  Returns the accepted iterate, with ``converged`` set
    once the residual drops to ``cfg.tol``.
    """
    samples = as_samples(samples)
    if not model.contains(ctrl0.values):
        raise ValueError("initial control lies outside the control set")
    ctrl = ctrl0
    sw = sweep(model, samples, ctrl)
    r = pmp_residual(model, samples, ctrl, sw)[1]
    history: list[float] = [r]
    beta = cfg.damping
    target = None
    for it in range(cfg.max_iter):
        if r <= cfg.tol:
            logger.debug("msa converged after %d iterations, residual %.3e", it, r)
            return PMPSolution(ctrl, samples, sw, history, True)
        if target is None:
            target = maximize_hamiltonian(model, samples, ctrl, sw, cfg)
        new = target if beta == 1.0 else (1.0 - beta) * ctrl.values + beta * target
        cand = ControlPath(ctrl.grid, new)
        cand_sw = sweep(model, samples, cand)
        cand_r = pmp_residual(model, samples, cand, cand_sw)[1]
        history.append(cand_r)
        if cand_r < r:
            ctrl, sw, r, target = cand, cand_sw, cand_r, None
            continue
        beta *= 0.5
        if beta < MIN_DAMPING:
            break
    converged = r <= cfg.tol
    if not converged:
        logger.info("msa stopped after %d evaluations, residual %.3e", len(history), r)
    history.append(r)
    return PMPSolution(ctrl, samples, sw, history, converged)


def node_hamiltonians(model: ModelSpec, solution: PMPSolution) -> np.ndarray:
    """``E H(x_k, p_k, theta_k)`` at every node (last node reuses the last interval)."""
    xs = solution.sweep.states.nodes
    ps = solution.sweep.costates.nodes
    vals = solution.control.values
    out = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        theta = vals[min(k, vals.shape[0] - 1)]
        out[k] = solution.samples.mean(hamiltonian(model, xs[k], ps[k], theta))
    return out


def hamiltonian_constancy(model: ModelSpec, solution: PMPSolution) -> float:
    h = node_hamiltonians(model, solution)
    return float(np.max(h) - np.min(h))


@dataclass(frozen=True)
class HessianReport:
    passed: bool
    worst_eigenvalue: float


def hessian_check(model: ModelSpec, solution: Optional[PMPSolution], lam0: float) -> HessianReport:
    """Passes iff the averaged theta-Hessian of H is <= -lam0 at every node.

    Built-in models carry an exact constant Hessian, so the average over
    samples is the constant itself and no node-wise evaluation is needed.
    """
    if model.hess_theta_H is None:
        raise UnsupportedModelError(f"{model.name} exposes no theta-Hessian")
    worst = float(np.max(np.linalg.eigvalsh(model.hess_theta_H)))
    return HessianReport(worst <= -lam0, worst)


@dataclass(frozen=True)
class StabilityEstimate:
    stable: bool
    constant: float
    n_pairs: int


def estimate_stability_constant(model: ModelSpec, samples, theta_star: ControlPath,
                                rho: float, n_pairs: int, seed: int,
                                constant_direction: bool = True) -> StabilityEstimate:
    """Lower estimate of ``sup |y - z|_inf / |F(y) - F(z)|_inf`` near ``theta_star``.

    Probe pairs are uniform box perturbations of radius ``rho`` per interval,
    clamped to the control set.  With ``constant_direction`` the first pair
    is the time-constant shift ``theta_star +- rho/2``.
    """
    if not rho > 0 or n_pairs < 1:
        raise ValueError("rho must be positive and n_pairs >= 1")
    samples = as_samples(samples)
    rng = np.random.default_rng(seed)
    base = theta_star.values
    grid = theta_star.grid

    def residual(values):
        return pmp_residual(model, samples, ControlPath(grid, values))[0]

    ratios = []
    stable = True
    made = 0
    while made < n_pairs:
        if constant_direction and made == 0:
            y = model.project(base + 0.5 * rho)
            z = model.project(base - 0.5 * rho)
        else:
            y = model.project(base + rng.uniform(-rho, rho, base.shape))
            z = model.project(base + rng.uniform(-rho, rho, base.shape))
        num = _sup(y - z)
        if num == 0.0:
            continue
        made += 1
        den = _sup(residual(y) - residual(z))
        if den < 1e-14:
            stable = False
            continue
        ratios.append(num / den)
    if not stable:
        return StabilityEstimate(False, float("inf"), made)
    return StabilityEstimate(True, float(max(ratios)), made)
