"""Dynamic-programming checks at desk scale.

* a semi-Lagrangian grid solver for the HJB equation when the population
  is a single atom in one dimension;
* brute-force value functions and DPP residuals for populations of a few
  atoms, by enumerating piecewise-constant controls on coarse blocks;
* consistency of the PMP costate with the value-function gradient, and
  Lipschitz ratios of the value function in (t, W2).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .models import ModelSpec
from .ode import TimeGrid, interval_map
from .pmp import PMPSolution, as_samples, loss_batch
from .population import (EmpiricalMeasure, PopulationSpec, WeightedSamples,
                         wasserstein2)

MAX_COMBINATIONS = 10 ** 6
MAX_REPLICAS = 64
_CHUNK = 20000


class DomainTooSmallError(ValueError):
    pass


class CombinatorialBudgetError(ValueError):
    def __init__(self, count: int):
        super().__init__(f"{count} control combinations exceed the budget of {MAX_COMBINATIONS}")
        self.count = count


def interp_monotone(xg: np.ndarray, v: np.ndarray, xq: np.ndarray) -> np.ndarray:
    """Linear interpolation on a uniform grid, constant beyond the ends.

    Written as a convex combination clipped to the bracketing values, so it
    is exactly monotone in ``v`` and never leaves ``[min v, max v]`` under
    floating-point rounding.
    """
    h = (xg[-1] - xg[0]) / (xg.size - 1)
    s = np.clip((xq - xg[0]) / h, 0.0, xg.size - 1)
    # feet that land on a node up to rounding read that node exactly
    r = np.rint(s)
    s = np.where(np.abs(s - r) <= 8 * np.finfo(float).eps * np.maximum(r, 1.0), r, s)
    j = np.minimum(np.floor(s).astype(int), xg.size - 2)
    a = s - j
    left, right = v[j], v[j + 1]
    out = (1.0 - a) * left + a * right
    return np.clip(out, np.minimum(left, right), np.maximum(left, right))


@dataclass(frozen=True)
class ValueGrid:
    grid: TimeGrid
    x: np.ndarray
    values: np.ndarray  # (n_steps + 1, n_x)
    theta_grid: np.ndarray  # (n_theta, m)
    policy: np.ndarray  # argmin theta index, (n_steps, n_x)
    y: np.ndarray

    @property
    def hx(self) -> float:
        return (self.x[-1] - self.x[0]) / (self.x.size - 1)

    def value(self, t: float, xq) -> np.ndarray:
        return self._time_interp(self.values, t, xq)

    def grad_x(self, t: float, xq) -> np.ndarray:
        """Central-difference ``dv/dx`` at interior nodes, interpolated in x and t."""
        d = (self.values[:, 2:] - self.values[:, :-2]) / (2.0 * self.hx)
        return self._time_interp(d, t, xq, self.x[1:-1])

    def feedback(self, k: int, xq) -> np.ndarray:
        """Grid argmin policy at time slice ``k`` (nearest x node)."""
        j = np.clip(np.rint((np.asarray(xq) - self.x[0]) / self.hx).astype(int), 0, self.x.size - 1)
        return self.theta_grid[self.policy[k, j]]

    def _time_interp(self, table, t, xq, xg=None):
        xg = self.x if xg is None else xg
        xq = np.asarray(xq, dtype=float)
        s = t / self.grid.dt
        k = int(min(max(math.floor(s), 0), self.grid.n_steps - 1))
        a = s - k
        lo = np.interp(xq, xg, table[k])
        hi = np.interp(xq, xg, table[k + 1])
        return (1.0 - a) * lo + a * hi

    def to_rows(self):
        for k, t in enumerate(self.grid.times):
            for j, xv in enumerate(self.x):
                yield (repr(float(t)), repr(float(xv)), repr(float(self.values[k, j])))


def theta_grid_1d(lo: float, hi: float, n: int) -> np.ndarray:
    return np.linspace(lo, hi, n)[:, None]


def solve_classical_hjb_1d(model: ModelSpec, y, x_lo: float, x_hi: float, x_nodes: int,
                           theta_values: np.ndarray, grid: TimeGrid) -> ValueGrid:
    """Backward semi-Lagrangian induction for the single-atom value function.

    ``v(t_k, x) = min_theta [L(x, theta) dt + v(t_{k+1}, x + f(x, theta) dt)]``
    with ``v(T, x) = Phi(x, y)``.
    """
    if model.d != 1:
        raise ValueError("grid solver is one-dimensional")
    theta_values = np.atleast_2d(np.asarray(theta_values, dtype=float))
    if theta_values.shape[-1] != model.m:
        theta_values = theta_values.reshape(-1, model.m)
    if model.boxed and not model.contains(theta_values):
        raise ValueError("theta grid leaves the control box")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = np.linspace(x_lo, x_hi, x_nodes)
    hx = (x_hi - x_lo) / (x_nodes - 1)
    dt = grid.dt
    n = grid.n_steps
    X = x[:, None, None]
    TH = theta_values[None, :, :]
    values = np.empty((n + 1, x.size))
    policy = np.empty((n, x.size), dtype=int)
    values[n] = model.phi(x[:, None], y)
    run = model.L(X, TH) * dt
    slack = 1e-12 * max(1.0, abs(x_lo), abs(x_hi))
    for k in range(n - 1, -1, -1):
        foot = interval_map(model, X, TH, dt, grid.substeps)[..., 0]
        bad = (foot < x_lo - hx - slack) | (foot > x_hi + hx + slack)
        if np.any(bad):
            j, i = np.argwhere(bad)[0]
            raise DomainTooSmallError(
                f"characteristic foot {foot[j, i]:.6g} leaves the domain at "
                f"t={grid.times[k]:.6g}, x={x[j]:.6g}, theta={theta_values[i]}")
        cand = run + interp_monotone(x, values[k + 1], foot)
        policy[k] = np.argmin(cand, axis=1)
        values[k] = np.take_along_axis(cand, policy[k][:, None], axis=1)[:, 0]
    return ValueGrid(grid, x, values, theta_values, policy, y)


@dataclass(frozen=True)
class CoarseControls:
    """Piecewise-constant controls on ``n_blocks`` equal blocks of ``grid``.

    Blocks are fixed on ``[0, T]``; a search started at node ``k`` uses the
    blocks that meet ``[t_k, T]`` (the first one possibly truncated).
    """

    grid: TimeGrid
    n_blocks: int
    theta_values: np.ndarray

    def __post_init__(self):
        if self.grid.n_steps % self.n_blocks:
            raise ValueError("n_steps must be a multiple of n_blocks")
        object.__setattr__(self, "theta_values",
                           np.atleast_2d(np.asarray(self.theta_values, dtype=float)))

    @property
    def block_len(self) -> int:
        return self.grid.n_steps // self.n_blocks

    def blocks_between(self, k0: int, k1: int) -> list[tuple[int, int]]:
        """Block pieces ``[a, b)`` (node indices) covering ``[k0, k1)``."""
        out = []
        a = k0
        while a < k1:
            b = min((a // self.block_len + 1) * self.block_len, k1)
            out.append((a, b))
            a = b
        return out

    def count(self, k0: int, k1: int) -> int:
        return self.theta_values.shape[0] ** len(self.blocks_between(k0, k1))

    def enumerate(self, k0: int, k1: int):
        """Yield control stacks ``(k1 - k0, batch, m)`` in chunks."""
        pieces = self.blocks_between(k0, k1)
        nth = self.theta_values.shape[0]
        total = nth ** len(pieces)
        if total > MAX_COMBINATIONS:
            raise CombinatorialBudgetError(total)
        lengths = [b - a for a, b in pieces]
        for start in range(0, total, _CHUNK):
            idx = np.arange(start, min(start + _CHUNK, total))
            digits = []
            for _ in pieces:
                digits.append(idx % nth)
                idx = idx // nth
            digits = digits[::-1]  # first block is the most significant digit
            cols = [np.repeat(self.theta_values[dg][None], ln, axis=0)
                    for dg, ln in zip(digits, lengths)]
            yield np.concatenate(cols, axis=0) if cols else np.zeros((0, 0, self.theta_values.shape[1]))


def _node(grid: TimeGrid, t) -> int:
    k = int(round(t / grid.dt))
    if not 0 <= k <= grid.n_steps or abs(k * grid.dt - t) > 1e-9 * grid.T:
        raise ValueError(f"time {t} is not a node of the search grid")
    return k


def value_by_search(model: ModelSpec, spec, t_start: float, coarse: CoarseControls) -> float:
    """Minimum objective over every enumerated coarse control from ``t_start``."""
    samples = as_samples(spec)
    k0 = _node(coarse.grid, t_start)
    n = coarse.grid.n_steps
    if k0 == n:
        return float(samples.mean(model.phi(samples.x0, samples.y0)))
    best = math.inf
    window = coarse.grid.window(k0)
    for thetas in coarse.enumerate(k0, n):
        best = min(best, float(np.min(loss_batch(model, samples, thetas, window))))
    return best


@dataclass(frozen=True)
class DPPReport:
    t: float
    t_hat: float
    rhs_candidates: np.ndarray
    v_left: float
    best_rhs: float

    @property
    def residual(self) -> float:
        return abs(self.v_left - self.best_rhs)


def dpp_check(model: ModelSpec, spec, t: float, t_hat: float, coarse: CoarseControls,
              rhs_coarse: Optional[CoarseControls] = None) -> DPPReport:
    """Compare ``v(t)`` with ``min [running cost on [t, t_hat] + v(t_hat, propagated)]``.

    ``rhs_coarse`` overrides the control family used after ``t_hat``.
    """
    if not 0 <= t <= t_hat <= coarse.grid.T + 1e-12:
        raise ValueError("need 0 <= t <= t_hat <= T")
    samples = as_samples(spec)
    rhs_coarse = coarse if rhs_coarse is None else rhs_coarse
    grid = coarse.grid
    k0, k1 = _node(grid, t), _node(grid, t_hat)
    v_left = value_by_search(model, samples, t, coarse)
    if k0 == k1:
        cands = np.array([0.0 + value_by_search(model, samples, t_hat, rhs_coarse)])
        return DPPReport(t, t_hat, cands, v_left, float(cands[0]))
    cands = []
    for thetas in coarse.enumerate(k0, k1):
        for b in range(thetas.shape[1]):
            x = samples.x0
            running = np.zeros(len(samples))
            for k in range(k1 - k0):
                running = running + model.L(x, thetas[k, b]) * grid.dt
                x = interval_map(model, x, thetas[k, b], grid.dt, grid.substeps)
            moved = WeightedSamples(x, samples.y0, samples.weights)
            cost = float(samples.mean(running))
            cands.append(cost + value_by_search(model, moved, t_hat, rhs_coarse))
    cands = np.array(cands)
    return DPPReport(t, t_hat, cands, v_left, float(np.min(cands)))


def costate_consistency(model: ModelSpec, solution: PMPSolution, vgrid: ValueGrid) -> float:
    """``max_k |p_k + dv/dx(t_k, x_k)|`` along a single-atom PMP trajectory."""
    if model.d != 1 or len(solution.samples) != 1:
        raise ValueError("costate consistency needs a single atom in one dimension")
    xs = solution.sweep.states.nodes[:, 0, 0]
    ps = solution.sweep.costates.nodes[:, 0, 0]
    hx = vgrid.hx
    if np.any(xs < vgrid.x[0] + hx) or np.any(xs > vgrid.x[-1] - hx):
        raise DomainTooSmallError("PMP trajectory leaves the interior of the value grid")
    times = solution.control.grid.times
    mismatch = [abs(p + float(vgrid.grad_x(t, xv))) for t, xv, p in zip(times, xs, ps)]
    return float(max(mismatch))


def split_to_replicas(specs: Sequence[PopulationSpec]) -> list[EmpiricalMeasure]:
    """Turn finite-support measures into equal-size uniform point clouds.

    Every weight is written over the common denominator (at most 64) and
    the atom repeated that many times.
    """
    fracs = []
    for spec in specs:
        fr = [Fraction(float(w)).limit_denominator(MAX_REPLICAS) for w in spec.weights]
        if any(abs(float(f) - w) > 1e-12 for f, w in zip(fr, spec.weights)):
            raise ValueError(f"weights {spec.weights} need more than {MAX_REPLICAS} replicas")
        fracs.append(fr)
    lcm = 1
    for fr in fracs:
        for f in fr:
            lcm = lcm * f.denominator // math.gcd(lcm, f.denominator)
    if lcm > MAX_REPLICAS:
        raise ValueError(f"common denominator {lcm} exceeds {MAX_REPLICAS}")
    out = []
    for spec, fr in zip(specs, fracs):
        reps = [int(f * lcm) for f in fr]
        idx = np.repeat(np.arange(spec.n_atoms), reps)
        out.append(EmpiricalMeasure(spec.x0[idx], spec.y0[idx]))
    return out


def lipschitz_probe(model: ModelSpec, pairs, coarse: CoarseControls) -> float:
    """Max of ``|v(t, mu) - v(s, nu)| / (|t - s| + W2(mu, nu))`` over scenario pairs.

    Each pair is ``((t, spec), (s, spec'))``; identical pairs are skipped.
    """
    best = 0.0
    cache: dict = {}

    def value(t, spec):
        key = (t, id(spec))
        if key not in cache:
            cache[key] = value_by_search(model, spec, t, coarse)
        return cache[key]

    for (t, mu), (s, nu) in pairs:
        a, b = split_to_replicas([mu, nu])
        den = abs(t - s) + wasserstein2(a, b)
        if den == 0.0:
            continue
        best = max(best, abs(value(t, mu) - value(s, nu)) / den)
    return best


def standard_probe_pairs(T: float, y: float = 1.0):
    """Scenario pairs used by the LQ Lipschitz regression check."""
    def atom(x):
        return PopulationSpec([[x]], [[y]], [1.0])
    two = PopulationSpec([[-0.25], [0.25]], [[y], [y]], [0.5, 0.5])
    pts = [(0.0, atom(0.0)), (0.0, atom(0.25)), (0.0, atom(-0.5)),
           (0.5 * T, atom(0.0)), (0.5 * T, atom(0.5)), (0.0, two), (0.5 * T, two)]
    return list(itertools.combinations(pts, 2))
