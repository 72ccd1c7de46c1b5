"""Finite-support input/target distributions and empirical measures."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

MAX_ASSIGNMENT_SIZE = 512


class EmptySampleError(ValueError):
    pass


class UnsupportedPairingError(ValueError):
    pass


def tree_sum(values: np.ndarray) -> np.ndarray:
    """Pairwise (fan-in 2) reduction over axis 0 in a fixed order.

    The association pattern depends only on the length, never on threading
    or BLAS internals.
    """
    a = np.asarray(values, dtype=float)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            a = np.concatenate([a, np.zeros((1,) + a.shape[1:])])
        a = a[0::2] + a[1::2]
    return a[0]


def _lexsort_rows(rows: np.ndarray) -> np.ndarray:
    return np.lexsort(rows.T[::-1])


@dataclass(frozen=True)
class WeightedSamples:
    """Atoms ``(x0, y0)`` with weights, stored in canonical (lexicographic) order.

    Canonical order makes every reduction independent of how the caller
    listed the samples.
    """

    x0: np.ndarray
    y0: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x0 = np.atleast_2d(np.asarray(self.x0, dtype=float))
        y0 = np.atleast_2d(np.asarray(self.y0, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if not (x0.shape[0] == y0.shape[0] == w.shape[0]):
            raise ValueError("x0, y0 and weights disagree on the number of samples")
        if x0.shape[0] == 0:
            raise EmptySampleError("no samples")
        order = _lexsort_rows(np.column_stack([x0, y0, w]))
        object.__setattr__(self, "x0", x0[order])
        object.__setattr__(self, "y0", y0[order])
        object.__setattr__(self, "weights", w[order])

    def __len__(self) -> int:
        return self.x0.shape[0]

    def mean(self, values) -> np.ndarray:
        """Weighted sum over the sample axis (axis 0 of ``values``)."""
        values = np.asarray(values, dtype=float)
        w = self.weights.reshape((-1,) + (1,) * (values.ndim - 1))
        return tree_sum(w * values)


@dataclass(frozen=True)
class PopulationSpec:
    x0: np.ndarray
    y0: np.ndarray
    weights: np.ndarray
    bound: float = math.inf

    def __post_init__(self):
        x0 = np.atleast_2d(np.asarray(self.x0, dtype=float))
        y0 = np.atleast_2d(np.asarray(self.y0, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if x0.shape[0] != y0.shape[0] or x0.shape[0] != w.shape[0] or w.size == 0:
            raise ValueError("atoms and weights must be nonempty and of equal count")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        total = math.fsum(w)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {total!r}, not 1")
        w = w / total
        size = np.linalg.norm(x0, axis=1) + np.linalg.norm(y0, axis=1)
        if np.any(size > self.bound):
            raise ValueError(f"atom outside the support bound {self.bound}")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_config(cls, cfg: dict) -> "PopulationSpec":
        atoms = cfg["atoms"]
        return cls(
            x0=[np.atleast_1d(a["x"]) for a in atoms],
            y0=[np.atleast_1d(a["y"]) for a in atoms],
            weights=[float(a["w"]) for a in atoms],
            bound=float(cfg.get("bound", math.inf)),
        )

    @property
    def n_atoms(self) -> int:
        return self.weights.size

    def as_samples(self) -> WeightedSamples:
        return WeightedSamples(self.x0, self.y0, self.weights)


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform-weight point cloud; ``points`` rows are concatenated ``(x, y)``.

    ``y`` may be omitted for plain point clouds.
    """

    x: np.ndarray
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        y = np.zeros((x.shape[0], 0)) if self.y is None else np.asarray(self.y, dtype=float)
        y = y[:, None] if y.ndim == 1 else y
        if x.shape[0] != y.shape[0]:
            raise ValueError("x and y disagree on the number of points")
        if x.shape[0] == 0:
            raise EmptySampleError("empirical measure needs at least one point")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("empirical measure has non-finite points")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def as_samples(self) -> WeightedSamples:
        n = len(self)
        return WeightedSamples(self.x, self.y, np.full(n, 1.0 / n))


def draw_indices(weights: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Categorical draws; draw ``i`` uses Philox output ``i`` under key ``seed``."""
    if n < 1:
        raise EmptySampleError("sample size must be at least 1")
    u = np.random.Generator(np.random.Philox(key=int(seed))).random(n)
    cdf = np.cumsum(weights)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, weights.size - 1)


def draw_samples(spec: PopulationSpec, n: int, seed: int) -> EmpiricalMeasure:
    idx = draw_indices(spec.weights, n, seed)
    return EmpiricalMeasure(spec.x0[idx], spec.y0[idx])


def wasserstein2(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """W2 between two uniform empirical measures of equal size."""
    pa, pb = a.points, b.points
    if pa.shape[0] != pb.shape[0]:
        raise UnsupportedPairingError(
            f"equal sample sizes required, got {pa.shape[0]} and {pb.shape[0]}")
    if pa.shape[1] != pb.shape[1]:
        raise UnsupportedPairingError("point dimensions differ")
    n = pa.shape[0]
    if pa.shape[1] == 1:
        cost = (np.sort(pa[:, 0]) - np.sort(pb[:, 0])) ** 2
    else:
        if n > MAX_ASSIGNMENT_SIZE:
            raise UnsupportedPairingError(f"assignment limited to N <= {MAX_ASSIGNMENT_SIZE}")
        c = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=-1)
        rows, cols = linear_sum_assignment(c)
        cost = c[rows, cols]
    return math.sqrt(math.fsum(cost) / n)


def wasserstein2_bruteforce(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Enumerates all N! matchings; reference implementation for small N."""
    pa, pb = a.points, b.points
    if pa.shape != pb.shape:
        raise UnsupportedPairingError("shapes differ")
    n = pa.shape[0]
    c = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=-1)
    best = min(math.fsum(c[i, s[i]] for i in range(n))
               for s in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def expect(spec: PopulationSpec, g: Callable[[np.ndarray, np.ndarray], object]):
    """Exact expectation ``sum_i w_i g(x_i, y_i)`` over the atoms.

    Atoms are visited in lexicographic order of ``(x, y, w)`` so the result
    does not depend on how the atoms were listed.
    """
    order = _lexsort_rows(np.column_stack([spec.x0, spec.y0, spec.weights]))
    total = 0.0
    for i in order:
        total = total + spec.weights[i] * np.asarray(g(spec.x0[i], spec.y0[i]), dtype=float)
    return total


def chain_rule_probe(model, spec: PopulationSpec, ctrl, psi, grad_psi) -> float:
    """Max defect of ``E psi(w_t) = E psi(w_0) + int_0^t E grad psi(w_s) . fbar(w_s) ds``.

    ``psi`` and ``grad_psi`` act on the concatenated variable ``w = (x, y)``;
    ``y`` does not move so only the first ``d`` components of the gradient
    enter.  The time integral uses the trapezoid rule on the control grid.
    """
    from .ode import integrate_state

    samples = spec.as_samples()
    xs = integrate_state(model, samples.x0, ctrl).nodes
    n = xs.shape[0] - 1

    def mean_psi(k):
        return samples.mean(np.asarray(psi(np.column_stack([xs[k], samples.y0])), dtype=float))

    def mean_drift(k, theta):
        w = np.column_stack([xs[k], samples.y0])
        g = np.asarray(grad_psi(w), dtype=float)[:, : model.d]
        return samples.mean(np.sum(g * model.f(xs[k], theta), axis=-1))

    lhs = np.array([mean_psi(k) for k in range(n + 1)])
    # theta jumps at nodes: use one-sided drift values inside each interval
    left = np.array([mean_drift(k, ctrl.values[k]) for k in range(n)])
    right = np.array([mean_drift(k + 1, ctrl.values[k]) for k in range(n)])
    dt = ctrl.grid.dt
    rhs = lhs[0] + np.concatenate([[0.0], np.cumsum(0.5 * dt * (left + right))])
    return float(np.max(np.abs(lhs - rhs)))
