"""Time grids, piecewise-constant controls and fixed-step RK4 sweeps.

The backward sweep is the exact reverse-mode derivative of the forward RK4
map, so costates and parameter sensitivities are consistent with the
discrete loss to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import DimensionError, ModelSpec

BLOWUP_THRESHOLD = 1e12


class IntegrationBlowUp(FloatingPointError):
    def __init__(self, step: int, where: str = "state"):
        super().__init__(f"{where} integration blew up at step {step}")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    """Nodes ``k*T/n_steps`` for ``k = first .. n_steps``.

    ``first > 0`` describes the tail window of the full partition of ``[0, T]``
    so that restarted sweeps use the same step size bit for bit.
    """

    T: float
    n_steps: int
    substeps: int = 1
    first: int = 0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if self.n_steps < 1 or self.substeps < 1:
            raise ValueError("n_steps and substeps must be >= 1")
        if not 0 <= self.first <= self.n_steps:
            raise ValueError(f"first node {self.first} outside [0, {self.n_steps}]")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_intervals(self) -> int:
        return self.n_steps - self.first

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.first, self.n_steps + 1) * self.T / self.n_steps

    def window(self, first: int) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps, self.substeps, first)


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant control; ``values[k]`` holds on ``[t_k, t_{k+1})``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.grid.n_intervals:
            raise DimensionError(
                f"control has {values.shape[0]} intervals, grid has {self.grid.n_intervals}")
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: TimeGrid, theta) -> "ControlPath":
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return cls(grid, np.tile(theta, (grid.n_intervals, 1)))

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    def tail(self, k: int) -> "ControlPath":
        """Restriction to ``[t_k, T]`` (``k`` relative to this path's first node)."""
        return ControlPath(self.grid.window(self.grid.first + k), self.values[k:])

    def sup_distance(self, other: "ControlPath") -> float:
        return float(np.max(np.linalg.norm(self.values - other.values, axis=-1)))


@dataclass(frozen=True)
class StatePath:
    """Node values, shape ``(n_intervals + 1, *batch, d)``."""

    grid: TimeGrid
    nodes: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.nodes[-1]


@dataclass(frozen=True)
class CostatePath:
    """Costate node values plus the per-interval parameter sensitivity.

    ``theta_sens[k]`` is ``(dPsi_k/dtheta)^T p_{k+1} / dt`` where ``Psi_k`` is
    the one-interval RK4 map; it tends to ``grad_theta f^T p`` as dt -> 0.
    """

    grid: TimeGrid
    nodes: np.ndarray
    theta_sens: np.ndarray


def _check_finite(x, step, where="state"):
    if not np.all(np.isfinite(x)) or np.any(np.abs(x) > BLOWUP_THRESHOLD):
        raise IntegrationBlowUp(step, where)


def rk4_step(model: ModelSpec, x, theta, h):
    k1 = model.f(x, theta)
    k2 = model.f(x + 0.5 * h * k1, theta)
    k3 = model.f(x + 0.5 * h * k2, theta)
    k4 = model.f(x + h * k3, theta)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_vjp(model: ModelSpec, x, theta, h, cot):
    """Pull the cotangent ``cot`` of one RK4 step back to ``(x, theta)``."""
    k1 = model.f(x, theta)
    s2 = x + 0.5 * h * k1
    k2 = model.f(s2, theta)
    s3 = x + 0.5 * h * k2
    k3 = model.f(s3, theta)
    s4 = x + h * k3

    def pull(s, a):
        return model.vjp_x(s, theta, a), model.vjp_theta(s, theta, a)

    a4 = (h / 6.0) * cot
    u4, t4 = pull(s4, a4)
    a3 = (h / 3.0) * cot + h * u4
    u3, t3 = pull(s3, a3)
    a2 = (h / 3.0) * cot + 0.5 * h * u3
    u2, t2 = pull(s2, a2)
    a1 = (h / 6.0) * cot + 0.5 * h * u2
    u1, t1 = pull(x, a1)
    return cot + u1 + u2 + u3 + u4, t1 + t2 + t3 + t4


def interval_map(model: ModelSpec, x, theta, dt, substeps=1):
    h = dt / substeps
    for _ in range(substeps):
        x = rk4_step(model, x, theta, h)
    return x


def interval_vjp(model: ModelSpec, x, theta, dt, substeps, cot):
    """Reverse pass over one control interval.

    Sub-step states are recomputed with the same arithmetic as the forward
    sweep, so they coincide bit for bit with the stored trajectory.
    """
    h = dt / substeps
    xs = [x]
    for _ in range(substeps - 1):
        xs.append(rk4_step(model, xs[-1], theta, h))
    theta_bar = 0.0
    for s in reversed(xs):
        cot, tb = rk4_step_vjp(model, s, theta, h, cot)
        theta_bar = theta_bar + tb
    return cot, theta_bar


def forward(model: ModelSpec, x0, thetas, dt, substeps=1) -> np.ndarray:
    """Node values for a stack of interval parameters ``thetas`` (K, *batch, m)."""
    x = np.asarray(x0, dtype=float)
    out = [np.broadcast_to(x, np.broadcast_shapes(x.shape, thetas.shape[1:-1] + (model.d,)))]
    for k in range(thetas.shape[0]):
        x = interval_map(model, x, thetas[k], dt, substeps)
        _check_finite(x, k)
        out.append(x)
    return np.stack(out)


def _expand(ctrl: ControlPath, batch_ndim: int) -> np.ndarray:
    v = ctrl.values
    return v.reshape((v.shape[0],) + (1,) * batch_ndim + (v.shape[1],))


def integrate_state(model: ModelSpec, x0, ctrl: ControlPath) -> StatePath:
    x0 = np.asarray(x0, dtype=float)
    model.check_dims(x=x0, theta=ctrl.values)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state is not finite")
    thetas = _expand(ctrl, x0.ndim - 1)
    nodes = forward(model, x0, thetas, ctrl.grid.dt, ctrl.grid.substeps)
    return StatePath(ctrl.grid, nodes)


def integrate_costate(model: ModelSpec, states: StatePath, y0, ctrl: ControlPath,
                      running_cost: bool = True) -> CostatePath:
    """Backward sweep from ``p_T = -grad_x Phi(x_T, y0)``.

    With ``running_cost`` the left-endpoint running cost contributes
    ``-grad_x L(x_k, theta_k) dt`` at each control node, matching the loss
    quadrature.
    """
    if states.grid != ctrl.grid:
        raise ValueError("state path and control live on different grids")
    y0 = np.asarray(y0, dtype=float)
    model.check_dims(y=y0)
    xs = states.nodes
    batch_ndim = xs.ndim - 2
    thetas = _expand(ctrl, batch_ndim)
    dt, sub = ctrl.grid.dt, ctrl.grid.substeps
    n = thetas.shape[0]
    p = -model.phi_x(xs[-1], y0)
    p = np.broadcast_to(p, xs[-1].shape).copy()
    nodes = [p]
    sens = [None] * n
    for k in range(n - 1, -1, -1):
        p, tb = interval_vjp(model, xs[k], thetas[k], dt, sub, p)
        if running_cost:
            p = p - dt * model.L_x(xs[k], thetas[k])
        _check_finite(p, k, "costate")
        nodes.append(p)
        sens[k] = np.broadcast_to(tb / dt, xs[k].shape[:-1] + (model.m,))
    return CostatePath(ctrl.grid, np.stack(nodes[::-1]), np.stack(sens))


def restart_consistency(model: ModelSpec, x0, ctrl: ControlPath, split: int) -> float:
    """Sup-norm gap between a full sweep and one restarted at node ``split``."""
    if not 0 <= split <= ctrl.grid.n_intervals:
        raise ValueError(f"split node {split} outside [0, {ctrl.grid.n_intervals}]")
    full = integrate_state(model, x0, ctrl).nodes
    head = forward(model, np.asarray(x0, dtype=float),
                   _expand(ctrl, np.ndim(x0) - 1)[:split], ctrl.grid.dt, ctrl.grid.substeps)
    tail = integrate_state(model, head[-1], ctrl.tail(split)).nodes
    pieced = np.concatenate([head, tail[1:]])
    return float(np.max(np.abs(full - pieced)))
