"""Built-in dynamics, losses and Hamiltonians.

Every evaluator is vectorised over leading axes: states have shape
``(..., d)``, parameters ``(..., m)`` and targets ``(..., l)``; the leading
axes broadcast against each other.  Jacobians follow the convention
``f_x[..., i, j] = d f_i / d x_j`` and ``f_theta[..., i, a] = d f_i / d theta_a``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


class DimensionError(ValueError):
    """Input shapes do not match the model dimensions."""


class UnboundedMaximizationError(ValueError):
    """The Hamiltonian is not bounded above in the parameter."""


@dataclass(frozen=True)
class ModelSpec:
    """Dynamics ``f``, running cost ``L`` and terminal loss ``Phi`` with derivatives.

    ``quadratic_weight`` is set when ``L(x, theta) = weight * |theta|^2`` and
    ``f`` is linear in ``theta``; the averaged Hamiltonian maximisation then has
    a closed form.  ``hess_theta_H`` is the exact (constant) Hessian of ``H`` in
    ``theta`` when known.
    """

    name: str
    d: int
    l: int
    m: int
    f: Callable[[Array, Array], Array]
    f_x: Callable[[Array, Array], Array]
    f_theta: Callable[[Array, Array], Array]
    L: Callable[[Array, Array], Array]
    L_x: Callable[[Array, Array], Array]
    L_theta: Callable[[Array, Array], Array]
    phi: Callable[[Array, Array], Array]
    phi_x: Callable[[Array, Array], Array]
    theta_lo: Optional[Array] = None
    theta_hi: Optional[Array] = None
    hess_theta_H: Optional[Array] = None
    quadratic_weight: Optional[float] = None
    f_bound: Optional[float] = None
    analytic_only: bool = False
    params: dict = field(default_factory=dict)
    # optional fast paths for a^T f_x and a^T f_theta
    f_x_vjp: Optional[Callable[[Array, Array, Array], Array]] = None
    f_theta_vjp: Optional[Callable[[Array, Array, Array], Array]] = None

    @property
    def boxed(self) -> bool:
        return self.theta_lo is not None

    def project(self, theta: Array) -> Array:
        """Clamp parameters onto the control set (identity when unbounded)."""
        theta = np.asarray(theta, dtype=float)
        if not self.boxed:
            return theta
        return np.clip(theta, self.theta_lo, self.theta_hi)

    def contains(self, theta: Array) -> bool:
        theta = np.asarray(theta, dtype=float)
        if not self.boxed:
            return bool(np.all(np.isfinite(theta)))
        return bool(np.all(theta >= self.theta_lo) and np.all(theta <= self.theta_hi))

    def vjp_x(self, x: Array, theta: Array, a: Array) -> Array:
        if self.f_x_vjp is not None:
            return self.f_x_vjp(x, theta, a)
        return np.einsum("...ij,...i->...j", self.f_x(x, theta), a)

    def vjp_theta(self, x: Array, theta: Array, a: Array) -> Array:
        if self.f_theta_vjp is not None:
            return self.f_theta_vjp(x, theta, a)
        return np.einsum("...ia,...i->...a", self.f_theta(x, theta), a)

    def check_dims(self, x: Optional[Array] = None, p: Optional[Array] = None,
                   theta: Optional[Array] = None, y: Optional[Array] = None) -> None:
        for label, arr, size in (("x", x, self.d), ("p", p, self.d),
                                 ("theta", theta, self.m), ("y", y, self.l)):
            if arr is None:
                continue
            shape = np.shape(arr)
            if len(shape) == 0 or shape[-1] != size:
                raise DimensionError(
                    f"{self.name}: {label} has trailing dimension "
                    f"{shape[-1] if shape else 'scalar'}, expected {size}")


def hamiltonian(model: ModelSpec, x, p, theta) -> Array:
    """H(x, p, theta) = p . f(x, theta) - L(x, theta)."""
    x, p, theta = (np.asarray(a, dtype=float) for a in (x, p, theta))
    model.check_dims(x=x, p=p, theta=theta)
    return np.sum(p * model.f(x, theta), axis=-1) - model.L(x, theta)


def grad_hamiltonian(model: ModelSpec, x, p, theta) -> tuple[Array, Array]:
    """Return ``(grad_x H, grad_theta H)``."""
    x, p, theta = (np.asarray(a, dtype=float) for a in (x, p, theta))
    model.check_dims(x=x, p=p, theta=theta)
    gx = np.einsum("...ij,...i->...j", model.f_x(x, theta), p) - model.L_x(x, theta)
    gt = np.einsum("...ia,...i->...a", model.f_theta(x, theta), p) - model.L_theta(x, theta)
    return gx, gt


def argmax_hamiltonian_quadratic(g, lam: float, lo=None, hi=None) -> Array:
    """Maximise ``theta -> g . theta - lam |theta|^2`` over an optional box.

    The objective is separable and concave, so clamping the unconstrained
    maximiser coordinate-wise is exact.
    """
    if not lam > 0:
        raise UnboundedMaximizationError(f"quadratic weight must be positive, got {lam}")
    theta = np.asarray(g, dtype=float) / (2.0 * lam)
    if lo is not None:
        theta = np.clip(theta, lo, hi)
    return theta


def _box(box, m):
    if box is None:
        return None, None
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (m,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (m,)).copy()
    if np.any(lo > hi):
        raise ValueError(f"empty control box [{lo}, {hi}]")
    return lo, hi


def _half_sq_dist(x, y):
    return 0.5 * np.sum((x - y) ** 2, axis=-1)


def _zeros_like_state(x, theta):
    return np.zeros(np.broadcast_shapes(x.shape, theta.shape[:-1] + (x.shape[-1],)))


def tanh_bilinear(lam: float, d: int = 1, theta_box=None) -> ModelSpec:
    """Residual-type block ``f(x, Theta) = Theta tanh(x)`` with ``L = lam |Theta|^2``.

    ``theta`` is the row-major flattening of the d x d matrix ``Theta``.
    """
    m = d * d
    lo, hi = _box(theta_box, m)

    def mat(theta):
        return theta.reshape(theta.shape[:-1] + (d, d))

    def f(x, theta):
        if d == 1:
            return theta * np.tanh(x)
        return np.einsum("...ij,...j->...i", mat(theta), np.tanh(x))

    def f_x(x, theta):
        return mat(theta) * (1.0 - np.tanh(x) ** 2)[..., None, :]

    def f_theta(x, theta):
        s = np.tanh(x)
        shape = np.broadcast_shapes(s.shape[:-1], theta.shape[:-1])
        out = np.zeros(shape + (d, d, d))
        for i in range(d):
            out[..., i, i, :] = s
        return out.reshape(shape + (d, m))

    def L(x, theta):
        return lam * np.sum(theta ** 2, axis=-1) + 0.0 * x[..., 0]

    def L_x(x, theta):
        return _zeros_like_state(x, theta)

    def L_theta(x, theta):
        return 2.0 * lam * theta + 0.0 * x[..., :1]

    def f_x_vjp(x, theta, a):
        return np.einsum("...ij,...i->...j", mat(theta), a) * (1.0 - np.tanh(x) ** 2)

    def f_theta_vjp(x, theta, a):
        out = a[..., :, None] * np.tanh(x)[..., None, :]
        return out.reshape(out.shape[:-2] + (m,))

    bound = None
    if lo is not None:
        # |Theta tanh(x)|_2 <= |Theta|_F |tanh(x)|_2 <= |Theta|_F sqrt(d)
        bound = float(np.sqrt(np.sum(np.maximum(lo ** 2, hi ** 2))) * np.sqrt(d))
    return ModelSpec(
        name="tanh_bilinear", d=d, l=d, m=m, f=f, f_x=f_x, f_theta=f_theta,
        L=L, L_x=L_x, L_theta=L_theta, phi=_half_sq_dist, phi_x=lambda x, y: x - y,
        theta_lo=lo, theta_hi=hi, hess_theta_H=-2.0 * lam * np.eye(m),
        quadratic_weight=lam if lam > 0 else None, f_bound=bound,
        params={"lambda": lam, "dim": d}, f_x_vjp=f_x_vjp, f_theta_vjp=f_theta_vjp,
    )


def linear_scalar(theta_box=None) -> ModelSpec:
    """``f = theta x`` in one dimension, no running cost.

    Unbounded ``f``: only used as an analytic oracle, never in experiments that
    assert the boundedness hypotheses.
    """
    lo, hi = _box(theta_box, 1)
    return ModelSpec(
        name="linear_scalar", d=1, l=1, m=1,
        f=lambda x, theta: theta * x,
        f_x=lambda x, theta: (theta * np.ones_like(x))[..., None],
        f_theta=lambda x, theta: (x * np.ones_like(theta))[..., None],
        L=lambda x, theta: np.zeros(np.broadcast_shapes(x.shape[:-1], theta.shape[:-1])),
        L_x=_zeros_like_state,
        L_theta=lambda x, theta: np.zeros(np.broadcast_shapes(x.shape, theta.shape)),
        phi=_half_sq_dist, phi_x=lambda x, y: x - y,
        theta_lo=lo, theta_hi=hi, hess_theta_H=np.zeros((1, 1)),
        analytic_only=True, params={"dim": 1},
        f_x_vjp=lambda x, theta, a: theta * a,
        f_theta_vjp=lambda x, theta, a: x * a,
    )


def constant_drive(lam: float, d: int = 1, theta_box=None) -> ModelSpec:
    """``f = theta`` (d = m) with ``L = lam |theta|^2``: the LQ test problem."""
    lo, hi = _box(theta_box, d)

    def f(x, theta):
        return theta + 0.0 * x

    def f_x(x, theta):
        shape = np.broadcast_shapes(x.shape[:-1], theta.shape[:-1])
        return np.zeros(shape + (d, d))

    def f_theta(x, theta):
        shape = np.broadcast_shapes(x.shape[:-1], theta.shape[:-1])
        return np.broadcast_to(np.eye(d), shape + (d, d)).copy()

    bound = None
    if lo is not None:
        bound = float(np.sqrt(np.sum(np.maximum(lo ** 2, hi ** 2))))
    return ModelSpec(
        name="constant_drive", d=d, l=d, m=d, f=f, f_x=f_x, f_theta=f_theta,
        L=lambda x, theta: lam * np.sum(theta ** 2, axis=-1) + 0.0 * x[..., 0],
        L_x=_zeros_like_state,
        L_theta=lambda x, theta: 2.0 * lam * theta + 0.0 * x,
        phi=_half_sq_dist, phi_x=lambda x, y: x - y,
        theta_lo=lo, theta_hi=hi, hess_theta_H=-2.0 * lam * np.eye(d),
        quadratic_weight=lam if lam > 0 else None, f_bound=bound,
        params={"lambda": lam, "dim": d},
        f_x_vjp=lambda x, theta, a: 0.0 * a,
        f_theta_vjp=lambda x, theta, a: a + 0.0 * theta,
    )


BUILTIN_MODELS = ("tanh_bilinear", "linear_scalar", "constant_drive")


def build_model(cfg: dict) -> ModelSpec:
    """Build a model from the ``model`` config section."""
    name = cfg.get("name")
    lam = float(cfg.get("lambda", 0.0))
    dim = int(cfg.get("dim", 1))
    box = cfg.get("theta_box")
    if name == "tanh_bilinear":
        return tanh_bilinear(lam, dim, box)
    if name == "linear_scalar":
        if dim != 1:
            raise DimensionError("linear_scalar is one-dimensional")
        return linear_scalar(box)
    if name == "constant_drive":
        return constant_drive(lam, dim, box)
    raise ValueError(f"unknown model {name!r}; expected one of {BUILTIN_MODELS}")


def probe_f_bound(model: ModelSpec, state_box: float, n_probe: int = 1000,
                  seed: int = 0) -> float:
    """Largest |f| seen on random points of ``[-state_box, state_box]^d x Theta``.

    Raises when the observed value exceeds ``model.f_bound``.
    """
    if not model.boxed or model.f_bound is None:
        raise ValueError(f"{model.name}: bounded-f probe needs a box and a declared bound")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-state_box, state_box, size=(n_probe, model.d))
    theta = rng.uniform(model.theta_lo, model.theta_hi, size=(n_probe, model.m))
    worst = float(np.max(np.linalg.norm(model.f(x, theta), axis=-1)))
    if worst > model.f_bound:
        raise AssertionError(f"{model.name}: |f| = {worst} exceeds declared bound {model.f_bound}")
    return worst
