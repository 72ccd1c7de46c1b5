import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfpmp.hjb import interp_monotone
from mfpmp.models import argmax_hamiltonian_quadratic, constant_drive, tanh_bilinear
from mfpmp.ode import ControlPath, TimeGrid, restart_consistency
from mfpmp.population import EmpiricalMeasure, wasserstein2, wasserstein2_bruteforce

floats = st.floats(-3.0, 3.0, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(g=floats, lam=st.floats(0.05, 5.0), lo=st.floats(-2.0, 0.0), width=st.floats(0.0, 3.0))
def test_argmax_beats_every_grid_point(g, lam, lo, width):
    hi = lo + width
    theta = float(argmax_hamiltonian_quadratic(g, lam, lo, hi))
    grid = np.linspace(lo, hi, 201)
    obj = lambda t: g * t - lam * t * t
    assert lo <= theta <= hi
    assert obj(theta) >= np.max(obj(grid)) - 1e-12


@settings(max_examples=30, deadline=None)
@given(vals=arrays(float, 12, elements=floats), split=st.integers(0, 12), x0=floats)
def test_restart_exact_for_random_controls(vals, split, x0):
    ctrl = ControlPath(TimeGrid(1.0, 12), vals)
    assert restart_consistency(tanh_bilinear(0.1), np.array([x0]), ctrl, split) == 0.0


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 5), data=st.data())
def test_w2_matches_bruteforce(n, data):
    pts = arrays(float, (n, 2), elements=floats)
    a = EmpiricalMeasure(data.draw(pts))
    b = EmpiricalMeasure(data.draw(pts))
    assert wasserstein2(a, b) == wasserstein2_bruteforce(a, b)
    assert wasserstein2(a, b) == wasserstein2(b, a)


@settings(max_examples=40, deadline=None)
@given(v=arrays(float, 9, elements=floats), bump=arrays(float, 9, elements=st.floats(0, 1)),
       xq=arrays(float, 20, elements=st.floats(-1.0, 2.0)))
def test_interpolation_monotone(v, bump, xq):
    xg = np.linspace(0.0, 1.0, 9)
    assert np.all(interp_monotone(xg, v, xq) <= interp_monotone(xg, v + bump, xq))


@settings(max_examples=20, deadline=None)
@given(c=floats)
def test_constant_drive_moves_linearly(c):
    from mfpmp.ode import integrate_state
    ctrl = ControlPath.constant(TimeGrid(2.0, 8), c)
    xs = integrate_state(constant_drive(0.5), np.array([0.0]), ctrl)
    assert abs(xs.final[0] - 2.0 * c) <= 1e-13
