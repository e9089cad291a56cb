import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpbsim.errors import ChargeNeutralityError, ValidationError
from vpbsim.spatial import TorusGrid, antiderivative, divergence, gradient, leray_project, poisson_solve, x_derivative


def zero_mean_field(seed, n=32, kmax=10):
    """Random band-limited zero-mean field."""
    rng = np.random.default_rng(seed)
    x = TorusGrid(n).x
    k = np.arange(1, kmax + 1)
    a, b = rng.standard_normal((2, kmax))
    return a @ np.cos(np.outer(k, x)) + b @ np.sin(np.outer(k, x))


@pytest.mark.parametrize("n", [4, 12, 0])
def test_grid_validation(n):
    with pytest.raises(ValidationError):
        TorusGrid(n)


def test_transform_round_trip_and_parseval(rng):
    g = TorusGrid(64)
    f = rng.standard_normal(64)
    assert np.max(np.abs(g.inverse(g.forward(f)) - f)) < 1e-13
    spec = g.forward(f)
    w = np.full(spec.shape, 2.0)
    w[0] = w[-1] = 1.0
    spectral = math.sqrt(g.length * np.sum(w * np.abs(spec) ** 2) / g.n_points**2)
    assert abs(spectral - g.l2_norm(f)) < 1e-12 * g.l2_norm(f)


@pytest.mark.parametrize("k,order", [(1, 1), (3, 2), (5, 3), (2, 4)])
def test_derivative_of_single_mode(k, order):
    g = TorusGrid(32)
    z = np.exp(1j * k * g.x)
    d = x_derivative(g, z.real, order) + 1j * x_derivative(g, z.imag, order)
    assert np.max(np.abs(d - (1j * k) ** order * z)) < 1e-12 * k**order


def test_derivative_of_constant_is_zero():
    g = TorusGrid(16)
    assert np.max(np.abs(x_derivative(g, np.full(16, 3.7)))) < 1e-14
    with pytest.raises(ValidationError):
        x_derivative(g, np.zeros(16), -1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_integrate_differentiate_round_trip(seed):
    g = TorusGrid(32)
    f = zero_mean_field(seed)
    assert np.max(np.abs(x_derivative(g, antiderivative(g, f)) - f)) < 1e-12 * max(1, np.max(np.abs(f)))


def test_poisson_single_mode():
    L = 3.0
    g = TorusGrid(32, L)
    k = 2 * math.pi / L
    phi, grad = poisson_solve(g, np.cos(k * g.x) * k**2)
    assert np.max(np.abs(phi - np.cos(k * g.x))) < 1e-12
    assert np.max(np.abs(grad[0] + k * np.sin(k * g.x))) < 1e-12
    assert np.all(grad[1:] == 0)


def test_poisson_zero():
    g = TorusGrid(16)
    phi, grad = poisson_solve(g, np.zeros(16))
    assert np.all(phi == 0) and np.all(grad == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_poisson_residual_and_inverse(seed):
    g = TorusGrid(32)
    n = zero_mean_field(seed)
    phi, _ = poisson_solve(g, n)
    assert g.l2_norm(-x_derivative(g, phi, 2) - n) <= 1e-12 * g.l2_norm(n)
    back, _ = poisson_solve(g, -x_derivative(g, n, 2))
    assert np.max(np.abs(back - n)) < 1e-11 * max(1, np.max(np.abs(n)))


def test_poisson_rejects_net_charge():
    g = TorusGrid(16)
    with pytest.raises(ChargeNeutralityError, match="mean 1.000e-01"):
        poisson_solve(g, np.full(16, 0.1))


def test_leray_examples():
    g = TorusGrid(16)
    x = g.x
    assert np.max(np.abs(leray_project(g, np.stack([np.sin(x), 0 * x, 0 * x])))) < 1e-15
    u = np.stack([0 * x, np.sin(x), np.cos(x)])
    assert np.array_equal(leray_project(g, u), u)
    u = np.stack([np.full(16, 0.3), np.sin(2 * x), np.cos(x) ** 2])
    assert np.allclose(leray_project(g, u), u, atol=1e-15)
    with pytest.raises(ValidationError):
        leray_project(g, np.zeros((2, 16)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_leray_idempotent_and_divergence_free(seed):
    g = TorusGrid(32)
    u = np.stack([zero_mean_field(seed + i) + i for i in range(3)])
    p = leray_project(g, u)
    assert np.array_equal(leray_project(g, p), p)
    assert np.max(np.abs(divergence(g, p))) < 1e-12


def test_gradient_shape():
    g = TorusGrid(16)
    grad = gradient(g, np.sin(g.x))
    assert grad.shape == (3, 16) and np.allclose(grad[0], np.cos(g.x), atol=1e-12)


def test_dealias_mask_two_thirds():
    g = TorusGrid(64)
    assert np.sum(g.dealias_mask) == 22
