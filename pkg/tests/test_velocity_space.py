import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpbsim.errors import ValidationError
from vpbsim.spatial import TorusGrid
from vpbsim.velocity_space import (
    HermiteBasis,
    TwoSpeciesDistribution,
    WeightSpec,
    fluid_moments,
    lambda_moment,
    macro_moments,
    multiply_velocity,
    null_space_basis,
    project_P,
    project_micro,
    projection_matrix,
    theta_moment,
    velocity_derivative,
    weighted_norm,
)


def both(c):
    return np.stack([c, c])


def quad(basis, fn):
    """Independent moment oracle: tensor Gauss-Hermite rule for the standard Gaussian."""
    x, w = np.polynomial.hermite_e.hermegauss(basis.K + 6)
    w = w / math.sqrt(2 * math.pi)
    V = np.array(np.meshgrid(x, x, x, indexing="ij")).reshape(3, -1).T
    W = np.prod(np.array(np.meshgrid(w, w, w, indexing="ij")).reshape(3, -1), axis=0)
    return float(np.sum(W * fn(V)))


def test_basis_size_and_orthonormality(basis4):
    assert basis4.M == 35
    G = basis4.phi.T * basis4.quad_weights @ basis4.phi
    assert np.max(np.abs(G - np.eye(basis4.M))) < 1e-12


def test_quadrature_exact_to_degree_2K(basis4):
    # <v1^4 v2^2 v3^2> = 3, total degree 8 = 2K
    got = np.sum(basis4.quad_weights * basis4.quad_nodes[:, 0] ** 4 * basis4.quad_nodes[:, 1] ** 2 * basis4.quad_nodes[:, 2] ** 2)
    assert abs(got - 3.0) < 1e-12


def test_projection_examples(basis4):
    b = basis4
    f = both(b.sqrt_mu)
    m = macro_moments(b, f)
    assert np.allclose(project_P(b, f), f, atol=1e-12)
    assert abs(m.a_plus - 1) < 1e-12 and abs(m.a_minus - 1) < 1e-12
    assert np.allclose(m.b, 0, atol=1e-12) and abs(m.c) < 1e-12

    f = both(b.v_sqrt_mu(0))
    assert np.allclose(project_P(b, f), f, atol=1e-12)
    assert abs(macro_moments(b, f).b[0] - 1) < 1e-10

    f = both(b.energy_vector)
    assert np.allclose(project_P(b, f), f, atol=1e-12)
    assert abs(macro_moments(b, f).c - 1) < 1e-10

    f = both(b.coefficients_of(lambda v: v[:, 0] * v[:, 1]))
    assert np.max(np.abs(project_P(b, f))) < 1e-12


def test_projection_requires_degree_two():
    with pytest.raises(ValidationError):
        project_P(HermiteBasis(1), np.zeros((2, 4)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_idempotent_and_orthogonal(seed):
    b = HermiteBasis(4)
    f = np.random.default_rng(seed).standard_normal((2, b.M))
    pf = project_P(b, f)
    assert np.max(np.abs(project_P(b, pf) - pf)) < 1e-10
    assert abs(np.sum(pf * (f - pf))) < 1e-10


def test_projection_matrix_symmetric_rank_six(basis4):
    P = projection_matrix(basis4)
    assert np.max(np.abs(P - P.T)) < 1e-14
    assert np.linalg.matrix_rank(P) == 6
    U = null_space_basis(basis4)
    assert np.allclose(U @ U.T, np.eye(6), atol=1e-12)


def test_theta_and_lambda_examples(basis4):
    b = basis4
    assert abs(theta_moment(b, b.sqrt_mu, 0, 0)) < 1e-12
    assert abs(theta_moment(b, b.sqrt_mu, 0, 1)) < 1e-12
    v1v2 = b.coefficients_of(lambda v: v[:, 0] * v[:, 1])
    assert abs(theta_moment(b, v1v2, 0, 1) - 1) < 1e-10
    assert abs(lambda_moment(b, b.v_sqrt_mu(0), 0)) < 1e-12
    assert abs(lambda_moment(b, b.sqrt_mu, 0)) < 1e-12
    B1 = b.coefficients_of(lambda v: v[:, 0] * (0.5 * np.sum(v**2, 1) - 2.5))
    assert abs(lambda_moment(b, B1, 0) - 0.5) < 1e-10


def test_worked_values_against_independent_quadrature(basis4):
    # (1/20) <(|v|^2-5)^2 v1^2> = 1/2 ; <v1^2 v2^2> = 1 ; <(|v|^2-3)^2> = 6
    assert abs(quad(basis4, lambda v: (np.sum(v**2, 1) - 5) ** 2 * v[:, 0] ** 2) / 20 - 0.5) < 1e-12
    assert abs(quad(basis4, lambda v: v[:, 0] ** 2 * v[:, 1] ** 2) - 1) < 1e-12
    assert abs(quad(basis4, lambda v: (np.sum(v**2, 1) - 3) ** 2) - 6) < 1e-12


def test_fluid_moments_examples(basis4):
    b = basis4
    zero = fluid_moments(b, np.zeros((2, b.M)), 0.1)
    for name in ("rho", "u", "theta", "n", "j", "omega"):
        assert np.all(getattr(zero, name) == 0)
    m = fluid_moments(b, np.stack([b.sqrt_mu, -b.sqrt_mu]), 0.1)
    assert abs(m.n - 2) < 1e-12 and abs(m.rho) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_moments_of_macro_part_match(seed):
    b = HermiteBasis(4)
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((2, b.M))
    f[1, 0] = f[0, 0]
    mf, mp = fluid_moments(b, f, 0.3), fluid_moments(b, project_P(b, f), 0.3)
    for name in ("rho", "u", "theta", "n"):
        assert np.allclose(getattr(mf, name), getattr(mp, name), atol=1e-12)
    assert np.allclose(mp.j, 0, atol=1e-12) and abs(mp.omega) < 1e-12


def test_velocity_derivative_of_gaussian(basis4):
    b = basis4
    d, overflow = velocity_derivative(b, b.sqrt_mu, 0)
    assert overflow == 0
    # d/dv1 sqrt(mu) = -(v1/2) sqrt(mu); oracle from nodal values of the analytic derivative
    oracle = b.coefficients_from_nodes(-0.5 * b.quad_nodes[:, 0])
    assert np.max(np.abs(d - oracle)) < 1e-10
    assert abs(d[b.index_of[(1, 0, 0)]] + 0.5) < 1e-12
    assert np.all(velocity_derivative(b, np.zeros(b.M), 0)[0] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2))
def test_velocity_derivative_antisymmetric(seed, axis):
    b = HermiteBasis(4)
    rng = np.random.default_rng(seed)
    low = b.degrees <= b.K - 1
    f, g = rng.standard_normal((2, b.M)) * low
    lhs = velocity_derivative(b, f, axis)[0] @ g
    rhs = -f @ velocity_derivative(b, g, axis)[0]
    assert abs(lhs - rhs) < 1e-10


def test_multiply_velocity_recurrence(basis4):
    b = basis4
    got, overflow = multiply_velocity(b, b.sqrt_mu, 1)
    assert np.allclose(got, b.v_sqrt_mu(1), atol=1e-14) and overflow == 0


def test_multiply_velocity_reports_truncation(basis4):
    top = basis4.unit((0, 0, 4))
    got, overflow = multiply_velocity(basis4, top, 2)
    assert abs(overflow - math.sqrt(5)) < 1e-12
    assert abs(got[basis4.index_of[(0, 0, 3)]] - 2) < 1e-12


def test_weighted_norm_examples(basis4, rng):
    b = basis4
    w = WeightSpec(0.0, 0.0, 0.5)
    assert abs(weighted_norm(b, both(b.sqrt_mu), w) - math.sqrt(2)) < 1e-12
    assert weighted_norm(b, np.zeros((2, b.M)), w) == 0
    f = rng.standard_normal((2, b.M))
    assert abs(weighted_norm(b, f, w) - np.linalg.norm(f)) < 1e-12
    with pytest.raises(ValidationError):
        weighted_norm(b, f, w, sobolev_order=0.3)


def test_weighted_norm_with_grid_uses_torus_measure(basis4):
    grid = TorusGrid(16)
    vals = np.broadcast_to(both(basis4.sqrt_mu)[:, None, :], (2, 16, basis4.M)).copy()
    f = TwoSpeciesDistribution(basis4, grid, vals)
    assert abs(weighted_norm(basis4, f, WeightSpec()) - math.sqrt(2 * 2 * math.pi)) < 1e-12


def test_sobolev_matrix_bounded_below_by_identity(basis4):
    S = basis4.sobolev_matrix(1.0)
    assert np.min(np.linalg.eigvalsh(S @ S.T)) >= 1 - 1e-12


@pytest.mark.parametrize("gamma,s", [(0.0, 0.5), (-1.0, 0.5), (-2.5, 0.25)])
def test_weight_exponent_regimes(gamma, s):
    w = WeightSpec(3.0, gamma, s, 1, 1)
    if gamma >= -2 * s:
        assert w.hard and w.exponent == 1.0
    else:
        assert not w.hard
        assert math.isclose(w.exponent, 3.0 - (-3 * gamma / s + gamma) - (-3 * gamma / s))


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-2.9, -0.6), st.floats(0.05, 0.29), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)
)
def test_soft_weight_monotone_in_derivative_orders(gamma, s, a, b_, da, db):
    v = HermiteBasis(3).quad_nodes
    lo = WeightSpec(2.0, gamma, s, a + da, b_ + db).values(v)
    hi = WeightSpec(2.0, gamma, s, a, b_).values(v)
    assert np.all(lo <= hi * (1 + 1e-12))


def test_weight_validation():
    with pytest.raises(ValidationError):
        WeightSpec(-1.0)
    with pytest.raises(ValidationError):
        WeightSpec(0.0, 0.0, 1.0)
