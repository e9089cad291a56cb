"""Hermite spectral velocity basis, macro-micro projections and velocity norms.

Velocity functions are represented as ``p(v) * sqrt(mu(v))`` with ``p`` a
polynomial of total degree at most ``K`` expanded in tensor products of
normalized probabilists' Hermite polynomials. With this normalization the
basis is orthonormal in plain ``L^2_v`` and a function's coefficient vector is
its ``L^2_v`` representation.

Two-species distributions are stored as real arrays of shape
``(2, n_points, M)``: species, physical grid point, Hermite index.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import TruncationError, ValidationError
from .spatial import TorusGrid, poisson_solve

# species algebra constants
Q0 = np.array([1.0, -1.0])  # diagonal of diag(1, -1)
Q1 = np.array([1.0, -1.0])
Q2 = np.array([1.0, 1.0])


def hermite_values(x, K):
    """Normalized Hermite polynomials He_n(x)/sqrt(n!) for n = 0..K.

    Returns an array of shape ``x.shape + (K + 1,)``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (K + 1,))
    out[..., 0] = 1.0
    if K >= 1:
        out[..., 1] = x
    for n in range(1, K):
        out[..., n + 1] = (x * out[..., n] - np.sqrt(n) * out[..., n - 1]) / np.sqrt(n + 1)
    return out


def multi_indices(K):
    """Multi-indices with total degree <= K, ordered by degree then lexicographically (descending k1)."""
    out = []
    for deg in range(K + 1):
        for k1 in range(deg, -1, -1):
            for k2 in range(deg - k1, -1, -1):
                out.append((k1, k2, deg - k1 - k2))
    return np.array(out, dtype=int)


class HermiteBasis:
    """Tensor Hermite basis of total degree <= K in three velocity dimensions.

    Parameters
    ----------
    K : int
        Maximum total polynomial degree.
    quad_order : int, optional
        Gauss-Hermite nodes per dimension, default ``K + 2``.
    """

    def __init__(self, K: int, quad_order: int | None = None):
        K = int(K)
        if K < 0:
            raise ValidationError(f"degree cap K must be non-negative, got {K}")
        q = K + 2 if quad_order is None else int(quad_order)
        if q < K + 1:
            raise ValidationError(f"quadrature order {q} below K+1={K + 1}")
        self.K = K
        self.quad_order = q
        self.indices = multi_indices(K)
        self.M = len(self.indices)
        self.index_of = {tuple(int(a) for a in k): i for i, k in enumerate(self.indices)}
        self.degrees = self.indices.sum(axis=1)

        x, w = hermegauss(q)
        w = w / np.sqrt(2.0 * np.pi)
        grid = np.array(list(itertools.product(x, x, x)))
        self.quad_nodes = grid
        self.quad_weights = np.prod(np.array(list(itertools.product(w, w, w))), axis=1)
        self.nodes_1d = x
        self.weights_1d = w

    def __repr__(self):
        return f"HermiteBasis(K={self.K}, quad_order={self.quad_order})"

    def __eq__(self, other):
        return isinstance(other, HermiteBasis) and (self.K, self.quad_order) == (other.K, other.quad_order)

    def __hash__(self):
        return hash((self.K, self.quad_order))

    @property
    def v_max(self) -> float:
        """Largest quadrature node magnitude in one dimension."""
        return float(np.max(np.abs(self.nodes_1d)))

    def poly_values(self, v):
        """Polynomial parts of all basis functions at points ``v`` (..., 3) -> (..., M)."""
        v = np.asarray(v, dtype=float)
        h = hermite_values(v, self.K)  # (..., 3, K+1)
        k = self.indices
        return h[..., 0, k[:, 0]] * h[..., 1, k[:, 1]] * h[..., 2, k[:, 2]]

    @cached_property
    def _pair_tables(self):
        pairs = sorted({(int(a), int(b)) for a, b, _ in self.indices})
        pid = {p: i for i, p in enumerate(pairs)}
        sel = np.array([pid[(int(a), int(b))] for a, b, _ in self.indices])
        return np.array(pairs), sel

    def weighted_poly_sum(self, v, w):
        """Sum over axis -2 of ``w * poly_values(v)`` for points ``v`` of shape (Q, S, 3).

        Factorized over the third coordinate, which avoids forming the (Q, S, M) array.
        """
        h = hermite_values(v, self.K)
        pairs, sel = self._pair_tables
        A = h[..., 0, pairs[:, 0]] * h[..., 1, pairs[:, 1]] * np.asarray(w)[:, None]
        G = np.matmul(np.swapaxes(A, -1, -2), h[..., 2, :])
        return G[..., sel, self.indices[:, 2]]

    @cached_property
    def phi(self) -> np.ndarray:
        """Basis polynomial values at the quadrature nodes, shape (Nq, M)."""
        return self.poly_values(self.quad_nodes)

    def coefficients_from_nodes(self, p_values):
        """Coefficients of ``p(v) sqrt(mu)`` given ``p`` at the nodes (last axis)."""
        return np.asarray(p_values) * self.quad_weights @ self.phi

    def coefficients_of(self, poly):
        """Coefficients of ``poly(v) * sqrt(mu)`` for a callable of (Nq, 3) nodes."""
        return self.coefficients_from_nodes(poly(self.quad_nodes))

    def values_at_nodes(self, coeffs):
        """Polynomial parts ``p(v)`` at the nodes for coefficient arrays (..., M)."""
        return np.asarray(coeffs) @ self.phi.T

    # ---- named vectors -------------------------------------------------

    def unit(self, k):
        e = np.zeros(self.M)
        e[self.index_of[tuple(k)]] = 1.0
        return e

    @cached_property
    def sqrt_mu(self):
        return self.unit((0, 0, 0))

    def v_sqrt_mu(self, axis):
        if self.K < 1:
            raise TruncationError("v*sqrt(mu) needs K >= 1")
        k = [0, 0, 0]
        k[axis] = 1
        return self.unit(k)

    @cached_property
    def energy_vector(self):
        """Coefficients of (|v|^2 - 3) sqrt(mu)."""
        if self.K < 2:
            raise TruncationError("(|v|^2-3)*sqrt(mu) needs K >= 2")
        e = np.zeros(self.M)
        for a in range(3):
            k = [0, 0, 0]
            k[a] = 2
            e[self.index_of[tuple(k)]] = np.sqrt(2.0)
        return e

    # ---- ladder matrices ------------------------------------------------

    def _shift(self, axis, up):
        S = np.zeros((self.M, self.M))
        for i, k in enumerate(self.indices):
            kk = list(int(a) for a in k)
            if up:
                kk[axis] += 1
                j = self.index_of.get(tuple(kk))
                if j is not None:
                    S[j, i] = np.sqrt(k[axis] + 1)
            elif k[axis] > 0:
                kk[axis] -= 1
                S[self.index_of[tuple(kk)], i] = np.sqrt(k[axis])
        return S

    @cached_property
    def raise_matrices(self):
        return tuple(self._shift(a, True) for a in range(3))

    @cached_property
    def lower_matrices(self):
        return tuple(self._shift(a, False) for a in range(3))

    @cached_property
    def mult_matrices(self):
        """Truncated multiplication by v_a (symmetric)."""
        return tuple(u + d for u, d in zip(self.raise_matrices, self.lower_matrices))

    @cached_property
    def deriv_matrices(self):
        """Truncated d/dv_a (antisymmetric)."""
        return tuple(0.5 * d - 0.5 * u for u, d in zip(self.raise_matrices, self.lower_matrices))

    @cached_property
    def top_degree(self):
        return self.degrees == self.K

    def overflow_norm(self, coeffs, axis):
        """L2 size of the degree-(K+1) content generated by raising along ``axis``."""
        c = np.asarray(coeffs)[..., self.top_degree]
        fac = np.sqrt(self.indices[self.top_degree, axis] + 1.0)
        return float(np.sqrt(np.sum((c * fac) ** 2)))

    @cached_property
    def one_minus_laplacian(self):
        """Galerkin matrix of (1 - Laplacian_v) on the truncated space (exact, SPD)."""
        ext = HermiteBasis(self.K + 1, quad_order=self.K + 2)
        G = np.eye(self.M)
        for D in ext.deriv_matrices:
            Dk = D[:, : self.M]
            G += Dk.T @ Dk
        return G

    def sobolev_matrix(self, order):
        """(1 - Laplacian_v)^(order/2) via eigendecomposition."""
        lam, U = np.linalg.eigh(self.one_minus_laplacian)
        return (U * lam ** (0.5 * order)) @ U.T

    def embed(self, coeffs, other: "HermiteBasis"):
        """Copy coefficients into a basis of larger degree cap."""
        if other.K < self.K:
            raise TruncationError("target basis must have K >= source K")
        coeffs = np.asarray(coeffs)
        out = np.zeros(coeffs.shape[:-1] + (other.M,))
        out[..., : self.M] = coeffs
        return out


def velocity_derivative(basis: HermiteBasis, coeffs, axis: int):
    """Apply d/dv_axis; returns ``(derivative, overflow)``.

    ``overflow`` is the L2 size of the degree-(K+1) part that was discarded.
    """
    coeffs = np.asarray(coeffs)
    D = basis.deriv_matrices[axis]
    overflow = 0.5 * basis.overflow_norm(coeffs, axis)
    return coeffs @ D.T, overflow


def multiply_velocity(basis: HermiteBasis, coeffs, axis: int):
    """Multiply by v_axis with degree-K truncation; returns ``(product, overflow)``."""
    coeffs = np.asarray(coeffs)
    return coeffs @ basis.mult_matrices[axis].T, basis.overflow_norm(coeffs, axis)


# ---------------------------------------------------------------------------
# two-species containers


@dataclass(frozen=True)
class TwoSpeciesDistribution:
    """Perturbation ``[f_+, f_-]`` on a torus grid.

    ``values`` holds real Hermite coefficients at each physical grid point,
    shape ``(2, n_points, M)``. :meth:`modes` gives the spatial Fourier view.
    """

    basis: HermiteBasis
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        expect = (2, self.grid.n_points, self.basis.M)
        if v.shape != expect:
            raise ValidationError(f"distribution shape {v.shape} does not match {expect}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def x_modes(self) -> int:
        return self.grid.n_points

    def modes(self):
        """Complex spatial Fourier coefficients, shape (2, n_points//2+1, M)."""
        return np.fft.rfft(self.values, axis=1)

    @classmethod
    def from_modes(cls, basis, grid, spectrum):
        return cls(basis, grid, np.fft.irfft(spectrum, n=grid.n_points, axis=1))

    @classmethod
    def zeros(cls, basis, grid):
        return cls(basis, grid, np.zeros((2, grid.n_points, basis.M)))

    def with_values(self, values):
        return TwoSpeciesDistribution(self.basis, self.grid, values)

    def l2_norm(self):
        return float(np.sqrt(np.sum(self.values**2) * self.grid.dx))


def _unwrap(f):
    if isinstance(f, TwoSpeciesDistribution):
        return f.values, f
    return np.asarray(f, dtype=float), None


def _rewrap(values, template):
    return template.with_values(values) if template is not None else values


@dataclass(frozen=True)
class MacroMoments:
    a_plus: np.ndarray
    a_minus: np.ndarray
    b: np.ndarray
    c: np.ndarray


def _require_macro(basis):
    if basis.K < 2:
        raise TruncationError(f"projection needs K >= 2, got K={basis.K}")


def macro_moments(basis: HermiteBasis, f) -> MacroMoments:
    """Coordinates (a_+, a_-, b, c) of the hydrodynamic part."""
    _require_macro(basis)
    v, _ = _unwrap(f)
    s = v[0] + v[1]
    b = np.stack([0.5 * s[..., basis.index_of[k]] for k in ((1, 0, 0), (0, 1, 0), (0, 0, 1))])
    c = (s @ basis.energy_vector) / 12.0
    return MacroMoments(v[0][..., 0].copy(), v[1][..., 0].copy(), b, c)


def macro_part(basis: HermiteBasis, moments: MacroMoments):
    """Coefficients of {a_+[1,0] + a_-[0,1] + v.b[1,1] + (|v|^2-3)c[1,1]} sqrt(mu)."""
    a_p = np.asarray(moments.a_plus)
    out = np.zeros((2,) + a_p.shape + (basis.M,))
    out[0, ..., 0] = a_p
    out[1, ..., 0] = moments.a_minus
    shared = np.multiply.outer(np.asarray(moments.c), basis.energy_vector)
    for a in range(3):
        shared[..., basis.index_of[tuple(np.eye(3, dtype=int)[a])]] += moments.b[a]
    out += shared
    return out


def project_P(basis: HermiteBasis, f):
    """Orthogonal projection onto the null space of the linearized collision operator."""
    v, tmpl = _unwrap(f)
    return _rewrap(macro_part(basis, macro_moments(basis, v)), tmpl)


def project_micro(basis: HermiteBasis, f):
    v, tmpl = _unwrap(f)
    return _rewrap(v - macro_part(basis, macro_moments(basis, v)), tmpl)


def null_space_basis(basis: HermiteBasis):
    """Orthonormal basis (6, 2M) of the two-species collision null space."""
    _require_macro(basis)
    M = basis.M
    rows = []
    e0 = basis.sqrt_mu
    rows.append(np.concatenate([e0, np.zeros(M)]))
    rows.append(np.concatenate([np.zeros(M), e0]))
    for a in range(3):
        e = basis.v_sqrt_mu(a)
        rows.append(np.concatenate([e, e]) / np.sqrt(2.0))
    w = basis.energy_vector
    rows.append(np.concatenate([w, w]) / np.sqrt(12.0))
    return np.array(rows)


def projection_matrix(basis: HermiteBasis):
    """P as a 2M x 2M matrix acting on stacked [f_+, f_-] coefficients."""
    U = null_space_basis(basis)
    return U.T @ U


def single_species_null_basis(basis: HermiteBasis):
    """Orthonormal basis (5, M) of span{sqrt(mu), v sqrt(mu), |v|^2 sqrt(mu)}."""
    _require_macro(basis)
    rows = [basis.sqrt_mu] + [basis.v_sqrt_mu(a) for a in range(3)]
    rows.append(basis.energy_vector / np.sqrt(6.0))
    return np.array(rows)


# ---------------------------------------------------------------------------
# fluid moments


@dataclass(frozen=True)
class MacroState:
    """Fluid variables on the grid; vector fields have shape (3, n)."""

    rho: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    n: np.ndarray
    j: np.ndarray
    omega: np.ndarray
    phi: np.ndarray | None = None
    grad_phi: np.ndarray | None = None
    t: float = 0.0


def fluid_moments(basis: HermiteBasis, f, eps: float, grid: TorusGrid | None = None, t: float = 0.0) -> MacroState:
    """Density, velocity, temperature, charge, current and internal-energy flux.

    If ``f`` is a :class:`TwoSpeciesDistribution` (or ``grid`` is given) the
    electric potential is solved as well.
    """
    if not eps > 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    v, tmpl = _unwrap(f)
    if v.shape[0] != 2 or v.shape[-1] != basis.M:
        raise ValidationError(f"distribution shape {v.shape} incompatible with basis size {basis.M}")
    if tmpl is not None:
        grid = tmpl.grid
    s = v[0] + v[1]
    d = v[0] - v[1]
    thermal = basis.energy_vector / 3.0 if basis.K >= 2 else np.zeros(basis.M)
    vel = np.stack([basis.v_sqrt_mu(a) for a in range(3)]) if basis.K >= 1 else np.zeros((3, basis.M))
    rho = 0.5 * s[..., 0]
    u = 0.5 * np.moveaxis(s @ vel.T, -1, 0)
    theta = 0.5 * (s @ thermal)
    n = d[..., 0].copy()
    j = np.moveaxis(d @ vel.T, -1, 0) / eps
    omega = (d @ thermal) / eps
    phi = grad = None
    if grid is not None and n.ndim == 1:
        phi, grad = poisson_solve(grid, n)
    return MacroState(rho, u, theta, n, j, omega, phi, grad, t)


def theta_moment(basis: HermiteBasis, f, i: int, j: int):
    """Integral of (v_i v_j - delta_ij) sqrt(mu) f over velocity (axes 0-based)."""
    coeff = basis.coefficients_of(lambda v: v[:, i] * v[:, j] - (1.0 if i == j else 0.0))
    return np.asarray(f) @ coeff


def lambda_moment(basis: HermiteBasis, f, i: int):
    """(1/10) times the integral of (|v|^2 - 5) v_i sqrt(mu) f over velocity."""
    coeff = basis.coefficients_of(lambda v: (np.sum(v**2, axis=1) - 5.0) * v[:, i] / 10.0)
    return np.asarray(f) @ coeff


# ---------------------------------------------------------------------------
# weights and weighted norms


@dataclass(frozen=True)
class WeightSpec:
    """Polynomial velocity weight <v>^(exponent) for derivative orders (|alpha|, |beta|)."""

    l: float = 0.0
    gamma: float = 0.0
    s: float = 0.5
    alpha_order: int = 0
    beta_order: int = 0

    def __post_init__(self):
        if self.l < 0:
            raise ValidationError(f"weight exponent l must be >= 0, got {self.l}")
        if not 0 < self.s < 1:
            raise ValidationError(f"s must lie in (0, 1), got {self.s}")
        if not self.gamma > -3:
            raise ValidationError(f"gamma must exceed -3, got {self.gamma}")

    @property
    def hard(self) -> bool:
        return self.gamma >= -2.0 * self.s

    @property
    def exponent(self) -> float:
        if self.hard:
            return self.l - self.alpha_order - self.beta_order
        g, s = self.gamma, self.s
        return self.l - (-3.0 * g / s + g) * self.alpha_order - (-3.0 * g / s) * self.beta_order

    def with_orders(self, alpha_order, beta_order):
        return WeightSpec(self.l, self.gamma, self.s, alpha_order, beta_order)

    def values(self, v):
        return japanese_bracket(v) ** self.exponent


def japanese_bracket(v):
    v = np.asarray(v, dtype=float)
    return np.sqrt(1.0 + np.sum(v**2, axis=-1))


def weighted_velocity_sq(basis: HermiteBasis, coeffs, exponent: float, sobolev_order: float = 0.0):
    """Squared velocity norm of <v>^exponent (1-Laplacian)^(order/2) f for each leading index."""
    coeffs = np.asarray(coeffs)
    if sobolev_order:
        coeffs = coeffs @ basis.sobolev_matrix(sobolev_order).T
    if exponent == 0.0:
        return np.sum(coeffs**2, axis=-1)
    p = basis.values_at_nodes(coeffs)
    wt = basis.quad_weights * japanese_bracket(basis.quad_nodes) ** (2.0 * exponent)
    return np.sum(p**2 * wt, axis=-1)


def weighted_norm(basis: HermiteBasis, f, w: WeightSpec, sobolev_order: float = 0.0, grid: TorusGrid | None = None):
    """||<v>^{w.exponent} <v>^{gamma/2} (1-Laplacian_v)^{order/2} f||_{L^2(x,v)}.

    Supported Sobolev orders are 0, s, 1 and 1+s.
    """
    allowed = (0.0, w.s, 1.0, 1.0 + w.s)
    if not any(abs(sobolev_order - a) < 1e-14 for a in allowed):
        raise ValidationError(f"unsupported Sobolev order {sobolev_order}; allowed {allowed}")
    v, tmpl = _unwrap(f)
    if tmpl is not None:
        grid = tmpl.grid
    sq = weighted_velocity_sq(basis, v, w.exponent + 0.5 * w.gamma, sobolev_order)
    total = np.sum(sq)
    if grid is not None:
        total *= grid.dx
    return float(np.sqrt(total))
