"""Linearized and bilinear collision operators for two species.

Two back-ends are provided:

* ``bgk``: a two-species relaxation model. Each species relaxes towards a
  Maxwellian with its own density and the mixture velocity and temperature,
  and in addition the species average relaxes towards the mixture
  Maxwellian. Its linearization has the same six-dimensional null space as
  the Boltzmann operator.
* ``boltzmann``: Galerkin projection of the non-cutoff Boltzmann collision
  operator with angular profile ``sin(theta) b(cos theta) = theta^(-1-2s)`` on
  ``(theta_min, pi/2)``.

The bilinear form ``T(g1, g2) = mu^{-1/2} Q(mu^{1/2} g1, mu^{1/2} g2)`` is
stored as the tensor ``Gamma[m, n, p] = <T(psi_m, psi_n), psi_p>``.
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.integrate import lebedev_rule
from scipy.special import roots_genlaguerre

from .errors import (
    CacheError,
    CacheHashMismatch,
    PositivityError,
    QuadratureConvergenceError,
    SingularOperatorError,
    ValidationError,
)
from .velocity_space import (
    HermiteBasis,
    TwoSpeciesDistribution,
    _rewrap,
    _unwrap,
    hermite_values,
    project_micro,
    projection_matrix,
    single_species_null_basis,
)

BGK = "bgk"
BOLTZMANN = "boltzmann"
BACKENDS = (BGK, BOLTZMANN)

CACHE_MAGIC = b"VPBT"
CACHE_VERSION = 1
DROP_TOL = 1e-14

_LEBEDEV_ORDERS = (3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 25, 27, 29, 31, 35, 41, 47, 53, 59, 65)


@dataclass(frozen=True)
class KernelSpec:
    """Collision kernel ``C_phi |v - v_*|^gamma b(cos theta)`` with angular cutoff.

    ``quad_orders`` is ``(n_theta, n_phi)``: Gauss-Legendre nodes in ``log theta``
    and trapezoid nodes in the azimuth. ``None`` entries pick defaults.
    """

    gamma: float = 0.0
    s: float = 0.5
    C_phi: float = 1.0
    theta_min: float = 0.1
    quad_orders: tuple = (24, None)

    def __post_init__(self):
        if not self.gamma > -3:
            raise ValidationError(f"gamma must exceed -3, got {self.gamma}")
        if not 0 < self.s < 1:
            raise ValidationError(f"s must lie in (0, 1), got {self.s}")
        if not self.C_phi > 0:
            raise ValidationError(f"C_phi must be positive, got {self.C_phi}")
        if not 0 < self.theta_min < np.pi / 2:
            raise ValidationError(f"theta_min must lie in (0, pi/2), got {self.theta_min}")

    def angular_mass(self) -> float:
        """Integral of theta^(-1-2s) over (theta_min, pi/2)."""
        s2 = 2.0 * self.s
        return (self.theta_min ** (-s2) - (np.pi / 2) ** (-s2)) / s2


@dataclass(frozen=True, eq=False)
class CollisionOperator:
    backend: str
    basis: HermiteBasis
    L_matrix: np.ndarray
    Gamma_tensor: np.ndarray | None = None
    kernel: KernelSpec | None = None
    provenance: bytes = b""

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValidationError(f"unknown backend {self.backend!r}")
        for arr in (self.L_matrix, self.Gamma_tensor):
            if arr is not None:
                arr.setflags(write=False)
        if not self.provenance:
            object.__setattr__(self, "provenance", provenance_hash(self.backend, self.basis, self.kernel))

    @property
    def M(self):
        return self.basis.M

    def blocks(self):
        """(L_{++}, L_{+-}) blocks; the operator is species-symmetric."""
        M = self.M
        return self.L_matrix[:M, :M], self.L_matrix[:M, M:]

    def single_species(self):
        """Operator acting on the species sum (null space 1, v, |v|^2)."""
        a, b = self.blocks()
        return 0.5 * (a + b)

    def screened(self):
        """Operator acting on the species difference (null space 1)."""
        a, b = self.blocks()
        return a - b


def provenance_hash(backend, basis: HermiteBasis, kernel: KernelSpec | None) -> bytes:
    k = kernel if kernel is not None else _BGK_KERNEL_FIELDS
    text = "|".join(
        [backend, str(basis.K), str(basis.M)] + [repr(float(x)) for x in (k.gamma, k.s, k.C_phi, k.theta_min)]
    )
    return hashlib.sha256(text.encode()).digest()


@dataclass(frozen=True)
class _KernelFields:
    gamma: float = 0.0
    s: float = 0.0
    C_phi: float = 0.0
    theta_min: float = 0.0


_BGK_KERNEL_FIELDS = _KernelFields()


# ---------------------------------------------------------------------------
# BGK surrogate


def bgk_operator(basis: HermiteBasis) -> CollisionOperator:
    """Linearized two-species relaxation operator.

    Acting on the species sum it is ``2 (I - P0)`` with ``P0`` the projection onto
    {1, v, |v|^2} sqrt(mu); on the species difference it is ``I - Pi0`` with
    ``Pi0`` the projection onto sqrt(mu).
    """
    if basis.K < 2:
        raise ValidationError(f"BGK operator needs K >= 2, got {basis.K}")
    M = basis.M
    U = single_species_null_basis(basis)
    micro = np.eye(M) - U.T @ U
    screened = np.eye(M)
    screened[0, 0] = 0.0
    pp = micro + 0.5 * screened
    pm = micro - 0.5 * screened
    L = np.block([[pp, pm], [pm, pp]])
    return CollisionOperator(BGK, basis, L)


def _maxwellian_ratio(nodes, rho, U, T):
    """M[rho, U, T](v) / mu(v) evaluated at nodes; broadcasting over leading axes."""
    v2 = np.sum(nodes**2, axis=-1)
    diff2 = np.sum((nodes - U[..., None, :]) ** 2, axis=-1)
    T = T[..., None]
    return rho[..., None] * T**-1.5 * np.exp(0.5 * v2 - 0.5 * diff2 / T)


def apply_bgk_collision(basis: HermiteBasis, f, eps: float, quad_basis: HermiteBasis | None = None):
    """Nonlinear relaxation term ``mu^{-1/2} C(F) / eps`` for ``F = mu + eps sqrt(mu) f``.

    ``C_s = (M_s[F] - F_s) + (Mbar - Fbar)`` with ``M_s`` the Maxwellian of species
    ``s`` density and mixture velocity/temperature, and bars denoting species
    averages. The result is projected onto the micro space so mass, mixture
    momentum and mixture energy are conserved to round-off. Its linearization is
    ``-L f`` with ``L`` from :func:`bgk_operator`.

    Raises :class:`PositivityError` if ``F`` is negative at a quadrature node.
    """
    if not eps > 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    vals, tmpl = _unwrap(f)
    qb = quad_basis or HermiteBasis(basis.K, quad_order=basis.K + 8)
    # quadrature basis has the same index order, so coefficients transfer directly
    p_nodes = vals @ qb.phi.T  # (2, ..., Nq)
    if np.any(1.0 + eps * p_nodes <= 0.0):
        raise PositivityError(f"distribution negative at a quadrature node (eps={eps})")

    e = basis.energy_vector
    vel = np.stack([basis.v_sqrt_mu(a) for a in range(3)])
    rho_s = 1.0 + eps * vals[..., 0]  # (2, ...)
    mom = eps * (vals[0] + vals[1]) @ vel.T  # (..., 3)
    energy = 6.0 + eps * ((vals[0] + vals[1]) @ e + 3.0 * (vals[0, ..., 0] + vals[1, ..., 0]))
    rho = rho_s[0] + rho_s[1]
    if np.any(rho_s <= 0):
        raise PositivityError("non-positive species density")
    U = mom / rho[..., None]
    T = (energy / rho - np.sum(U**2, axis=-1)) / 3.0
    if np.any(T <= 0):
        raise PositivityError("non-positive mixture temperature")

    Ms = np.stack([_maxwellian_ratio(qb.quad_nodes, rho_s[a], U, T) for a in range(2)])
    # coefficients of (M - mu)/sqrt(mu); subtracting at the nodes avoids cancellation
    dM = (Ms - 1.0) * qb.quad_weights @ qb.phi
    own = dM / eps - vals
    mean = 0.5 * (own[0] + own[1])
    out = own + mean[None]
    return _rewrap(project_micro(basis, out), tmpl)


# ---------------------------------------------------------------------------
# Boltzmann Galerkin assembly


def _odd_frame(ghat):
    """Orthonormal vectors perpendicular to ghat, both odd under ghat -> -ghat (as a set)."""
    axis = np.argmin(np.abs(ghat), axis=-1)
    a = np.eye(3)[axis]
    e1 = np.cross(ghat, a)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(ghat, e1)
    return e1, e2


@dataclass(frozen=True)
class _GalerkinQuadrature:
    V: np.ndarray
    g: np.ndarray
    weights: np.ndarray
    cos_t: np.ndarray
    sin_t: np.ndarray
    w_theta: np.ndarray
    n_phi: int


def _galerkin_quadrature(basis: HermiteBasis, kernel: KernelSpec, n_theta: int | None = None):
    K = basis.K
    nV = max(1, math.ceil((3 * K + 1) / 2))
    t_degree = (3 * K) // 2
    n_r = max(1, math.ceil((t_degree + 1) / 2))
    leb = next(o for o in _LEBEDEV_ORDERS if o >= max(3, 3 * K))
    n_th = n_theta or kernel.quad_orders[0] or 24
    n_phi = kernel.quad_orders[1] if len(kernel.quad_orders) > 1 and kernel.quad_orders[1] else K + 2

    xv, wv = hermgauss(nV)
    V = np.array(np.meshgrid(xv, xv, xv, indexing="ij")).reshape(3, -1).T
    wV = np.prod(np.array(np.meshgrid(wv, wv, wv, indexing="ij")).reshape(3, -1), axis=0)
    alpha = 0.5 * (1.0 + kernel.gamma)
    t, wt = roots_genlaguerre(n_r, alpha)
    r = 2.0 * np.sqrt(t)
    wr = wt * 2.0 ** (2.0 + kernel.gamma)
    xs, ws = lebedev_rule(leb)
    ghat = xs.T

    g = (r[:, None, None] * ghat[None, :, :]).reshape(-1, 3)
    wg = (wr[:, None] * ws[None, :]).reshape(-1)
    Vall = np.repeat(V, len(g), axis=0)
    gall = np.tile(g, (len(V), 1))
    W = np.repeat(wV, len(g)) * np.tile(wg, len(V)) * kernel.C_phi / (2.0 * np.pi) ** 3

    u, wu = np.polynomial.legendre.leggauss(n_th)
    lo, hi = np.log(kernel.theta_min), np.log(np.pi / 2)
    logt = 0.5 * (hi - lo) * u + 0.5 * (hi + lo)
    theta = np.exp(logt)
    w_theta = 0.5 * (hi - lo) * wu * theta ** (-2.0 * kernel.s)
    return _GalerkinQuadrature(Vall, gall, W, np.cos(theta), np.sin(theta), w_theta, n_phi)


def _loss_gain_chunk(basis: HermiteBasis, quad: _GalerkinQuadrature, sl):
    """Basis values at v and v_* and the angular integrals S_p for a chunk of points."""
    V = quad.V[sl]
    g = quad.g[sl]
    r = np.linalg.norm(g, axis=1)
    ghat = g / r[:, None]
    e1, e2 = _odd_frame(ghat)
    phis = 2.0 * np.pi * np.arange(quad.n_phi) / quad.n_phi
    # sigma directions, shape (Q, n_theta, n_phi, 3)
    perp = np.cos(phis)[None, None, :, None] * e1[:, None, None, :] + np.sin(phis)[None, None, :, None] * e2[:, None, None, :]
    sigma = quad.cos_t[None, :, None, None] * ghat[:, None, None, :] + quad.sin_t[None, :, None, None] * perp
    vprime = V[:, None, None, :] + 0.5 * r[:, None, None, None] * sigma
    w = quad.w_theta * (2.0 * np.pi / quad.n_phi)
    nq = len(r)
    gain = basis.weighted_poly_sum(vprime.reshape(nq, -1, 3), np.repeat(w, quad.n_phi))
    Y = basis.poly_values(V + 0.5 * g)
    X = basis.poly_values(V - 0.5 * g)
    S = gain - Y * np.sum(w) * quad.n_phi
    return X, Y, S


def _check_theta_convergence(basis, kernel, n_theta, tol, sample=64):
    coarse = _galerkin_quadrature(basis, kernel, n_theta)
    fine = _galerkin_quadrature(basis, kernel, 2 * n_theta)
    step = max(1, len(coarse.weights) // sample)
    sl = slice(0, step * sample, step)
    _, _, s1 = _loss_gain_chunk(basis, coarse, sl)
    _, _, s2 = _loss_gain_chunk(basis, fine, sl)
    scale = max(np.max(np.abs(s2)), 1e-300)
    err = np.max(np.abs(s1 - s2)) / scale
    if err > tol:
        raise QuadratureConvergenceError(float(np.linalg.norm(s1)), float(np.linalg.norm(s2)), tol)
    return err


def assemble_boltzmann(
    basis: HermiteBasis,
    kernel: KernelSpec,
    with_gamma: bool = True,
    chunk: int = 192,
    workers: int = 1,
    convergence_tol: float = 1e-9,
) -> CollisionOperator:
    """Galerkin matrices of the non-cutoff Boltzmann operator.

    The double velocity integral is computed in centre-of-mass and relative
    coordinates, which makes the quadrature exact for the polynomial part of
    the integrand; only the polar angle integral is approximate and its
    convergence is checked by doubling its node count on a sample of points.
    Chunks are independent and may be processed by ``workers`` threads; partial
    sums are reduced at the end.
    """
    if basis.K < 2:
        raise ValidationError(f"Boltzmann assembly needs K >= 2, got {basis.K}")
    n_theta = kernel.quad_orders[0] or 24
    _check_theta_convergence(basis, kernel, n_theta, convergence_tol)
    quad = _galerkin_quadrature(basis, kernel, n_theta)
    M = basis.M
    Q = len(quad.weights)
    slices = [slice(i, min(i + chunk, Q)) for i in range(0, Q, chunk)]

    def work(sl):
        X, Y, S = _loss_gain_chunk(basis, quad, sl)
        W = quad.weights[sl]
        SW = S * W[:, None]
        A1 = SW.T @ Y
        A2 = SW.T @ X
        G = None
        if with_gamma:
            Z = (X[:, :, None] * Y[:, None, :]).reshape(len(W), M * M)
            G = Z.T @ SW
        return A1, A2, G

    A1 = np.zeros((M, M))
    A2 = np.zeros((M, M))
    G = np.zeros((M * M, M)) if with_gamma else None
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(work, slices))
    else:
        parts = map(work, slices)
    for a1, a2, g in parts:
        A1 += a1
        A2 += a2
        if with_gamma:
            G += g

    L = np.block([[-2 * A1 - A2, -A2], [-A2, -2 * A1 - A2]])
    L = enforce_invariants(basis, L)
    Gamma = None
    if with_gamma:
        Gamma = G.reshape(M, M, M)
        Gamma[np.abs(Gamma) <= DROP_TOL] = 0.0
        Gamma[:, :, 0] = 0.0
    return CollisionOperator(BOLTZMANN, basis, L, Gamma, kernel)


def enforce_invariants(basis: HermiteBasis, L):
    """Symmetrize and make the collision invariants exact kernel vectors."""
    L = 0.5 * (L + L.T)
    R = np.eye(L.shape[0]) - projection_matrix(basis)
    L = R @ L @ R
    return 0.5 * (L + L.T)


# ---------------------------------------------------------------------------
# application


def apply_L(op: CollisionOperator, f):
    vals, tmpl = _unwrap(f)
    if vals.shape[0] != 2 or vals.shape[-1] != op.M:
        raise ValidationError(f"distribution shape {vals.shape} incompatible with operator size {op.M}")
    stacked = np.concatenate([vals[0], vals[1]], axis=-1)
    out = stacked @ op.L_matrix.T
    return _rewrap(np.stack([out[..., : op.M], out[..., op.M :]]), tmpl)


def apply_T(op: CollisionOperator, g1, g2):
    """Bilinear form T(g1, g2) on single-species coefficient arrays (..., M)."""
    if op.Gamma_tensor is None:
        raise ValidationError("bilinear tensor unavailable for the BGK back-end; use apply_bgk_collision")
    M = op.M
    g1 = np.asarray(g1)
    g2 = np.asarray(g2)
    outer = (g1[..., :, None] * g2[..., None, :]).reshape(g1.shape[:-1] + (M * M,))
    return outer @ op.Gamma_tensor.reshape(M * M, M)


def apply_Gamma(op: CollisionOperator, f, g):
    """Gamma_s(f, g) = T(f_s, g_s) + T(f_{-s}, g_s) for s = +, -."""
    fv, tmpl = _unwrap(f)
    gv, _ = _unwrap(g)
    total = fv[0] + fv[1]
    out = np.stack([apply_T(op, total, gv[0]), apply_T(op, total, gv[1])])
    return _rewrap(out, tmpl)


# ---------------------------------------------------------------------------
# transport coefficients


@dataclass(frozen=True)
class TransportCoefficients:
    nu: float
    kappa: float
    sigma: float
    hat_A: np.ndarray  # (3, 3, M)
    hat_B: np.ndarray  # (3, M)
    tilde_Phi: np.ndarray  # (3, M)
    tilde_Psi: np.ndarray  # (M,)
    residual: float = 0.0

    @classmethod
    def constant(cls, nu, kappa, sigma):
        z = np.zeros(0)
        return cls(float(nu), float(kappa), float(sigma), z, z, z, z)


def _restricted_solver(A, null_rows, name, tol=1e-10):
    """Solve A x = b for b orthogonal to the null space, x orthogonal to it too."""
    lam = np.linalg.eigvalsh(A)
    k = null_rows.shape[0]
    nonzero = np.sort(lam)[k:]
    scale = max(np.max(np.abs(lam)), 1.0)
    if nonzero.size and nonzero[0] <= tol * scale:
        raise SingularOperatorError(f"{name} is singular on the complement of its null space", np.sort(lam)[: k + 3])
    Pn = null_rows.T @ null_rows
    A_reg = A + Pn
    lu = np.linalg.inv(A_reg)
    return lambda b: (np.asarray(b) - np.asarray(b) @ Pn) @ lu.T


def transport_coefficients(op: CollisionOperator) -> TransportCoefficients:
    """Viscosity, heat conductivity and electrical conductivity with closure vectors."""
    basis = op.basis
    if basis.K < 3:
        raise ValidationError(f"transport coefficients need K >= 3, got {basis.K}")
    Lsum = op.single_species()
    Lscr = op.screened()
    solve_sum = _restricted_solver(Lsum, single_species_null_basis(basis), "species-sum operator")
    solve_scr = _restricted_solver(Lscr, basis.sqrt_mu[None, :], "species-difference operator")

    A = np.zeros((3, 3, basis.M))
    for i in range(3):
        for j in range(3):
            A[i, j] = basis.coefficients_of(
                lambda v, i=i, j=j: v[:, i] * v[:, j] - (np.sum(v**2, axis=1) / 3.0 if i == j else 0.0)
            )
    B = np.stack([basis.coefficients_of(lambda v, i=i: v[:, i] * (0.5 * np.sum(v**2, axis=1) - 2.5)) for i in range(3)])
    Phi = np.stack([basis.v_sqrt_mu(i) for i in range(3)])
    Psi = 0.5 * basis.energy_vector

    hat_A = solve_sum(A)
    hat_B = solve_sum(B)
    tilde_Phi = solve_scr(Phi)
    tilde_Psi = solve_scr(Psi)
    res = max(
        np.max(np.abs(hat_A @ Lsum.T - A)),
        np.max(np.abs(hat_B @ Lsum.T - B)),
        np.max(np.abs(tilde_Phi @ Lscr.T - Phi)),
        np.max(np.abs(tilde_Psi @ Lscr.T - Psi)),
    )
    nu = float(np.sum(hat_A * A)) / 20.0
    kappa = float(np.sum(hat_B * B)) / 15.0
    sigma = 2.0 / 3.0 * float(np.sum(tilde_Phi * Phi))
    return TransportCoefficients(nu, kappa, sigma, hat_A, hat_B, tilde_Phi, tilde_Psi, float(res))


def isotropy_defect(basis: HermiteBasis, tc: TransportCoefficients, cutoff: float = 0.3) -> float:
    """Spread of the ratio tilde_Phi_i / (v_i sqrt(mu)) across components at the nodes."""
    vals = basis.values_at_nodes(tc.tilde_Phi)  # (3, Nq)
    v = basis.quad_nodes
    mask = np.all(np.abs(v) > cutoff, axis=1)
    ratios = vals[:, mask] / v[mask].T
    scale = max(np.max(np.abs(ratios)), 1e-300)
    return float(np.max(np.ptp(ratios, axis=0)) / scale)


# ---------------------------------------------------------------------------
# cache


_TRIPLET = np.dtype([("m", "<u4"), ("n", "<u4"), ("p", "<u4"), ("value", "<f8")])
_HEADER = struct.Struct("<4sIIII4d32s")


def _header_hash(backend, K, M, gamma, s, C_phi, theta_min):
    text = "|".join([backend, str(K), str(M)] + [repr(float(x)) for x in (gamma, s, C_phi, theta_min)])
    return hashlib.sha256(text.encode()).digest()


def cache_store(op: CollisionOperator, path) -> None:
    """Write the operator to the binary cache format."""
    k = op.kernel if op.kernel is not None else _BGK_KERNEL_FIELDS
    flags = 1 | (2 if op.backend == BOLTZMANN else 0)
    header = _HEADER.pack(
        CACHE_MAGIC, CACHE_VERSION, op.basis.K, op.M, flags, k.gamma, k.s, k.C_phi, k.theta_min, op.provenance
    )
    if op.Gamma_tensor is not None:
        idx = np.nonzero(np.abs(op.Gamma_tensor) > DROP_TOL)
        trip = np.empty(len(idx[0]), dtype=_TRIPLET)
        trip["m"], trip["n"], trip["p"] = idx
        trip["value"] = op.Gamma_tensor[idx]
    else:
        trip = np.empty(0, dtype=_TRIPLET)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(op.L_matrix, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", len(trip)))
        fh.write(trip.tobytes())
    tmp.replace(path)


def cache_load(path, basis: HermiteBasis | None = None, kernel: KernelSpec | None = None, backend: str | None = None):
    """Read an operator written by :func:`cache_store`, validating structure and provenance."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != CACHE_MAGIC:
        raise CacheError(f"{path}: not a collision cache (bad magic or truncated header)")
    magic, version, K, M, flags, gamma, s, C_phi, theta_min, digest = _HEADER.unpack_from(data)
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    if M != (K + 1) * (K + 2) * (K + 3) // 6:
        raise CacheError(f"{path}: inconsistent K={K}, M={M}")
    off = _HEADER.size
    nL = (2 * M) ** 2 * 8
    if len(data) < off + nL + 8:
        raise CacheError(f"{path}: truncated matrix block")
    L = np.frombuffer(data, dtype="<f8", count=(2 * M) ** 2, offset=off).reshape(2 * M, 2 * M).astype(float)
    off += nL
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) != off + count * _TRIPLET.itemsize:
        raise CacheError(f"{path}: length mismatch (expected {off + count * _TRIPLET.itemsize} bytes, got {len(data)})")
    backend_read = BOLTZMANN if flags & 2 else BGK
    if digest != _header_hash(backend_read, K, M, gamma, s, C_phi, theta_min):
        raise CacheHashMismatch(f"{path}: provenance hash does not match header fields")
    if backend is not None and backend != backend_read:
        raise CacheHashMismatch(f"{path}: cached back-end {backend_read} differs from requested {backend}")
    if basis is not None and basis.K != K:
        raise CacheHashMismatch(f"{path}: cached K={K} differs from requested K={basis.K}")
    kern = None
    if backend_read == BOLTZMANN:
        kern = KernelSpec(gamma, s, C_phi, theta_min)
        if kernel is not None and provenance_hash(BOLTZMANN, HermiteBasis(K), kernel) != digest:
            raise CacheHashMismatch(f"{path}: cached kernel differs from requested kernel")
    use_basis = basis if basis is not None else HermiteBasis(K)
    Gamma = None
    if backend_read == BOLTZMANN:
        trip = np.frombuffer(data, dtype=_TRIPLET, count=count, offset=off)
        Gamma = np.zeros((M, M, M))
        Gamma[trip["m"], trip["n"], trip["p"]] = trip["value"]
    return CollisionOperator(backend_read, use_basis, L, Gamma, kern, digest)


def cache_filename(backend, basis: HermiteBasis, kernel: KernelSpec | None = None) -> str:
    return f"{backend}_K{basis.K}_{provenance_hash(backend, basis, kernel).hex()[:16]}.vpbt"


def build_operator(backend, basis, kernel=None, cache_dir=None, allow_assemble=True, **assembly):
    """Load from ``cache_dir`` if present, else assemble (and store when a directory is given)."""
    if backend == BGK:
        return bgk_operator(basis)
    if backend != BOLTZMANN:
        raise ValidationError(f"unknown collision backend {backend!r}")
    kernel = kernel or KernelSpec()
    if cache_dir is not None:
        path = Path(cache_dir) / cache_filename(backend, basis, kernel)
        if path.exists():
            return cache_load(path, basis, kernel, backend)
    if not allow_assemble:
        raise CacheError(f"no cached operator for {backend} K={basis.K} and assembly is disabled")
    op = assemble_boltzmann(basis, kernel, **assembly)
    if cache_dir is not None:
        cache_store(op, Path(cache_dir) / cache_filename(backend, basis, kernel))
    return op
