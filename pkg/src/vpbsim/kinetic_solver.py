"""IMEX time integration of the perturbed two-species kinetic system.

The perturbation ``f = [f_+, f_-]`` obeys

    df/dt + (1/eps) v.grad_x f + (1/eps) grad_x phi . v sqrt(mu) q1 + (1/eps^2) L f
        = q0 grad_x phi . grad_v f - (1/2) q0 grad_x phi . v f + (1/eps) Gamma(f, f),
    -Laplacian phi = <f . q1, sqrt(mu)>.

Only the linear collision term is implicit. Transport, field and nonlinear
terms are explicit, with the spatial 2/3-rule applied to their sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .collision import BGK, BOLTZMANN, CollisionOperator, apply_bgk_collision, apply_Gamma
from .errors import ChargeNeutralityError, NumericalAbort, PositivityError, ValidationError
from .spatial import TorusGrid, poisson_solve
from .velocity_space import (
    HermiteBasis,
    MacroState,
    TwoSpeciesDistribution,
    fluid_moments,
)

SCHEMES = {
    "imex-euler": "imex-euler",
    "euler": "imex-euler",
    "imex-ars222": "imex-ars222",
    "ars222": "imex-ars222",
}

_ARS_GAMMA = 1.0 - 1.0 / math.sqrt(2.0)
_ARS_DELTA = 1.0 - 1.0 / (2.0 * _ARS_GAMMA)


@dataclass(frozen=True)
class KineticConfig:
    eps: float
    dt: float
    t_end: float
    scheme: str = "imex-ars222"
    collision_backend: str = BGK
    cfl_safety: float = 0.25
    record_every: int = 1
    nonlinear: bool = True
    max_halvings: int = 10

    def __post_init__(self):
        if not 0 < self.eps <= 1:
            raise ValidationError(f"eps must lie in (0, 1], got {self.eps}")
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= 0:
            raise ValidationError(f"t_end must be non-negative, got {self.t_end}")
        key = str(self.scheme).lower()
        if key not in SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}; choose imex-euler or imex-ars222")
        object.__setattr__(self, "scheme", SCHEMES[key])
        if not 0 < self.cfl_safety <= 1:
            raise ValidationError(f"cfl_safety must lie in (0, 1], got {self.cfl_safety}")
        if int(self.record_every) < 1:
            raise ValidationError(f"record_every must be >= 1, got {self.record_every}")

    def max_dt(self, basis: HermiteBasis, grid: TorusGrid) -> float:
        return self.cfl_safety * self.eps * grid.dx / basis.v_max

    def check_cfl(self, basis, grid):
        limit = self.max_dt(basis, grid)
        if self.dt > limit * (1 + 1e-12):
            raise ValidationError(
                f"dt={self.dt:.6g} violates the transport CFL limit {limit:.6g} "
                f"(cfl_safety*eps*dx/v_max with eps={self.eps}, dx={grid.dx:.6g}, v_max={basis.v_max:.6g})"
            )

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.t_end / self.dt + 1e-9))


@dataclass(frozen=True)
class KineticState:
    t: float
    f: TwoSpeciesDistribution
    phi: np.ndarray
    grad_phi: np.ndarray


def potential(f: TwoSpeciesDistribution):
    n = f.values[0, :, 0] - f.values[1, :, 0]
    return poisson_solve(f.grid, n)


def make_state(t, f: TwoSpeciesDistribution) -> KineticState:
    phi, grad = potential(f)
    return KineticState(float(t), f, phi, grad)


def well_prepared_initial(basis: HermiteBasis, grid: TorusGrid, rho0, u0, theta0, n0) -> TwoSpeciesDistribution:
    """Macroscopic initial data with prescribed density, velocity, temperature and charge.

    f_s = (rho0 + s n0/2) sqrt(mu) + u0 . v sqrt(mu) + theta0 (|v|^2 - 3)/2 sqrt(mu).
    """
    if basis.K < 2:
        raise ValidationError("well-prepared data needs K >= 2")
    shape = (grid.n_points,)
    rho0 = np.broadcast_to(np.asarray(rho0, dtype=float), shape)
    theta0 = np.broadcast_to(np.asarray(theta0, dtype=float), shape)
    n0 = np.broadcast_to(np.asarray(n0, dtype=float), shape)
    u0 = np.broadcast_to(np.asarray(u0, dtype=float), (3,) + shape)
    mean = float(np.mean(n0))
    if abs(mean) > 1e-10 * max(1.0, float(np.max(np.abs(n0)))):
        raise ChargeNeutralityError(mean)
    shared = np.multiply.outer(theta0, 0.5 * basis.energy_vector)
    for a in range(3):
        shared += np.multiply.outer(u0[a], basis.v_sqrt_mu(a))
    vals = np.stack([shared, shared.copy()])
    vals[0, :, 0] += rho0 + 0.5 * n0
    vals[1, :, 0] += rho0 - 0.5 * n0
    return TwoSpeciesDistribution(basis, grid, vals)


@dataclass
class SolverStats:
    rhs_evaluations: int = 0
    max_overflow: float = 0.0
    halvings: int = 0
    factorizations: int = 0


class KineticSolver:
    """Integrator bound to a basis, grid, collision operator and configuration.

    Parameters
    ----------
    source : callable, optional
        Extra explicit forcing ``source(t) -> array (2, n, M)``; used for
        manufactured-solution tests.
    """

    def __init__(
        self,
        basis: HermiteBasis,
        grid: TorusGrid,
        operator: CollisionOperator,
        config: KineticConfig,
        source: Callable[[float], np.ndarray] | None = None,
        check_cfl: bool = True,
    ):
        if operator.basis.K != basis.K:
            raise ValidationError("collision operator and basis degree caps differ")
        if config.collision_backend != operator.backend:
            raise ValidationError(
                f"config back-end {config.collision_backend!r} differs from operator back-end {operator.backend!r}"
            )
        if check_cfl:
            config.check_cfl(basis, grid)
        self.basis = basis
        self.grid = grid
        self.op = operator
        self.config = config
        self.source = source
        self.stats = SolverStats()
        self._factors = {}
        self._quad = HermiteBasis(basis.K, quad_order=basis.K + 4)
        e1 = basis.index_of[(1, 0, 0)]
        self._e1 = e1
        self._V1 = basis.mult_matrices[0]
        self._R1 = basis.raise_matrices[0]
        self._ik = 1j * grid.wavenumbers
        self._ik[-1] = 0.0
        self._mask = grid.dealias_mask

    # ---- right-hand side ------------------------------------------------

    def _overflow(self, vals):
        top = vals[..., self.basis.top_degree]
        fac = np.sqrt(self.basis.indices[self.basis.top_degree, 0] + 1.0)
        return float(np.max(np.abs(top * fac))) if top.size else 0.0

    def stiff(self, vals):
        eps = self.config.eps
        M = self.basis.M
        stacked = np.concatenate([vals[0], vals[1]], axis=-1) @ self.op.L_matrix.T
        return -np.stack([stacked[:, :M], stacked[:, M:]]) / eps**2

    def nonstiff(self, vals, t=0.0):
        """Explicit tendency at time ``t``."""
        eps = self.config.eps
        grid = self.grid
        self.stats.rhs_evaluations += 1
        n = vals[0, :, 0] - vals[1, :, 0]
        _, grad = poisson_solve(grid, n)
        E = grad[0]

        spec = np.fft.rfft(vals, axis=1)
        dx_vals = np.fft.irfft(spec * self._ik[None, :, None], n=grid.n_points, axis=1)
        out = -(dx_vals @ self._V1.T) / eps
        out[0, :, self._e1] -= E / eps
        out[1, :, self._e1] += E / eps
        # q0 E (d/dv1 - v1/2) f = -q0 E a^+ f  (a^+ raising operator along v1)
        raised = vals @ self._R1.T
        out[0] -= E[:, None] * raised[0]
        out[1] += E[:, None] * raised[1]
        self.stats.max_overflow = max(self.stats.max_overflow, self._overflow(vals))

        if self.config.nonlinear:
            if self.op.backend == BOLTZMANN:
                out += apply_Gamma(self.op, vals, vals) / eps
            else:
                relax = apply_bgk_collision(self.basis, vals, eps, self._quad)
                out += (relax - self.stiff(vals) * eps**2) / eps**2
        if self.source is not None:
            out += self.source(t)
        spec = np.fft.rfft(out, axis=1) * self._mask[None, :, None]
        return np.fft.irfft(spec, n=grid.n_points, axis=1)

    def rhs(self, state: KineticState):
        """(stiff, nonstiff) time derivatives at ``state``."""
        vals = state.f.values
        return self.stiff(vals), self.nonstiff(vals, state.t)

    # ---- implicit solves --------------------------------------------------

    def _implicit(self, coef, rhs):
        """Solve (I + coef/eps^2 L) y = rhs at every grid point."""
        key = float(coef)
        fac = self._factors.get(key)
        if fac is None:
            A = np.eye(2 * self.basis.M) + coef / self.config.eps**2 * self.op.L_matrix
            fac = cho_factor(A)
            self._factors[key] = fac
            self.stats.factorizations += 1
        M = self.basis.M
        stacked = np.concatenate([rhs[0], rhs[1]], axis=-1)
        sol = cho_solve(fac, stacked.T).T
        return np.stack([sol[:, :M], sol[:, M:]])

    def _step_values(self, vals, t, dt):
        if self.config.scheme == "imex-euler":
            rhs = vals + dt * self.nonstiff(vals, t)
            return self._implicit(dt, rhs)
        g, d = _ARS_GAMMA, _ARS_DELTA
        E1 = self.nonstiff(vals, t)
        Y2 = self._implicit(g * dt, vals + g * dt * E1)
        E2 = self.nonstiff(Y2, t + g * dt)
        I2 = self.stiff(Y2)
        rhs = vals + dt * (d * E1 + (1 - d) * E2) + dt * (1 - g) * I2
        return self._implicit(g * dt, rhs)

    def _advance(self, vals, t, dt, depth):
        try:
            return self._step_values(vals, t, dt)
        except PositivityError as exc:
            if depth >= self.config.max_halvings:
                raise NumericalAbort(f"positivity lost after {depth} step halvings at t={t:.6g}: {exc}") from exc
            self.stats.halvings += 1
            half = self._advance(vals, t, 0.5 * dt, depth + 1)
            return self._advance(half, t + 0.5 * dt, 0.5 * dt, depth + 1)

    def step(self, state: KineticState, dt: float | None = None) -> KineticState:
        dt = self.config.dt if dt is None else dt
        new = self._advance(state.f.values, state.t, dt, 0)
        if not np.all(np.isfinite(new)):
            raise NumericalAbort(f"non-finite values at t={state.t + dt:.6g}")
        return make_state(state.t + dt, state.f.with_values(new))

    def run(self, initial, progress: Callable[[int, int], None] | None = None) -> "Trajectory":
        if isinstance(initial, TwoSpeciesDistribution):
            state = make_state(0.0, initial)
        else:
            state = initial
        cfg = self.config
        snaps = [state]
        n = cfg.n_steps
        for k in range(1, n + 1):
            state = self.step(state)
            if k % cfg.record_every == 0:
                snaps.append(state)
            if progress is not None:
                progress(k, n)
        return Trajectory(snaps, cfg.eps, dict(vars(self.stats)))


@dataclass
class Trajectory:
    snapshots: list
    eps: float
    stats: dict = field(default_factory=dict)

    @property
    def times(self):
        return np.array([s.t for s in self.snapshots])

    def macro_series(self):
        return [fluid_moments(s.f.basis, s.f, self.eps, t=s.t) for s in self.snapshots]


def run(basis, grid, operator, config: KineticConfig, initial, **kwargs) -> Trajectory:
    """Convenience wrapper around :class:`KineticSolver`."""
    return KineticSolver(basis, grid, operator, config, **kwargs).run(initial)
