"""Pseudo-spectral solver for the limiting incompressible two-fluid system with Ohm's law.

    du/dt + u.grad u - nu Lap u + grad P = -(1/2) n grad phi,    div u = 0
    dtheta/dt + u.grad theta - kappa Lap theta = 0,              rho = -theta
    dn/dt + u.grad n - (sigma/2) Lap n + sigma n = 0,            -Lap phi = n
    j = n u - sigma (grad phi + grad n / 2),   omega = n theta

Linear terms are integrated exactly per Fourier mode; the nonlinear terms use a
second-order integrating-factor Runge-Kutta step with 2/3-rule dealiasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .collision import TransportCoefficients
from .errors import BlowUpError, ChargeNeutralityError, ValidationError
from .spatial import TorusGrid, leray_project, poisson_solve, x_derivative


@dataclass(frozen=True)
class FluidState:
    t: float
    u: np.ndarray  # (3, n)
    theta: np.ndarray
    n: np.ndarray

    @property
    def rho(self):
        return -self.theta


@dataclass(frozen=True)
class FluidConfig:
    dt: float
    t_end: float
    record_every: int = 1
    blowup_factor: float = 1e3

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= 0:
            raise ValidationError(f"t_end must be non-negative, got {self.t_end}")
        if int(self.record_every) < 1:
            raise ValidationError(f"record_every must be >= 1, got {self.record_every}")

    @property
    def n_steps(self):
        return int(math.floor(self.t_end / self.dt + 1e-9))


def _coeffs(c):
    if isinstance(c, TransportCoefficients):
        nu, kappa, sigma = c.nu, c.kappa, c.sigma
    else:
        nu, kappa, sigma = c
    if min(nu, kappa, sigma) <= 0:
        raise ValidationError(f"transport coefficients must be positive, got {(nu, kappa, sigma)}")
    return float(nu), float(kappa), float(sigma)


def _advect(grid, u1, field_):
    return grid.dealias(u1 * x_derivative(grid, field_))


def nonlinear_terms(grid: TorusGrid, state: FluidState):
    """Advection and Lorentz-force tendencies (before Leray projection)."""
    u1 = state.u[0]
    _, grad = poisson_solve(grid, state.n)
    du = np.stack([-_advect(grid, u1, state.u[a]) for a in range(3)])
    du -= 0.5 * grid.dealias(state.n * grad)
    du = leray_project(grid, du)
    dth = -_advect(grid, u1, state.theta)
    dn = -_advect(grid, u1, state.n)
    return du, dth, dn


def linear_rates(grid: TorusGrid, coeffs):
    """Per-mode linear decay rates for (u, theta, n)."""
    nu, kappa, sigma = _coeffs(coeffs)
    k2 = grid.wavenumbers**2
    return -nu * k2, -kappa * k2, -(0.5 * sigma * k2 + sigma)


def fluid_rhs(grid: TorusGrid, state: FluidState, coeffs):
    """Time derivatives of (u, theta, n)."""
    lu, lt, ln = linear_rates(grid, coeffs)
    du, dth, dn = nonlinear_terms(grid, state)
    lin = lambda rate, f: grid.inverse(rate * grid.forward(f))
    du = du + lin(lu, state.u)
    return du, dth + lin(lt, state.theta), dn + lin(ln, state.n)


def ohm_current(grid: TorusGrid, state: FluidState, coeffs):
    """Current j = n u - sigma (grad phi + grad n / 2) and omega = n theta."""
    _, _, sigma = _coeffs(coeffs)
    _, grad = poisson_solve(grid, state.n)
    grad_n = np.zeros_like(grad)
    grad_n[0] = x_derivative(grid, state.n)
    j = state.n * state.u - sigma * (grad + 0.5 * grad_n)
    return j, state.n * state.theta


def initial_state(grid: TorusGrid, rho0, u0, theta0, n0) -> FluidState:
    """Limit initial data: projected velocity and the mixed temperature (3/5) theta0 - (2/5) rho0."""
    shape = (grid.n_points,)
    n0 = np.broadcast_to(np.asarray(n0, dtype=float), shape).copy()
    mean = float(np.mean(n0))
    if abs(mean) > 1e-10 * max(1.0, float(np.max(np.abs(n0)))):
        raise ChargeNeutralityError(mean)
    u = leray_project(grid, np.broadcast_to(np.asarray(u0, dtype=float), (3,) + shape))
    theta = 0.6 * np.broadcast_to(np.asarray(theta0, dtype=float), shape) - 0.4 * np.broadcast_to(
        np.asarray(rho0, dtype=float), shape
    )
    return FluidState(0.0, u, np.array(theta), n0)


class FluidSolver:
    def __init__(self, grid: TorusGrid, coeffs, config: FluidConfig):
        self.grid = grid
        self.coeffs = _coeffs(coeffs)
        self.config = config
        rates = linear_rates(grid, self.coeffs)
        self._decay = tuple(np.exp(r * config.dt) for r in rates)

    def _to_spec(self, state):
        g = self.grid
        return g.forward(state.u), g.forward(state.theta), g.forward(state.n)

    def step(self, state: FluidState) -> FluidState:
        """Integrating-factor Heun step; exact for the linear part."""
        g = self.grid
        dt = self.config.dt
        umax = float(np.max(np.abs(state.u[0])))
        if umax * dt > g.dx:
            raise ValidationError(f"dt={dt} violates the advection CFL limit dx/max|u1|={g.dx / umax:.4g}")
        eu, et, en = self._decay
        s0 = self._to_spec(state)
        N0 = [g.forward(a) for a in nonlinear_terms(g, state)]
        pred = [e * (a + dt * b) for e, a, b in zip((eu, et, en), s0, N0)]
        mid = FluidState(state.t + dt, g.inverse(pred[0]), g.inverse(pred[1]), g.inverse(pred[2]))
        N1 = [g.forward(a) for a in nonlinear_terms(g, mid)]
        new = [e * a + 0.5 * dt * (e * b + c) for e, a, b, c in zip((eu, et, en), s0, N0, N1)]
        u = leray_project(g, g.inverse(new[0]))
        return FluidState(state.t + dt, u, g.inverse(new[1]), g.inverse(new[2]))

    def run(self, initial: FluidState):
        cfg = self.config
        ref = max(1.0, float(np.max(np.abs(initial.u))))
        state = initial
        out = [state]
        for k in range(1, cfg.n_steps + 1):
            state = self.step(state)
            size = float(np.max(np.abs(state.u)))
            if not np.isfinite(size) or size > cfg.blowup_factor * ref:
                raise BlowUpError(f"velocity magnitude {size:.3e} exceeded {cfg.blowup_factor:g} x initial at t={state.t:.6g}")
            if k % cfg.record_every == 0:
                out.append(state)
        return out


def fluid_run(grid: TorusGrid, coeffs, config: FluidConfig, rho0, u0, theta0, n0):
    return FluidSolver(grid, coeffs, config).run(initial_state(grid, rho0, u0, theta0, n0))
