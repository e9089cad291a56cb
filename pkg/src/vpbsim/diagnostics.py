"""Energy functionals, conservation residuals and limit-deviation metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields

import numpy as np

from .collision import TransportCoefficients
from .errors import ValidationError
from .fluid_solver import FluidState, ohm_current
from .spatial import TorusGrid, leray_project, poisson_solve, x_derivative
from .velocity_space import (
    HermiteBasis,
    MacroState,
    WeightSpec,
    fluid_moments,
    lambda_moment,
    project_micro,
    theta_moment,
    weighted_velocity_sq,
)


def _velocity_multi_indices(order):
    return [b for b in itertools.product(range(order + 1), repeat=3) if sum(b) == order]


class _Workspace:
    """Extended basis and derivative matrices for velocity derivatives up to order N."""

    _cache: dict = {}

    def __new__(cls, basis: HermiteBasis, N: int):
        key = (basis.K, basis.quad_order, N)
        if key not in cls._cache:
            obj = super().__new__(cls)
            obj.basis = basis
            obj.ext = HermiteBasis(basis.K + N, quad_order=basis.K + N + 2)
            obj.frac = {}
            cls._cache[key] = obj
        return cls._cache[key]

    def derivative(self, coeffs, beta):
        out = self.basis.embed(coeffs, self.ext)
        for axis, k in enumerate(beta):
            for _ in range(k):
                out = out @ self.ext.deriv_matrices[axis].T
        return out

    def sobolev(self, order):
        if order not in self.frac:
            self.frac[order] = self.ext.sobolev_matrix(order)
        return self.frac[order]


def _sq(ws: _Workspace, coeffs, exponent, order=0.0, species_weight=None, dx=1.0):
    """Sum over species and grid of squared weighted velocity norms."""
    c = coeffs
    if c.shape[-1] != ws.ext.M:
        c = ws.basis.embed(c, ws.ext)
    if order:
        c = c @ ws.sobolev(order).T
    sq = weighted_velocity_sq(ws.ext, c, exponent)  # (2, n)
    if species_weight is not None:
        sq = sq * species_weight
    return float(np.sum(sq) * dx)


@dataclass(frozen=True)
class EnergyConstants:
    """Combination constants of the weighted functional.

    ``E_Nl = outer * (inner * E_N + W_x) + velocity * W_v`` where ``W_x`` holds the
    weighted spatial-derivative micro terms (plus the eps-scaled top order) and
    ``W_v`` the terms with at least one velocity derivative. The dissipation is
    combined the same way.
    """

    inner: float = 4.0
    outer: float = 1.0
    velocity: float = 1.0

    def __post_init__(self):
        if min(self.inner, self.outer, self.velocity) <= 0:
            raise ValidationError(f"energy constants must be positive, got {self}")


@dataclass(frozen=True)
class EnergyRow:
    t: float
    E_N: float
    D_N_low: float
    D_N_high: float
    E_Nl: float
    D_low: float
    D_high: float
    D_low_normalized: float
    D_high_normalized: float
    micro: float
    boussinesq: float
    divu: float
    ohm: float
    W_x: float = 0.0
    W_v: float = 0.0
    charge_res: float = float("nan")
    mass_drift: float = float("nan")


CSV_COLUMNS = ("t", "E_N", "D_low", "D_high", "E_Nl", "micro", "boussinesq", "divu", "ohm", "charge_res", "mass_drift")


def energy_functionals(
    snapshot,
    eps: float,
    weight: WeightSpec,
    N: int,
    sigma: float | None = None,
    exp_weight: bool = False,
    constants: EnergyConstants | None = None,
) -> EnergyRow:
    """Instant energy, dissipation surrogates and macroscopic deviations for one snapshot.

    Dissipation norms use the sandwich
    ``lower = (|w g|^2_{L^2_{gamma/2+s}} + |w g|^2_{H^s_{gamma/2}}) / 2`` and
    ``upper = |w g|^2_{H^s_{gamma/2+s}}``.
    ``sigma`` enables the Ohm's-law residual (NaN otherwise).
    """
    f = snapshot.f
    basis, grid = f.basis, f.grid
    cst = constants or EnergyConstants()
    if N < 0 or N > basis.K:
        raise ValidationError(f"derivative cap N={N} outside the budget 0..K={basis.K}")
    if N + 1 > grid.n_points // 3:
        raise ValidationError(f"derivative cap N={N} exceeds the spatial resolution budget")
    ws = _Workspace(basis, N)
    dx = grid.dx
    g_, s = weight.gamma, weight.s
    vals = f.values
    micro = project_micro(basis, vals)
    macro = vals - micro
    phi, grad = poisson_solve(grid, vals[0, :, 0] - vals[1, :, 0])
    sw = None
    if exp_weight:
        sw = np.stack([np.exp(eps * phi), np.exp(-eps * phi)])

    def dxa(arr, a):
        return x_derivative(grid, arr.swapaxes(1, 2), a).swapaxes(1, 2) if a else arr

    def diss(c, exponent):
        low = 0.5 * (_sq(ws, c, exponent + g_ / 2 + s, dx=dx) + _sq(ws, c, exponent + g_ / 2, s, dx=dx))
        high = _sq(ws, c, exponent + g_ / 2 + s, s, dx=dx)
        return np.array([low, high])

    # accumulators: [energy, low, high, low_normalized, high_normalized]
    unweighted = np.zeros(5)
    spatial = np.zeros(5)
    velocity = np.zeros(5)

    def add(acc, energy, d, scale):
        acc[0] += energy
        acc[1:3] += d / scale
        acc[3:5] += d

    field_energy = sum(grid.l2_norm(x_derivative(grid, grad[0], a)) ** 2 for a in range(N + 2))
    unweighted += [field_energy] * 5
    for a in range(N + 1):
        m = _sq(ws, dxa(macro, a), 0.0, dx=dx) if a >= 1 else 0.0
        unweighted[1:] += m
        add(unweighted, _sq(ws, dxa(vals, a), 0.0, species_weight=sw, dx=dx), diss(dxa(micro, a), 0.0), eps**2)

    for a in range(N):
        ma = dxa(micro, a)
        for order in range(N - a + 1):
            exponent = weight.with_orders(a, order).exponent
            acc = spatial if order == 0 else velocity
            for beta in _velocity_multi_indices(order):
                c = ws.derivative(ma, beta)
                add(acc, _sq(ws, c, exponent, species_weight=sw, dx=dx), diss(c, exponent), eps**2)
    exponent = weight.with_orders(N, 0).exponent
    top = ws.derivative(dxa(vals, N), (0, 0, 0))
    add(spatial, eps * _sq(ws, top, exponent, species_weight=sw, dx=dx),
        diss(ws.derivative(dxa(micro, N), (0, 0, 0)), exponent), eps)

    total = cst.outer * (cst.inner * unweighted + spatial) + cst.velocity * velocity

    m = fluid_moments(basis, vals, eps)
    ohm = float("nan")
    if sigma is not None:
        expected = m.n * leray_project(grid, m.u)
        dn = x_derivative(grid, m.n)
        expected[0] -= sigma * (grad[0] + 0.5 * dn)
        ohm = grid.l2_norm(m.j - expected)
    return EnergyRow(
        t=float(snapshot.t),
        E_N=float(unweighted[0]),
        D_N_low=float(unweighted[1]),
        D_N_high=float(unweighted[2]),
        E_Nl=float(total[0]),
        D_low=float(total[1]),
        D_high=float(total[2]),
        D_low_normalized=float(total[3]),
        D_high_normalized=float(total[4]),
        micro=float(np.sqrt(np.sum(micro**2) * dx)),
        boussinesq=grid.l2_norm(m.rho + m.theta),
        divu=grid.l2_norm(x_derivative(grid, m.u[0])),
        ohm=ohm,
        W_x=float(spatial[0]),
        W_v=float(velocity[0]),
    )


@dataclass
class EnergyReport:
    rows: list

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def times(self):
        return self.column("t")


def energy_report(trajectory, weight: WeightSpec, N: int, sigma=None, exp_weight=False, constants=None) -> EnergyReport:
    """Energy rows for every snapshot, with charge residual and mass drift filled in."""
    rows = [energy_functionals(s, trajectory.eps, weight, N, sigma, exp_weight, constants) for s in trajectory.snapshots]
    drift = mass_drift(trajectory)
    if len(rows) >= 3:
        charge = conservation_residuals(trajectory)["charge"]
    else:
        charge = np.full(len(rows), np.nan)
    rows = [_replace(r, charge_res=float(c), mass_drift=float(d)) for r, c, d in zip(rows, charge, drift)]
    return EnergyReport(rows)


def _replace(row, **kw):
    data = {f.name: getattr(row, f.name) for f in fields(row)}
    data.update(kw)
    return EnergyRow(**data)


def mass_drift(trajectory):
    """Per-snapshot max over species of |mass(t) - mass(0)| relative to max(1, ||f(0)||)."""
    grid = trajectory.snapshots[0].f.grid
    masses = np.array([[grid.integrate(s.f.values[k, :, 0]) for k in range(2)] for s in trajectory.snapshots])
    scale = max(1.0, trajectory.snapshots[0].f.l2_norm())
    return np.max(np.abs(masses - masses[0]), axis=1) / scale


def dissipation_constant(times, energy, dissipation):
    """Largest lambda with E(t_k) - E(t_{k+1}) >= lambda * int D over every recorded interval.

    Returns ``(lambda, max_ratio)`` where ``max_ratio`` is max_t E(t)/E(0).
    A non-positive lambda means the energy did not decrease on some interval.
    """
    times = np.asarray(times, dtype=float)
    energy = np.asarray(energy, dtype=float)
    dissipation = np.asarray(dissipation, dtype=float)
    drop = energy[:-1] - energy[1:]
    integral = 0.5 * (dissipation[:-1] + dissipation[1:]) * np.diff(times)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(integral > 0, drop / integral, np.where(drop >= 0, np.inf, -np.inf))
    lam = float(np.min(ratios)) if ratios.size else float("nan")
    ratio = float(np.max(energy) / energy[0]) if energy[0] > 0 else float("nan")
    return lam, ratio


# ---------------------------------------------------------------------------
# limit deviation


@dataclass
class DeviationTable:
    times: np.ndarray
    errors: dict

    @property
    def sup(self):
        return {k: float(np.max(v)) if len(v) else 0.0 for k, v in self.errors.items()}


DEVIATION_FIELDS = ("rho", "u", "theta", "n", "j", "omega")


def _interp_fluid(fluid, times):
    ft = np.array([s.t for s in fluid])
    out = []
    for t in times:
        k = int(np.clip(np.searchsorted(ft, t) - 1, 0, len(ft) - 2)) if len(ft) > 1 else 0
        if len(ft) == 1 or abs(ft[k] - t) < 1e-12:
            out.append(fluid[k])
            continue
        if abs(ft[k + 1] - t) < 1e-12:
            out.append(fluid[k + 1])
            continue
        w = (t - ft[k]) / (ft[k + 1] - ft[k])
        a, b = fluid[k], fluid[k + 1]
        out.append(FluidState(t, (1 - w) * a.u + w * b.u, (1 - w) * a.theta + w * b.theta, (1 - w) * a.n + w * b.n))
    return out


def limit_deviation(kin, fluid, grid: TorusGrid, coeffs, interpolate: bool = False, tol: float = 1e-9) -> DeviationTable:
    """L2-in-x errors between kinetic moments and the fluid limit at each kinetic time."""
    times = np.array([m.t for m in kin])
    ft = np.array([s.t for s in fluid])
    aligned = len(ft) == len(times) and np.allclose(ft, times, atol=tol, rtol=0)
    if not aligned:
        if not interpolate:
            raise ValidationError("kinetic and fluid time grids differ; pass interpolate=True to interpolate")
        fluid = _interp_fluid(fluid, times)
    errs = {k: [] for k in DEVIATION_FIELDS}
    for m, s in zip(kin, fluid):
        j, omega = ohm_current(grid, s, coeffs)
        errs["rho"].append(grid.l2_norm(m.rho - s.rho))
        errs["u"].append(grid.l2_norm(m.u - s.u))
        errs["theta"].append(grid.l2_norm(m.theta - s.theta))
        errs["n"].append(grid.l2_norm(m.n - s.n))
        errs["j"].append(grid.l2_norm(m.j - j))
        errs["omega"].append(grid.l2_norm(m.omega - omega))
    return DeviationTable(times, {k: np.array(v) for k, v in errs.items()})


# ---------------------------------------------------------------------------
# conservation laws


def conservation_residuals(trajectory) -> dict:
    """L2-in-x residuals of the local conservation laws at each snapshot.

    Time derivatives use second-order finite differences on the recorded
    series (centred in the interior, one-sided at the ends). Keys: ``mass``,
    ``momentum``, ``energy``, ``charge``, ``mean_system`` and
    ``difference_system``.
    """
    snaps = trajectory.snapshots
    if len(snaps) < 3:
        raise ValidationError("conservation residuals need at least 3 snapshots")
    eps = trajectory.eps
    basis, grid = snaps[0].f.basis, snaps[0].f.grid
    times = np.array([s.t for s in snaps])
    rho, u, theta, n, j, flux_u, flux_e, E, a_sum, a_diff = [], [], [], [], [], [], [], [], [], []
    for s in snaps:
        vals = s.f.values
        m = fluid_moments(basis, vals, eps)
        g = 0.5 * (vals[0] + vals[1])
        micro = 0.5 * project_micro(basis, vals).sum(axis=0)
        trace = sum(theta_moment(basis, micro, k, k) for k in range(3)) / 3.0
        # <A_1i sqrt(mu), g> via Theta moments of the micro part
        fu = np.stack([theta_moment(basis, micro, 0, i) - (trace if i == 0 else 0.0) for i in range(3)])
        fe = 5.0 * lambda_moment(basis, micro, 0)
        rho.append(m.rho)
        u.append(m.u)
        theta.append(m.theta)
        n.append(m.n)
        j.append(m.j)
        flux_u.append(fu)
        flux_e.append(fe)
        E.append(s.grad_phi[0])
        a_sum.append(0.5 * (vals[0, :, 0] + vals[1, :, 0]))
        a_diff.append(vals[0, :, 0] - vals[1, :, 0])
    rho, u, theta, n, j = map(np.array, (rho, u, theta, n, j))
    flux_u, flux_e, E = map(np.array, (flux_u, flux_e, E))
    a_sum, a_diff = np.array(a_sum), np.array(a_diff)

    def ddt(arr):
        return np.gradient(arr, times, axis=0, edge_order=2)

    def ddx(arr):
        return x_derivative(grid, arr)

    mass = ddt(rho) + ddx(u[:, 0]) / eps
    mom = ddt(u)
    mom[:, 0] += ddx(rho + theta) / eps
    mom += ddx(flux_u) / eps
    mom[:, 0] += 0.5 * n * E
    energy = ddt(theta) + 2.0 / (3.0 * eps) * ddx(u[:, 0] + flux_e) + eps / 3.0 * j[:, 0] * E
    charge = ddt(n) + ddx(j[:, 0])
    mean_sys = ddt(a_sum) + ddx(u[:, 0]) / eps
    diff_sys = ddt(a_diff) + ddx(eps * j[:, 0]) / eps

    norm = lambda arr: np.array([grid.l2_norm(a) for a in arr])
    return {
        "times": times,
        "mass": norm(mass),
        "momentum": norm(mom),
        "energy": norm(energy),
        "charge": norm(charge),
        "mean_system": norm(mean_sys),
        "difference_system": norm(diff_sys),
    }
