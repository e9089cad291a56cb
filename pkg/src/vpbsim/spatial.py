"""Periodic 1-D spectral tools: transforms, derivatives, Poisson and Leray."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ChargeNeutralityError, ValidationError

MEAN_TOL = 1e-10


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid on the periodic interval [0, length).

    Fields live on the last array axis. Velocity-type vector fields are stored
    with a leading axis of size 3, only the first component varying in x through
    derivatives.
    """

    n_points: int
    length: float = 2.0 * np.pi

    def __post_init__(self):
        n = int(self.n_points)
        if n < 8 or n & (n - 1):
            raise ValidationError(f"n_points must be a power of two >= 8, got {self.n_points}")
        if not self.length > 0:
            raise ValidationError(f"length must be positive, got {self.length}")

    @property
    def dx(self) -> float:
        return self.length / self.n_points

    @cached_property
    def x(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dx

    @cached_property
    def modes(self) -> np.ndarray:
        """Integer mode numbers of the real transform."""
        return np.arange(self.n_points // 2 + 1)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi / self.length * self.modes

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule: keep modes with |m| < n/3."""
        return self.modes < self.n_points / 3.0

    def forward(self, field):
        return np.fft.rfft(field, axis=-1)

    def inverse(self, spectrum):
        return np.fft.irfft(spectrum, n=self.n_points, axis=-1)

    def integrate(self, field):
        return np.sum(field, axis=-1) * self.dx

    def l2_norm(self, field):
        """L2 norm over x (and any leading component axes)."""
        return float(np.sqrt(np.sum(np.asarray(field) ** 2) * self.dx))

    def dealias(self, field):
        return self.inverse(self.forward(field) * self.dealias_mask)


def x_derivative(grid: TorusGrid, field, order: int = 1):
    """Spectral derivative of the requested order along the last axis."""
    if order < 0:
        raise ValidationError("derivative order must be non-negative")
    field = np.asarray(field, dtype=float)
    if order == 0:
        return field.copy()
    symbol = (1j * grid.wavenumbers) ** order
    if order % 2 == 1 and grid.n_points % 2 == 0:
        # The Nyquist mode of a real field has no consistent odd derivative.
        symbol = symbol.copy()
        symbol[-1] = 0.0
    return grid.inverse(grid.forward(field) * symbol)


def antiderivative(grid: TorusGrid, field):
    """Zero-mean periodic antiderivative of a zero-mean field."""
    spec = grid.forward(np.asarray(field, dtype=float))
    k = grid.wavenumbers
    out = np.zeros_like(spec)
    out[..., 1:] = spec[..., 1:] / (1j * k[1:])
    out[..., -1] = 0.0
    return grid.inverse(out)


def poisson_solve(grid: TorusGrid, n, tol: float = MEAN_TOL):
    """Solve -phi'' = n with zero-mean gauge.

    Returns ``(phi, grad_phi)`` where ``grad_phi`` has shape ``(3, n_points)``.
    """
    n = np.asarray(n, dtype=float)
    mean = float(np.mean(n))
    scale = max(1.0, float(np.max(np.abs(n))) if n.size else 1.0)
    if abs(mean) > tol * scale:
        raise ChargeNeutralityError(mean)
    spec = grid.forward(n)
    k = grid.wavenumbers
    phi_hat = np.zeros_like(spec)
    phi_hat[1:] = spec[1:] / k[1:] ** 2
    phi = grid.inverse(phi_hat)
    dphi_hat = 1j * k * phi_hat
    dphi_hat[-1] = 0.0
    grad = np.zeros((3, grid.n_points))
    grad[0] = grid.inverse(dphi_hat)
    return phi, grad


def leray_project(grid: TorusGrid, u):
    """Divergence-free part of a (3, n) field varying only in x1."""
    u = np.array(u, dtype=float, copy=True)
    if u.shape[0] != 3:
        raise ValidationError(f"vector field must have leading dimension 3, got {u.shape}")
    u[0] = np.mean(u[0], axis=-1, keepdims=True)
    return u


def divergence(grid: TorusGrid, u):
    return x_derivative(grid, np.asarray(u)[0])


def gradient(grid: TorusGrid, field):
    out = np.zeros((3,) + np.shape(field))
    out[0] = x_derivative(grid, field)
    return out
