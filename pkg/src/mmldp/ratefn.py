"""Rate functionals for the chain/diffusion pair.

The local occupation cost ell(rho) = -inf_{u>0} sum_i (Qu)_i/u_i rho_i is
evaluated by Newton's method in log-ratio coordinates: with y_i = log u_i and
y_0 pinned to 0, the reduced objective

    F(y) = sum_{i != j} Q_ij rho_i exp(y_j - y_i)

is smooth and strictly convex, its gradient equals the components of
rho^T Q(u), and its Hessian is the Laplacian of a positive weighted graph.
The occupation rate integrates ell over a kernel path; the path rate is the
classical quadratic action with mixture coefficients; the joint rate is their
sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .chain import Generator, KernelPath, as_simplex
from .errors import NoConvergenceError, NonpositiveTiltError

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, typing only
    from .pathopt import PathGrid

CLAMP_THETA = 1e-10
GRAD_TOL = 1e-12
GRAD_ACCEPT = 1e-10
MAX_NEWTON_ITERS = 200


@dataclass(frozen=True, eq=False)
class RegimeModel:
    """Per-state affine drift/diffusion coefficients.

    drift(i, x) = drift_const[i] + drift_slope[i] * x and likewise for sigma;
    the affine form makes the Lipschitz and linear-growth constants explicit.
    At least one state must have a nonzero diffusion coefficient.
    """

    drift_const: np.ndarray
    drift_slope: np.ndarray
    sigma_const: np.ndarray
    sigma_slope: np.ndarray

    def __post_init__(self):
        arrays = {}
        d = None
        for name in ("drift_const", "drift_slope", "sigma_const", "sigma_slope"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim != 1:
                raise ValueError(f"{name} must be a vector")
            if not np.isfinite(a).all():
                raise ValueError(f"{name} has non-finite entries")
            if d is None:
                d = a.size
            elif a.size != d:
                raise ValueError("coefficient vectors must share one length")
            arrays[name] = a
        if not (np.any(arrays["sigma_const"] != 0.0) or np.any(arrays["sigma_slope"] != 0.0)):
            raise ValueError("at least one state needs a nonzero diffusion coefficient")
        for name, a in arrays.items():
            a = a.copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def d(self):
        return self.drift_const.size

    def growth_bound(self):
        """A constant K with |b| + |sigma| <= K(1 + |x|) in every state."""
        return float(
            max(
                np.abs(self.drift_const).max() + np.abs(self.sigma_const).max(),
                np.abs(self.drift_slope).max() + np.abs(self.sigma_slope).max(),
            )
        )

    def drift(self, i, x):
        return self.drift_const[i] + self.drift_slope[i] * x

    def sigma(self, i, x):
        return self.sigma_const[i] + self.sigma_slope[i] * x

    def drift_states(self, x):
        """Drift of every state at position(s) x, shape (..., d)."""
        x = np.asarray(x, dtype=float)
        return self.drift_const + np.multiply.outer(x, self.drift_slope)

    def sigma_states(self, x):
        """Diffusion coefficient of every state at position(s) x, shape (..., d)."""
        x = np.asarray(x, dtype=float)
        return self.sigma_const + np.multiply.outer(x, self.sigma_slope)


@dataclass(frozen=True, eq=False)
class TiltSolution:
    """Optimal tilt for one simplex point: u with u[0] = 1, the cost value,
    the residual of the first-order conditions, and the iteration count."""

    tilt: np.ndarray
    value: float
    gradient_norm: float
    iterations: int


@dataclass(frozen=True)
class RateBreakdown:
    """Path cost, occupation cost, and their sum."""

    path_rate: float
    occupation_rate: float

    @property
    def joint(self):
        return self.path_rate + self.occupation_rate


def clamp_interior(rho, theta=CLAMP_THETA):
    """Floor a simplex point into the interior: (rho + theta)/(1 + theta*d)."""
    rho = as_simplex(rho)
    if rho.min() < theta:
        rho = (rho + theta) / (1.0 + theta * rho.size)
    return rho


def _dv_pieces(Q: Generator, rho, y):
    """Objective, gradient and Hessian of F at log-tilt y (full coordinates)."""
    u = np.exp(y)
    W = Q.rates * rho[:, None] * (u[None, :] / u[:, None])
    np.fill_diagonal(W, 0.0)
    F = W.sum()
    grad = W.sum(axis=0) - W.sum(axis=1)
    S = W + W.T
    H = np.diag(S.sum(axis=1)) - S
    return F, grad, H


def dv_objective(Q: Generator, rho, z):
    """Reduced objective F at log-ratios z (length d-1, first state pinned)."""
    rho = np.asarray(rho, dtype=float)
    y = np.concatenate(([0.0], np.asarray(z, dtype=float)))
    u = np.exp(y)
    W = Q.rates * rho[:, None] * (u[None, :] / u[:, None])
    np.fill_diagonal(W, 0.0)
    return float(W.sum())


def dv_gradient(Q: Generator, rho, z):
    """Gradient of the reduced objective at log-ratios z."""
    rho = np.asarray(rho, dtype=float)
    y = np.concatenate(([0.0], np.asarray(z, dtype=float)))
    _, grad, _ = _dv_pieces(Q, rho, y)
    return grad[1:]


def dv_local(Q: Generator, rho, z0=None, grad_tol=GRAD_TOL, max_iter=MAX_NEWTON_ITERS) -> TiltSolution:
    """Local occupation cost ell(rho) and its optimal tilt.

    Newton iteration with backtracking from u = 1 (or from exp(z0) when a
    warm start is supplied).  Boundary simplex points are clamped into the
    interior first; the perturbation of the value is O(theta).
    """
    rho = clamp_interior(rho)
    if rho.size != Q.d:
        raise ValueError("rho dimension does not match generator")
    d = Q.d
    y = np.zeros(d)
    if z0 is not None:
        z0 = np.asarray(z0, dtype=float)
        if z0.shape == (d - 1,) and np.isfinite(z0).all():
            y[1:] = z0
    F, grad, H = _dv_pieces(Q, rho, y)
    gnorm = np.abs(grad[1:]).max() if d > 1 else 0.0
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if gnorm <= grad_tol:
            iterations -= 1
            break
        g = grad[1:]
        Hred = H[1:, 1:]
        try:
            step = np.linalg.solve(Hred, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(Hred + 1e-12 * np.trace(Hred) * np.eye(d - 1), -g)
        slope = float(g @ step)
        if slope >= 0.0:
            step = -g
            slope = -float(g @ g)
        if 0.5 * abs(slope) <= 16.0 * np.finfo(float).eps * max(1.0, abs(F)):
            # predicted decrease below float resolution of F: the objective
            # cannot arbitrate, but the pure Newton step still contracts the
            # gradient quadratically
            y[1:] += step
            F, grad, H = _dv_pieces(Q, rho, y)
            gnorm = np.abs(grad[1:]).max()
            continue
        t = 1.0
        accepted = False
        for _ in range(60):
            y_new = y.copy()
            y_new[1:] += t * step
            F_new, grad_new, H_new = _dv_pieces(Q, rho, y_new)
            if F_new <= F + 1e-4 * t * slope:
                y, F, grad, H = y_new, F_new, grad_new, H_new
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        gnorm = np.abs(grad[1:]).max()
    if gnorm > grad_tol and gnorm > GRAD_ACCEPT:
        raise NoConvergenceError(iterations, gnorm)
    u = np.exp(y)
    value = -(float(rho @ np.diag(Q.rates)) + F)
    if value <= 0.0:
        value = 0.0
    return TiltSolution(tilt=u, value=value, gradient_norm=float(gnorm),
                        iterations=iterations)


def tilted_generator(Q: Generator, u) -> Generator:
    """Generator with rates Q_ij * u_j / u_i and rows balanced to zero."""
    u = np.asarray(u, dtype=float)
    if u.shape != (Q.d,):
        raise ValueError("tilt dimension does not match generator")
    if u.min() <= 0.0:
        raise NonpositiveTiltError(u.min())
    R = Q.rates * (u[None, :] / u[:, None])
    np.fill_diagonal(R, 0.0)
    np.fill_diagonal(R, -R.sum(axis=1))
    return Generator(R)


def invariant_of_tilt(Q: Generator, rho) -> float:
    """Residual ||rho^T Q(u*)||_inf at the optimal tilt for rho."""
    rho = as_simplex(rho)
    if rho.min() <= 0.0:
        raise ValueError("rho must be strictly positive")
    sol = dv_local(Q, rho)
    QU = tilted_generator(Q, sol.tilt)
    return float(np.abs(rho @ QU.rates).max())


def occupation_rate(Q: Generator, nu: KernelPath) -> float:
    """Integral of the local occupation cost along a kernel path."""
    if nu.d != Q.d:
        raise ValueError("kernel dimension does not match generator")
    total = 0.0
    z = None
    for row in nu.kernels:
        sol = dv_local(Q, row, z0=z)
        total += sol.value
        z = np.log(sol.tilt[1:])
    return total * nu.dt


def mixed_coefficients(model: RegimeModel, rho, x):
    """Mixture drift and squared diffusion at position x under weights rho."""
    rho = np.asarray(rho, dtype=float)
    b = float(model.drift_states(x) @ rho)
    s2 = float((model.sigma_states(x) ** 2) @ rho)
    return b, s2


def path_cell_costs(model: RegimeModel, values, kernels, dt, div_atol=1e-9):
    """Per-cell contributions to the path rate.

    Forward-difference slope per cell, mixture coefficients at the midpoint
    position paired with the cell kernel.  Cells with zero mixture diffusion
    contribute 0 when the slope matches the mixture drift within an
    absolute-plus-relative tolerance and inf otherwise.
    """
    values = np.asarray(values, dtype=float)
    K = np.asarray(kernels, dtype=float)
    x = 0.5 * (values[:-1] + values[1:])
    dphi = np.diff(values) / dt
    bhat = np.einsum("kd,kd->k", model.drift_states(x), K)
    s2 = np.einsum("kd,kd->k", model.sigma_states(x) ** 2, K)
    r = dphi - bhat
    costs = np.empty_like(r)
    pos = s2 > 0.0
    costs[pos] = 0.5 * (r[pos] ** 2 / s2[pos]) * dt
    zero = ~pos
    if zero.any():
        ok = np.abs(r[zero]) <= div_atol * (1.0 + np.abs(bhat[zero]))
        costs[zero] = np.where(ok, 0.0, np.inf)
    return costs


def path_rate(model: RegimeModel, phi: "PathGrid", nu: KernelPath) -> float:
    """Quadratic action of a path against a kernel path (may be inf)."""
    from .errors import GridMismatchError

    if phi.n_cells != nu.n_cells or abs(phi.horizon - nu.horizon) > 1e-9 * max(1.0, nu.horizon):
        raise GridMismatchError(
            f"path grid ({phi.n_cells} cells, T={phi.horizon}) vs kernel grid "
            f"({nu.n_cells} cells, T={nu.horizon})"
        )
    if not np.isfinite(phi.values).all():
        return float("inf")
    costs = path_cell_costs(model, phi.values, nu.kernels, nu.dt)
    return float(np.sum(costs))


def joint_rate(model: RegimeModel, Q: Generator, phi: "PathGrid", nu: KernelPath) -> RateBreakdown:
    """Path rate plus occupation rate for the pair (phi, nu)."""
    return RateBreakdown(
        path_rate=path_rate(model, phi, nu),
        occupation_rate=occupation_rate(Q, nu),
    )
