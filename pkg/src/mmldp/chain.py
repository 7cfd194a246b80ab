"""Continuous-time Markov chain core.

Generator validation, invariant distribution, exact (and exponentially
tilted) chain simulation, occupation kernels on a uniform grid, the
cumulative-occupation distance between kernel paths, and kernel
mollification (positivity floor plus bump convolution).

States are indexed 0..d-1.  Kernel paths are piecewise constant on a uniform
grid; all downstream functionals integrate them, so the grid resolution is the
only discretization choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import make_rng
from .errors import (
    GridMismatchError,
    NonpositiveOffDiagonalError,
    NonpositiveTiltError,
    NonSquareError,
    RowSumNonzeroError,
    SingularSystemError,
)

ROW_SUM_TOL = 1e-12
SIMPLEX_TOL = 1e-12
_DRAW_BATCH = 64


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def as_simplex(weights, tol=SIMPLEX_TOL):
    """Validate a probability vector: entries >= 0, sum 1 within `tol`."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size < 1:
        raise ValueError(f"simplex point must be a vector, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("simplex point has non-finite entries")
    if w.min() < -tol:
        raise ValueError(f"simplex entry {w.min()!r} is negative")
    s = w.sum()
    if abs(s - 1.0) > tol:
        raise ValueError(f"simplex weights sum to {s!r}, expected 1")
    return _readonly(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class Generator:
    """Validated d x d transition-intensity matrix.

    Rows sum to zero (within 1e-12), off-diagonal entries are strictly
    positive, so the chain is irreducible and the diagonal is strictly
    negative.
    """

    rates: np.ndarray

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=float)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1] or rates.shape[0] < 2:
            raise NonSquareError(rates.shape if rates.ndim == 2 else (rates.ndim,))
        if not np.isfinite(rates).all():
            raise ValueError("generator has non-finite entries")
        d = rates.shape[0]
        for i in range(d):
            for j in range(d):
                if i != j and rates[i, j] <= 0.0:
                    raise NonpositiveOffDiagonalError(i, j, rates[i, j])
            s = rates[i].sum()
            if abs(s) > ROW_SUM_TOL * max(1.0, np.abs(rates[i]).max()):
                raise RowSumNonzeroError(i, s)
        object.__setattr__(self, "rates", _readonly(rates))

    @property
    def d(self):
        return self.rates.shape[0]

    @property
    def exit_rates(self):
        """Holding rates -Q_ii per state."""
        return -np.diag(self.rates)

    def trace_bound(self):
        """-sum_i Q_ii, the uniform upper bound on the local occupation cost."""
        return float(self.exit_rates.sum())


def validate_generator(rates) -> Generator:
    """Build a Generator, rejecting matrices that violate its invariants."""
    return Generator(np.asarray(rates, dtype=float))


def invariant_distribution(Q: Generator):
    """Solve pi Q = 0, sum(pi) = 1; residual ||pi Q||_inf <= 1e-10."""
    d = Q.d
    A = Q.rates.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(d)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"invariant solve failed: {exc}") from exc
    if pi.min() < -1e-10:
        raise SingularSystemError(f"invariant solve produced negative mass {pi.min()!r}")
    pi = np.clip(pi, 0.0, None)
    pi = pi / pi.sum()
    residual = np.abs(pi @ Q.rates).max()
    if residual > 1e-10:
        raise SingularSystemError(f"invariant residual {residual:.3e} exceeds 1e-10")
    return _readonly(pi)


@dataclass(frozen=True, eq=False)
class ChainPath:
    """Piecewise-constant chain trajectory on [0, horizon].

    `states[k]` is the state entered at `jump_times[k]`; consecutive states
    differ and jump times are strictly increasing in (0, horizon].
    """

    initial_state: int
    jump_times: np.ndarray
    states: np.ndarray
    horizon: float
    n_states: int

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        st = np.asarray(self.states, dtype=np.int64)
        if jt.shape != st.shape or jt.ndim != 1:
            raise ValueError("jump_times and states must be matching vectors")
        if jt.size:
            if not (np.diff(jt) > 0).all():
                raise ValueError("jump_times must be strictly increasing")
            if jt[0] <= 0 or jt[-1] > self.horizon:
                raise ValueError("jump_times must lie in (0, horizon]")
        seq = np.concatenate(([self.initial_state], st))
        if (np.diff(seq) == 0).any():
            raise ValueError("consecutive states must differ")
        if seq.min() < 0 or seq.max() >= self.n_states:
            raise ValueError("state index out of range")
        object.__setattr__(self, "jump_times", _readonly(jt))
        object.__setattr__(self, "states", _readonly(st, dtype=np.int64))

    @classmethod
    def _trusted(cls, initial_state, jump_times, states, horizon, n_states):
        # construction from simulators whose output satisfies the invariants;
        # skips validation in sampling hot paths
        obj = object.__new__(cls)
        object.__setattr__(obj, "initial_state", initial_state)
        object.__setattr__(obj, "jump_times", jump_times)
        object.__setattr__(obj, "states", states)
        object.__setattr__(obj, "horizon", horizon)
        object.__setattr__(obj, "n_states", n_states)
        return obj

    @property
    def jump_count(self):
        return int(self.jump_times.size)

    def interval_bounds(self):
        """Times 0 = b_0 < ... < b_{K+1} = horizon delimiting holding intervals."""
        return np.concatenate(([0.0], self.jump_times, [self.horizon]))

    def interval_states(self):
        """State occupied on each holding interval."""
        return np.concatenate(([self.initial_state], self.states)).astype(np.int64)

    def state_at(self, t):
        """State occupied at time(s) t (right-continuous)."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.interval_states()[idx]

    def occupation_totals(self):
        """Total time spent in each state over [0, horizon]."""
        return np.bincount(
            self.interval_states(),
            weights=np.diff(self.interval_bounds()),
            minlength=self.n_states,
        )

    def occupation_cumulative(self, times):
        """Occupation nu(t, i) = time spent in i during [0, t], for sorted t."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        bounds = self.interval_bounds()
        seg_states = self.interval_states()
        seg_len = np.diff(bounds)
        occ_bounds = np.zeros((bounds.size, self.n_states))
        np.add.at(occ_bounds, (np.arange(1, bounds.size), seg_states), seg_len)
        occ_bounds = np.cumsum(occ_bounds, axis=0)
        pos = np.clip(np.searchsorted(bounds, times, side="right") - 1, 0, seg_len.size - 1)
        occ = occ_bounds[pos].copy()
        occ[np.arange(times.size), seg_states[pos]] += times - bounds[pos]
        return occ


@dataclass(frozen=True, eq=False)
class KernelPath:
    """Piecewise-constant simplex-valued kernel on a uniform grid.

    `kernels[k]` is the kernel on cell [grid[k], grid[k+1]); its cumulative
    integral is the occupation path.
    """

    grid: np.ndarray
    kernels: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        K = np.asarray(self.kernels, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid must contain at least two nodes")
        steps = np.diff(grid)
        if not (steps > 0).all():
            raise ValueError("grid must be strictly increasing")
        if np.abs(steps - steps[0]).max() > 1e-9 * max(1.0, steps[0]):
            raise ValueError("grid must be uniform")
        if grid[0] != 0.0:
            raise ValueError("grid must start at 0")
        if K.ndim != 2 or K.shape[0] != grid.size - 1:
            raise ValueError("kernels must have one row per grid cell")
        if not np.isfinite(K).all():
            raise ValueError("kernel has non-finite entries")
        if K.min() < -SIMPLEX_TOL:
            raise ValueError(f"kernel entry {K.min()!r} is negative")
        sums = K.sum(axis=1)
        if np.abs(sums - 1.0).max() > SIMPLEX_TOL:
            raise ValueError("kernel rows must sum to 1 within 1e-12")
        object.__setattr__(self, "grid", _readonly(grid))
        object.__setattr__(self, "kernels", _readonly(np.clip(K, 0.0, None)))

    @property
    def horizon(self):
        return float(self.grid[-1])

    @property
    def n_cells(self):
        return self.kernels.shape[0]

    @property
    def d(self):
        return self.kernels.shape[1]

    @property
    def dt(self):
        return float(self.grid[1] - self.grid[0])

    @classmethod
    def constant(cls, weights, horizon, n=1):
        w = as_simplex(weights)
        grid = np.linspace(0.0, float(horizon), n + 1)
        return cls(grid, np.tile(w, (n, 1)))

    def cumulative(self):
        """Occupation path at grid nodes, shape (n+1, d)."""
        out = np.zeros((self.n_cells + 1, self.d))
        out[1:] = np.cumsum(self.kernels * self.dt, axis=0)
        return out

    def cumulative_at(self, times):
        """Occupation path at arbitrary times (piecewise-linear, exact)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        cum = self.cumulative()
        return np.stack(
            [np.interp(times, self.grid, cum[:, i]) for i in range(self.d)], axis=1
        )


def invariant_kernel(Q: Generator, horizon, n=1) -> KernelPath:
    """Constant kernel equal to the invariant distribution of Q."""
    return KernelPath.constant(invariant_distribution(Q), horizon, n)


@dataclass(frozen=True, eq=False)
class TiltField:
    """Strictly positive time-indexed tilt u(t, i), piecewise linear in t.

    Node values on a uniform grid; evaluation interpolates linearly, so the
    field is continuous with piecewise-constant time derivative.  Constant
    fields are represented with a single cell.
    """

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        V = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0:
            raise ValueError("tilt grid must start at 0 with at least two nodes")
        steps = np.diff(grid)
        if not (steps > 0).all() or np.abs(steps - steps[0]).max() > 1e-9 * max(1.0, steps[0]):
            raise ValueError("tilt grid must be uniform and increasing")
        if V.ndim != 2 or V.shape[0] != grid.size:
            raise ValueError("tilt values must have one row per grid node")
        if not np.isfinite(V).all() or V.min() <= 0.0:
            raise NonpositiveTiltError(V.min() if V.size else None)
        object.__setattr__(self, "grid", _readonly(grid))
        object.__setattr__(self, "values", _readonly(V))

    @property
    def horizon(self):
        return float(self.grid[-1])

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def n_cells(self):
        return self.grid.size - 1

    @property
    def dt(self):
        return float(self.grid[1] - self.grid[0])

    @classmethod
    def constant(cls, u, horizon):
        u = np.asarray(u, dtype=float)
        return cls(np.array([0.0, float(horizon)]), np.vstack([u, u]))

    def slopes(self):
        """Per-cell time derivative of each component, shape (m, d)."""
        return np.diff(self.values, axis=0) / self.dt

    def is_constant(self):
        return bool(np.all(self.values == self.values[0]))

    def cell_of(self, t):
        return np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, self.n_cells - 1)

    def at(self, t):
        """Tilt vector(s) at time(s) t, shape (..., d)."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        c = self.cell_of(t_arr)
        frac = (t_arr - self.grid[c]) / self.dt
        out = self.values[c] + (self.values[c + 1] - self.values[c]) * frac[:, None]
        return out[0] if np.isscalar(t) or np.asarray(t).ndim == 0 else out


def as_tilt_field(u, horizon) -> TiltField:
    """Coerce a constant vector or TiltField to a TiltField on [0, horizon]."""
    if isinstance(u, TiltField):
        if abs(u.horizon - horizon) > 1e-9 * max(1.0, horizon):
            raise GridMismatchError(f"tilt horizon {u.horizon} != {horizon}")
        return u
    u = np.asarray(u, dtype=float)
    if u.ndim != 1:
        raise ValueError("tilt must be a vector or a TiltField")
    if u.min() <= 0.0:
        raise NonpositiveTiltError(u.min())
    return TiltField.constant(u, horizon)


# -- simulation ----------------------------------------------------------------

class _DrawBuffer:
    """Pre-drawn exponential/uniform pairs consumed in a fixed order."""

    def __init__(self, rng, batch):
        self._rng = rng
        self._batch = max(_DRAW_BATCH, int(batch))
        self._refill()

    def _refill(self):
        self.exps = self._rng.standard_exponential(self._batch)
        self.unis = self._rng.random(self._batch)
        self.idx = 0

    def next_pair(self):
        if self.idx >= self.exps.size:
            self._refill()
        e, u = self.exps[self.idx], self.unis[self.idx]
        self.idx += 1
        return e, u


def _chain_from_rng(Q: Generator, epsilon, T, x0, rng) -> ChainPath:
    q = Q.exit_rates
    d = Q.d
    # jump distribution per state: cumulative over all columns, zero weight on self
    P = Q.rates / q[:, None]
    np.fill_diagonal(P, 0.0)
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    buf = _DrawBuffer(rng, 1.5 * T * q.max() / epsilon)
    t = 0.0
    i = int(x0)
    jt, js = [], []
    while True:
        e, u = buf.next_pair()
        t += epsilon * e / q[i]
        if t >= T:
            break
        i = int(np.searchsorted(cum[i], u, side="right"))
        jt.append(t)
        js.append(i)
    return ChainPath._trusted(int(x0), np.asarray(jt), np.asarray(js, dtype=np.int64),
                              float(T), d)


def simulate_chain(Q: Generator, epsilon, T, x0, seed, stream=0) -> ChainPath:
    """Exact trajectory of the chain with generator Q/epsilon on [0, T].

    Holding time in state i is exponential with rate -Q_ii/epsilon; the jump
    target is drawn from Q_ij/(-Q_ii).  Deterministic given (seed, stream).
    """
    if epsilon <= 0 or T <= 0:
        raise ValueError("epsilon and T must be positive")
    if not 0 <= int(x0) < Q.d:
        raise ValueError(f"x0 must be a state index in [0, {Q.d})")
    return _chain_from_rng(Q, float(epsilon), float(T), int(x0), make_rng(seed, stream, 0))


def tilted_exit_rates(Q: Generator, field: TiltField):
    """Exit rates of Q(u)(t) at the field's grid nodes, shape (m+1, d)."""
    V = field.values
    QV = V @ Q.rates.T
    return (QV - V * np.diag(Q.rates)[None, :]) / V


def _tilted_chain_from_rng(Q: Generator, field: TiltField, epsilon, T, x0, rng) -> ChainPath:
    d = Q.d
    # exit rates of Q(u)(t) are ratios of linear functions per cell, so the
    # node maximum is the global thinning bound
    lam = tilted_exit_rates(Q, field).max() / epsilon
    buf = _DrawBuffer(rng, 1.5 * T * lam)
    t = 0.0
    i = int(x0)
    jt, js = [], []
    off = Q.rates.copy()
    np.fill_diagonal(off, 0.0)
    V = field.values
    slopes = np.diff(V, axis=0)
    dtf = field.dt
    n_cells = field.n_cells
    while True:
        e, u = buf.next_pair()
        t += e / lam
        if t >= T:
            break
        c = min(int(t / dtf), n_cells - 1)
        uvals = V[c] + slopes[c] * ((t - c * dtf) / dtf)
        rates = off[i] * uvals / (uvals[i] * epsilon)
        cumr = np.cumsum(rates)
        thr = u * lam
        if thr < cumr[-1]:
            i = int(np.searchsorted(cumr, thr, side="right"))
            jt.append(t)
            js.append(i)
    return ChainPath._trusted(int(x0), np.asarray(jt), np.asarray(js, dtype=np.int64),
                              float(T), d)


def simulate_tilted_chain(Q: Generator, u, epsilon, T, x0, seed, stream=0) -> ChainPath:
    """Trajectory of the time-inhomogeneous chain with generator Q(u)(t)/epsilon.

    Simulated by thinning against the global bound, so jump times carry no
    discretization bias; the only approximation is the piecewise-linear
    interpolation of `u` between its grid nodes.
    """
    if epsilon <= 0 or T <= 0:
        raise ValueError("epsilon and T must be positive")
    if not 0 <= int(x0) < Q.d:
        raise ValueError(f"x0 must be a state index in [0, {Q.d})")
    field = as_tilt_field(u, float(T))
    if field.d != Q.d:
        raise ValueError("tilt dimension does not match generator")
    return _tilted_chain_from_rng(Q, field, float(epsilon), float(T), int(x0),
                                  make_rng(seed, stream, 0))


# -- occupation, distance, mollification ----------------------------------------

def occupation_of(path: ChainPath, n: int) -> KernelPath:
    """Cell-averaged occupation kernel of a chain path on an n-cell grid.

    Cumulative sums of the result reproduce the occupation path exactly at
    the grid nodes (up to roundoff).
    """
    if n < 1:
        raise ValueError("grid resolution must be >= 1")
    nodes = np.linspace(0.0, path.horizon, n + 1)
    occ = path.occupation_cumulative(nodes)
    kernels = np.diff(occ, axis=0) * (n / path.horizon)
    return KernelPath(nodes, np.clip(kernels, 0.0, None))


def occupation_distance(mu: KernelPath, nu: KernelPath) -> float:
    """Sup over time and states of the gap between occupation paths.

    Cumulative kernels are piecewise linear, so the supremum is attained at
    grid nodes; mismatched resolutions are compared on the union of nodes.
    """
    if abs(mu.horizon - nu.horizon) > 1e-9 * max(1.0, mu.horizon):
        raise GridMismatchError(f"horizons differ: {mu.horizon} vs {nu.horizon}")
    if mu.d != nu.d:
        raise GridMismatchError(f"state counts differ: {mu.d} vs {nu.d}")
    if mu.n_cells == nu.n_cells:
        return float(np.abs(mu.cumulative() - nu.cumulative()).max())
    times = np.union1d(mu.grid, nu.grid)
    return float(np.abs(mu.cumulative_at(times) - nu.cumulative_at(times)).max())


def _bump(x):
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    out[inside] = np.exp(1.0 / (x[inside] ** 2 - 1.0))
    return out


def mollify(nu: KernelPath, eta: float) -> KernelPath:
    """Floor a kernel away from zero and smooth it by bump convolution.

    Stage one maps K to (K + eta)/(1 + eta*d), so the minimum entry is at
    least eta/(1 + eta*d).  Stage two extends the kernel constantly beyond
    the horizon and convolves with the normalized bump of width eta; rows
    stay on the simplex because the discrete weights sum to one.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError("smoothing width must lie in (0, 1)")
    d = nu.d
    K = (nu.kernels + eta) / (1.0 + eta * d)
    dt = nu.dt
    M = int(np.floor(eta / dt - 1e-12))
    if M > 0:
        offsets = np.arange(-M, M + 1)
        w = _bump(offsets * dt / eta)
        w = w / w.sum()
        padded = np.pad(K, ((M, M), (0, 0)), mode="edge")
        out = np.zeros_like(K)
        for m, wm in zip(offsets, w):
            out += wm * padded[M + m : M + m + K.shape[0]]
        K = out
    return KernelPath(nu.grid, K)
