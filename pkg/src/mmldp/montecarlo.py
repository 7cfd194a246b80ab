"""Simulation and rare-event estimation for the chain/diffusion pair.

Euler-Maruyama on the union of the uniform step grid and the chain's jump
times (so regimes are never misattributed across a switch), likelihood-ratio
weights from the chain's stochastic exponential and the Girsanov drift tilt,
ball-probability estimators (plain and importance-sampled), a decay-rate
sweep over epsilon, martingale diagnostics, and the coupled
noise-regularization closeness table.

Sampling is embarrassingly parallel: sample j of an operation draws all of
its randomness from streams keyed by (seed, op tag, j, role), so results are
bit-identical regardless of chunking or worker count.  The per-sample weights
are exact for the simulated discrete laws: the chain factor is the closed-form
stochastic exponential along an exactly simulated path, and the Brownian
factor is a finite-dimensional Gaussian change of mean.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._rng import make_rng
from .chain import (
    ChainPath,
    Generator,
    KernelPath,
    TiltField,
    _chain_from_rng,
    _tilted_chain_from_rng,
    as_tilt_field,
)
from .errors import GridMismatchError, SingularDiffusionError
from .pathopt import PathGrid
from .ratefn import RegimeModel, dv_local, joint_rate, occupation_rate

_TAG_NAIVE = 101
_TAG_IS = 102
_TAG_MART = 103
_TAG_PROD = 104
_TAG_GAMMA = 105

_CHUNK = 4096
_EVENTS = ("joint", "path", "occupation")


# -- result types ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiffusionPath:
    """Diffusion trajectory at uniform grid nodes."""

    grid: np.ndarray
    values: np.ndarray
    epsilon: float
    gamma: float = 0.0

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.shape != values.shape or grid.ndim != 1:
            raise ValueError("grid and values must be matching vectors")
        if values[0] != 0.0:
            raise ValueError("diffusion paths start at 0")
        if not np.isfinite(values).all():
            raise ValueError("diffusion path has non-finite values")
        for name, a in (("grid", grid), ("values", values)):
            a = a.copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def horizon(self):
        return float(self.grid[-1])


@dataclass(frozen=True)
class ProbEstimate:
    """Estimate with standard error; `method` records the estimator family."""

    p_hat: float
    std_err: float
    n_samples: int
    method: str


@dataclass(frozen=True)
class LdpRow:
    epsilon: float
    delta: float
    p_hat: float
    std_err: float
    minus_eps_log_p: float
    band_lo: float
    band_hi: float
    zero_hits: bool
    method: str


@dataclass(frozen=True, eq=False)
class LdpCurve:
    """Decay-rate table over decreasing epsilon with the analytic reference."""

    rows: tuple
    reference_rate: float

    def __post_init__(self):
        eps = [r.epsilon for r in self.rows]
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilons must be strictly decreasing")


@dataclass(frozen=True)
class GammaRow:
    gamma: float
    exceed_prob: float
    std_err: float
    eta: float
    n_samples: int


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function on [0, T] (k levels over k intervals)."""

    breaks: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        breaks = np.asarray(self.breaks, dtype=float)
        levels = np.asarray(self.levels, dtype=float)
        if breaks.ndim != 1 or breaks.size < 2 or not (np.diff(breaks) > 0).all():
            raise ValueError("breaks must be strictly increasing")
        if levels.shape != (breaks.size - 1,):
            raise ValueError("need one level per interval")
        for name, a in (("breaks", breaks), ("levels", levels)):
            a = a.copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def at(self, t):
        idx = np.clip(np.searchsorted(self.breaks, t, side="right") - 1,
                      0, self.levels.size - 1)
        return self.levels[idx]


# -- metrics ---------------------------------------------------------------------

def uniform_distance(path: DiffusionPath, phi: PathGrid) -> float:
    """Max over shared grid nodes of |M - phi| (phi resampled if needed)."""
    if abs(path.horizon - phi.horizon) > 1e-9 * max(1.0, phi.horizon):
        raise GridMismatchError(f"horizons differ: {path.horizon} vs {phi.horizon}")
    if path.grid.size == phi.grid.size:
        vals = phi.values
    else:
        vals = np.interp(path.grid, phi.grid, phi.values)
    return float(np.abs(path.values - vals).max())


def _chain_kernel_distance(path: ChainPath, target: KernelPath) -> float:
    """Occupation distance between a chain path and a target kernel path."""
    pts = np.union1d(path.jump_times, target.grid)
    occ = path.occupation_cumulative(pts)
    tgt = target.cumulative_at(pts)
    return float(np.abs(occ - tgt).max())


# -- chain stochastic exponential -------------------------------------------------

def _chain_log_weight(path: ChainPath, field: TiltField, Q: Generator, epsilon: float) -> float:
    """log of the chain's stochastic exponential along a realized path.

    Exact for the piecewise-linear tilt: the time-derivative part integrates
    to log differences and the (Qu)/u part has a closed form on each segment
    between jumps and tilt-grid nodes.
    """
    if field.is_constant():
        u = field.values[0]
        cost = (Q.rates @ u) / u
        occ = path.occupation_totals()
        xT = int(path.state_at(path.horizon))
        return float(
            np.log(u[xT]) - np.log(u[path.initial_state]) - (occ @ cost) / epsilon
        )
    bounds = path.interval_bounds()
    times = np.union1d(bounds, field.grid)
    lefts = times[:-1]
    rights = times[1:]
    rows = np.arange(lefts.size)
    seg_state = path.state_at(lefts)
    U_all = field.at(times)
    U_l = U_all[:-1]
    U_r = U_all[1:]
    cells = field.cell_of(lefts)
    slopes = field.slopes()[cells]
    alpha = U_l[rows, seg_state]
    beta = slopes[rows, seg_state]
    A = (U_l @ Q.rates.T)[rows, seg_state]
    B = (slopes @ Q.rates.T)[rows, seg_state]
    L = rights - lefts
    x = beta * L / alpha
    R = np.empty_like(L)
    big = np.abs(x) > 1e-8
    if big.any():
        bb, aa, AA, BB, LL = beta[big], alpha[big], A[big], B[big], L[big]
        R[big] = (BB / bb) * LL + (AA - aa * BB / bb) / bb * np.log1p(x[big])
    small = ~big
    if small.any():
        aa, bb, AA, BB, LL = alpha[small], beta[small], A[small], B[small], L[small]
        R[small] = (
            (AA * LL + 0.5 * BB * LL ** 2) / aa
            - bb / aa ** 2 * (0.5 * AA * LL ** 2 + BB * LL ** 3 / 3.0)
            + bb ** 2 / aa ** 3 * (AA * LL ** 3 / 3.0 + 0.25 * BB * LL ** 4)
        )
    log_terms = np.log(U_r[rows, seg_state]) - np.log(alpha)
    u0 = U_all[0, path.initial_state]
    uT = U_all[-1, int(path.state_at(path.horizon))]
    return float(np.log(uT) - np.log(u0) - log_terms.sum() - R.sum() / epsilon)


def chain_likelihood_weight(path: ChainPath, u, Q: Generator, epsilon: float) -> float:
    """Stochastic-exponential weight of a tilt `u` along a realized chain path."""
    field = as_tilt_field(u, path.horizon)
    if field.d != Q.d:
        raise ValueError("tilt dimension does not match generator")
    return float(np.exp(_chain_log_weight(path, field, Q, epsilon)))


# -- batched simulation engine -----------------------------------------------------

@dataclass
class _EngineSpec:
    model: RegimeModel | None
    Q: Generator
    epsilon: float
    T: float
    m: int
    x0: int
    gamma: float = 0.0
    tilt: TiltField | None = None          # chain sampling law (None = base)
    hB: np.ndarray | None = None           # per-cell Brownian drift tilt
    hW: np.ndarray | None = None
    lam: np.ndarray | None = None          # per-cell step-lambda for the Wiener exponential
    phi_nodes: np.ndarray | None = None
    target: KernelPath | None = None
    weight_field: TiltField | None = None  # evaluate chain exponential against this tilt
    pair_gamma: float | None = None
    need_sde: bool = True
    use_w: bool = False
    collect_paths: bool = False

    @property
    def dtc(self):
        return self.T / self.m

    @property
    def nodes(self):
        return np.linspace(0.0, self.T, self.m + 1)


def _run_chunk(spec: _EngineSpec, seed, prefix, j0, j1):
    Q, eps, T = spec.Q, spec.epsilon, spec.T
    nj = j1 - j0
    chains = []
    for j in range(j0, j1):
        rngc = make_rng(seed, *prefix, j, 0)
        if spec.tilt is None:
            chains.append(_chain_from_rng(Q, eps, T, spec.x0, rngc))
        else:
            chains.append(_tilted_chain_from_rng(Q, spec.tilt, eps, T, spec.x0, rngc))
    out = {}
    if spec.need_sde:
        m, dtc, nodes = spec.m, spec.dtc, spec.nodes
        model = spec.model
        b0, b1 = model.drift_const, model.drift_slope
        s0, s1 = model.sigma_const, model.sigma_slope
        sqeps = math.sqrt(eps)
        sqdt = math.sqrt(dtc)
        ZB = np.empty((nj, m))
        ZE = []
        for idx in range(nj):
            rngb = make_rng(seed, *prefix, j0 + idx, 1)
            ZB[idx] = rngb.standard_normal(m)
            ZE.append(rngb.standard_normal(chains[idx].jump_count))
        if spec.use_w:
            ZW = np.empty((nj, m))
            ZWE = []
            for idx in range(nj):
                rngw = make_rng(seed, *prefix, j0 + idx, 2)
                ZW[idx] = rngw.standard_normal(m)
                ZWE.append(rngw.standard_normal(chains[idx].jump_count))
        cell_events = [None] * m
        for idx, ch in enumerate(chains):
            cells = np.minimum((ch.jump_times / dtc).astype(np.int64), m - 1)
            for t, s, c in zip(ch.jump_times, ch.states, cells):
                if cell_events[c] is None:
                    cell_events[c] = {}
                cell_events[c].setdefault(idx, []).append((t, int(s)))
        cur = np.full(nj, spec.x0, dtype=np.int64)
        M = np.zeros(nj)
        pair = spec.pair_gamma is not None
        Mg = np.zeros(nj) if pair else None
        pdist = np.zeros(nj) if pair else None
        rho = np.zeros(nj) if spec.phi_nodes is not None else None
        girs = np.zeros(nj) if spec.hB is not None else None
        nlog = np.zeros(nj) if spec.lam is not None else None
        eptr = np.zeros(nj, dtype=np.int64)
        paths = np.zeros((nj, m + 1)) if spec.collect_paths else None
        gam = spec.gamma
        for k in range(m):
            events = cell_events[k]
            hBk = float(spec.hB[k]) if spec.hB is not None else 0.0
            hWk = float(spec.hW[k]) if spec.hW is not None else 0.0
            lamk = float(spec.lam[k]) if spec.lam is not None else 0.0
            if events:
                jumpy = list(events.keys())
                saveM = M[jumpy].copy()
                saveMg = Mg[jumpy].copy() if pair else None
                saveG = girs[jumpy].copy() if girs is not None else None
                saveN = nlog[jumpy].copy() if nlog is not None else None
            z = ZB[:, k]
            dB = sqdt * z
            b = b0[cur] + b1[cur] * M
            s = s0[cur] + s1[cur] * M
            drift = b * dtc
            if spec.hB is not None:
                drift = drift + s * (hBk * dtc)
                girs += -hBk * dB / sqeps - hBk * hBk * dtc / (2.0 * eps)
            if spec.use_w:
                dW = sqdt * ZW[:, k]
                if spec.hW is not None:
                    drift = drift + gam * hWk * dtc
                    girs += -hWk * dW / sqeps - hWk * hWk * dtc / (2.0 * eps)
            if nlog is not None:
                nlog += lamk * s * dB / sqeps - 0.5 * lamk * lamk * s * s * dtc / eps
            M_new = M + drift + sqeps * s * dB
            if spec.use_w and gam != 0.0:
                M_new = M_new + sqeps * gam * dW
            if pair:
                bg = b0[cur] + b1[cur] * Mg
                sg = s0[cur] + s1[cur] * Mg
                Mg = Mg + bg * dtc + sqeps * sg * dB + sqeps * spec.pair_gamma * dW
            M = M_new
            if events:
                t0, t1 = nodes[k], nodes[k + 1]
                for pos, i in enumerate(jumpy):
                    evs = events[i]
                    Mi = float(saveM[pos])
                    Mgi = float(saveMg[pos]) if pair else 0.0
                    gi = float(saveG[pos]) if girs is not None else 0.0
                    ni = float(saveN[pos]) if nlog is not None else 0.0
                    st = int(cur[i])
                    times = [t0] + [t for t, _ in evs] + [t1]
                    for l in range(len(times) - 1):
                        dl = times[l + 1] - times[l]
                        sq = math.sqrt(dl)
                        zi = ZB[i, k] if l == 0 else ZE[i][eptr[i]]
                        if spec.use_w:
                            zwi = ZW[i, k] if l == 0 else ZWE[i][eptr[i]]
                        if l > 0:
                            eptr[i] += 1
                        dBi = sq * zi
                        bi = b0[st] + b1[st] * Mi
                        si = s0[st] + s1[st] * Mi
                        dr = bi * dl
                        if spec.hB is not None:
                            dr += si * hBk * dl
                            gi += -hBk * dBi / sqeps - hBk * hBk * dl / (2.0 * eps)
                        if spec.use_w:
                            dWi = sq * zwi
                            if spec.hW is not None:
                                dr += gam * hWk * dl
                                gi += -hWk * dWi / sqeps - hWk * hWk * dl / (2.0 * eps)
                        if nlog is not None:
                            ni += lamk * si * dBi / sqeps - 0.5 * lamk * lamk * si * si * dl / eps
                        Mi = Mi + dr + sqeps * si * dBi
                        if spec.use_w and gam != 0.0:
                            Mi = Mi + sqeps * gam * dWi
                        if pair:
                            bgi = b0[st] + b1[st] * Mgi
                            sgi = s0[st] + s1[st] * Mgi
                            Mgi = Mgi + bgi * dl + sqeps * sgi * dBi + sqeps * spec.pair_gamma * dWi
                        if l < len(evs):
                            st = evs[l][1]
                    M[i] = Mi
                    cur[i] = st
                    if pair:
                        Mg[i] = Mgi
                    if girs is not None:
                        girs[i] = gi
                    if nlog is not None:
                        nlog[i] = ni
            if rho is not None:
                rho = np.maximum(rho, np.abs(M - spec.phi_nodes[k + 1]))
            if pair:
                pdist = np.maximum(pdist, np.abs(M - Mg))
            if paths is not None:
                paths[:, k + 1] = M
        if rho is not None:
            out["rho"] = rho
        if girs is not None:
            out["girs"] = girs
        if nlog is not None:
            out["nlog"] = nlog
        if pair:
            out["pair_dist"] = pdist
        if paths is not None:
            out["paths"] = paths
    if spec.target is not None:
        out["dT"] = np.array([_chain_kernel_distance(ch, spec.target) for ch in chains])
    if spec.weight_field is not None:
        out["chain_logw"] = np.array(
            [_chain_log_weight(ch, spec.weight_field, Q, eps) for ch in chains]
        )
    if spec.collect_paths:
        out["chains"] = chains
    return out


def _run_batch(spec: _EngineSpec, seed, prefix, n_samples, threads=1):
    edges = list(range(0, n_samples, _CHUNK)) + [n_samples]
    jobs = [(a, b) for a, b in zip(edges, edges[1:]) if b > a]
    if threads is None:
        threads = 1
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda ab: _run_chunk(spec, seed, prefix, *ab), jobs))
    else:
        parts = [_run_chunk(spec, seed, prefix, a, b) for a, b in jobs]
    out = {}
    for key in parts[0]:
        if key == "chains":
            out[key] = [c for p in parts for c in p[key]]
        elif key == "paths":
            out[key] = np.concatenate([p[key] for p in parts], axis=0)
        else:
            out[key] = np.concatenate([p[key] for p in parts])
    return out


def _sde_cells(T, dt):
    m = int(round(T / dt))
    if m < 1 or abs(m * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide the horizon T={T}")
    return m


# -- simulation -------------------------------------------------------------------

def simulate_mmsde(model: RegimeModel, Q: Generator, epsilon, T, dt, seed,
                   gamma=0.0, x0=0, stream=0):
    """One modulated-diffusion trajectory and its driving chain.

    The chain is simulated first (it is independent of the Brownian noise),
    then Euler-Maruyama runs on the union of the uniform dt-grid and the jump
    times.  The auxiliary noise for gamma > 0 is always drawn, so paths with
    different gamma but the same (seed, stream) are coupled through shared
    increments.
    """
    if epsilon <= 0 or T <= 0 or dt <= 0 or dt > T:
        raise ValueError("need epsilon > 0 and 0 < dt <= T")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    m = _sde_cells(float(T), float(dt))
    spec = _EngineSpec(model=model, Q=Q, epsilon=float(epsilon), T=float(T), m=m,
                       x0=int(x0), gamma=float(gamma), use_w=True, collect_paths=True)
    res = _run_chunk(spec, seed, (), int(stream), int(stream) + 1)
    path = DiffusionPath(spec.nodes, res["paths"][0], float(epsilon), float(gamma))
    return path, res["chains"][0]


# -- estimators --------------------------------------------------------------------

def _event_distance(res, event):
    if event == "joint":
        return res["rho"] + res["dT"]
    if event == "path":
        return res["rho"]
    return res["dT"]


def _phi_on_nodes(phi: PathGrid, nodes):
    if phi.grid.size == nodes.size:
        return phi.values
    return np.interp(nodes, phi.grid, phi.values)


def _check_event(event):
    if event not in _EVENTS:
        raise ValueError(f"event must be one of {_EVENTS}")


def ball_probability_naive(model, Q, epsilon, T, dt, phi, nu, delta, n_samples, seed,
                           event="joint", gamma=0.0, x0=0, threads=1, _salt=()):
    """Fraction of plain simulations landing in the metric ball of (phi, nu)."""
    _check_event(event)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    need_sde = event != "occupation"
    m = _sde_cells(float(T), float(dt)) if need_sde else 1
    spec = _EngineSpec(model=model, Q=Q, epsilon=float(epsilon), T=float(T), m=m,
                       x0=int(x0), gamma=float(gamma), use_w=gamma != 0.0,
                       need_sde=need_sde,
                       phi_nodes=_phi_on_nodes(phi, np.linspace(0, float(T), m + 1))
                       if need_sde else None,
                       target=nu if event != "path" else None)
    res = _run_batch(spec, seed, (_TAG_NAIVE, *_salt), n_samples, threads)
    hits = _event_distance(res, event) <= delta
    k = int(hits.sum())
    p = k / n_samples
    se = math.sqrt(p * (1.0 - p) / n_samples)
    return ProbEstimate(p, se, n_samples, "naive")


def _kernel_cells_on(nu: KernelPath, nodes):
    """Kernel rows sampled at the cell midpoints of another uniform grid."""
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    c = np.clip(np.searchsorted(nu.grid, mids, side="right") - 1, 0, nu.n_cells - 1)
    return nu.kernels[c]


def _tilt_field_for(Q: Generator, cell_rows, nodes) -> TiltField:
    """Optimal-tilt field for a kernel: node kernels from adjacent cells,
    then one convex solve per node (warm-started)."""
    if np.all(cell_rows == cell_rows[0]):
        sol = dv_local(Q, cell_rows[0])
        return TiltField.constant(sol.tilt, nodes[-1])
    node_rows = np.empty((nodes.size, cell_rows.shape[1]))
    node_rows[0] = cell_rows[0]
    node_rows[-1] = cell_rows[-1]
    node_rows[1:-1] = 0.5 * (cell_rows[:-1] + cell_rows[1:])
    vals = np.empty_like(node_rows)
    z = None
    for i, row in enumerate(node_rows):
        sol = dv_local(Q, row, z0=z)
        vals[i] = sol.tilt
        z = np.log(sol.tilt[1:])
    return TiltField(nodes, vals)


def ball_probability_is(model, Q, epsilon, T, dt, phi, nu, delta, n_samples, seed,
                        event="joint", gamma=0.0, x0=0, threads=1, _salt=()):
    """Importance-sampled ball probability.

    The chain is simulated under the optimal-tilt generator for the target
    kernel and the Brownian motion under the drift tilt toward the target
    path; each sample's indicator is weighted by the inverse of the combined
    exponential, which makes the estimator unbiased for the same discretized
    event as the naive estimator.
    """
    _check_event(event)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    T = float(T)
    if event == "occupation":
        field = _tilt_field_for(Q, nu.kernels, nu.grid)
        trivial = bool(np.abs(field.values - 1.0).max() < 1e-12)
        spec = _EngineSpec(model=model, Q=Q, epsilon=float(epsilon), T=T, m=1,
                           x0=int(x0), need_sde=False,
                           tilt=None if trivial else field,
                           weight_field=None if trivial else field,
                           target=nu)
        res = _run_batch(spec, seed, (_TAG_IS, *_salt), n_samples, threads)
        logw = -res["chain_logw"] if not trivial else np.zeros(n_samples)
    else:
        m = _sde_cells(T, float(dt))
        nodes = np.linspace(0.0, T, m + 1)
        phi_nodes = _phi_on_nodes(phi, nodes)
        rows = _kernel_cells_on(nu, nodes)
        x = 0.5 * (phi_nodes[:-1] + phi_nodes[1:])
        dphi = np.diff(phi_nodes) * (m / T)
        bhat = np.einsum("kd,kd->k", model.drift_states(x), rows)
        s2 = np.einsum("kd,kd->k", model.sigma_states(x) ** 2, rows)
        v = s2 + gamma * gamma
        if (v <= 0.0).any():
            raise SingularDiffusionError(int(np.argmax(v <= 0.0)))
        hB = (dphi - bhat) * np.sqrt(s2) / v
        hW = (dphi - bhat) * gamma / v if gamma != 0.0 else None
        field = _tilt_field_for(Q, rows, nodes)
        trivial = bool(np.abs(field.values - 1.0).max() < 1e-12)
        spec = _EngineSpec(model=model, Q=Q, epsilon=float(epsilon), T=T, m=m,
                           x0=int(x0), gamma=float(gamma), use_w=gamma != 0.0,
                           tilt=None if trivial else field,
                           weight_field=None if trivial else field,
                           hB=hB, hW=hW, phi_nodes=phi_nodes,
                           target=nu if event != "path" else None)
        res = _run_batch(spec, seed, (_TAG_IS, *_salt), n_samples, threads)
        logw = res["girs"].copy()
        if not trivial:
            logw -= res["chain_logw"]
    hits = _event_distance(res, event) <= delta
    vals = np.where(hits, np.exp(np.clip(logw, -745.0, 700.0)), 0.0)
    p = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return ProbEstimate(p, se, n_samples, "importance")


def _wilson_interval(k, n, z=1.96):
    denom = n + z * z
    center = (k + 0.5 * z * z) / denom
    half = z * math.sqrt(k * (n - k) / n + 0.25 * z * z) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


def ldp_curve(model, Q, phi, nu, delta, epsilons, n_samples, seed,
              dt=1e-3, event="joint", method="is", x0=0, threads=1) -> LdpCurve:
    """Ball-probability sweep over strictly decreasing epsilon.

    Tabulates -epsilon*log(p_hat) next to the rate of the ball center; rows
    with zero hits report the one-sided bound -epsilon*log(3/n) and are
    flagged rather than fatal.  No extrapolation is performed.
    """
    _check_event(event)
    eps_list = [float(e) for e in epsilons]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])) or not eps_list:
        raise ValueError("epsilons must be a nonempty strictly decreasing sequence")
    if min(eps_list) <= 0:
        raise ValueError("epsilons must be positive")
    if event == "occupation":
        reference = occupation_rate(Q, nu)
    else:
        breakdown = joint_rate(model, Q, phi, nu)
        reference = breakdown.path_rate if event == "path" else breakdown.joint
    estimator = ball_probability_is if method == "is" else ball_probability_naive
    rows = []
    for i, eps in enumerate(eps_list):
        T = nu.horizon if event == "occupation" else phi.horizon
        est = estimator(model, Q, eps, T, dt, phi, nu, delta, n_samples, seed,
                        event=event, x0=x0, threads=threads, _salt=(i,))
        zero = est.p_hat <= 0.0
        if zero:
            mlp = -eps * math.log(3.0 / n_samples)
            band_lo, band_hi = 0.0, math.inf
        else:
            mlp = -eps * math.log(est.p_hat)
            if est.method == "naive":
                lo, hi = _wilson_interval(round(est.p_hat * n_samples), n_samples)
            else:
                lo = max(est.p_hat - 1.96 * est.std_err, 1e-300)
                hi = est.p_hat + 1.96 * est.std_err
            band_lo = -eps * math.log(hi) if hi > 0 else 0.0
            band_hi = -eps * math.log(lo)
        rows.append(LdpRow(eps, float(delta), est.p_hat, est.std_err, mlp,
                           band_lo, band_hi, zero, est.method))
    return LdpCurve(tuple(rows), float(reference))


def martingale_check(Q: Generator, u, epsilon, T, n_samples, seed,
                     x0=0, threads=1) -> ProbEstimate:
    """Monte Carlo mean of the chain's stochastic exponential (target: 1)."""
    field = as_tilt_field(u, float(T))
    if field.d != Q.d:
        raise ValueError("tilt dimension does not match generator")
    spec = _EngineSpec(model=None, Q=Q, epsilon=float(epsilon), T=float(T), m=1,
                       x0=int(x0), need_sde=False, weight_field=field)
    res = _run_batch(spec, seed, (_TAG_MART,), n_samples, threads)
    w = np.exp(res["chain_logw"])
    mean = float(w.mean())
    se = float(w.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return ProbEstimate(mean, se, n_samples, "martingale")


def exponential_product_check(model, Q, u, lam, epsilon, T, dt, n_samples, seed,
                              x0=0, threads=1) -> ProbEstimate:
    """Monte Carlo mean of the product of the chain and Wiener exponentials.

    `lam` is a StepFunction (or per-cell array) entering the Wiener integral;
    the supermartingale property bounds the true mean by 1.
    """
    T = float(T)
    m = _sde_cells(T, float(dt))
    nodes = np.linspace(0.0, T, m + 1)
    if isinstance(lam, StepFunction):
        lam_cells = lam.at(0.5 * (nodes[:-1] + nodes[1:]))
    else:
        lam_cells = np.asarray(lam, dtype=float)
        if lam_cells.shape != (m,):
            raise ValueError("lam must be a StepFunction or a per-cell array")
    field = as_tilt_field(u, T)
    spec = _EngineSpec(model=model, Q=Q, epsilon=float(epsilon), T=T, m=m,
                       x0=int(x0), lam=lam_cells, weight_field=field)
    res = _run_batch(spec, seed, (_TAG_PROD,), n_samples, threads)
    w = np.exp(res["chain_logw"] + res["nlog"])
    mean = float(w.mean())
    se = float(w.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return ProbEstimate(mean, se, n_samples, "product")


def gamma_closeness(model, Q, epsilon, T, dt, gammas, n_samples, seed,
                    eta=0.1, x0=0, threads=1):
    """Exceedance table for the coupled regularized/plain trajectory gap.

    Every gamma row reuses the same noise streams, so the pairs share the
    Brownian driver and the chain; only the auxiliary-noise amplitude varies.
    """
    gam_list = [float(g) for g in gammas]
    if any(g < 0 for g in gam_list):
        raise ValueError("gamma values must be >= 0")
    if any(b > a for a, b in zip(gam_list, gam_list[1:])):
        raise ValueError("gamma values must be nonincreasing")
    m = _sde_cells(float(T), float(dt))
    rows = []
    for g in gam_list:
        spec = _EngineSpec(model=model, Q=Q, epsilon=float(epsilon), T=float(T), m=m,
                           x0=int(x0), use_w=True, pair_gamma=g)
        res = _run_batch(spec, seed, (_TAG_GAMMA,), n_samples, threads)
        exceed = res["pair_dist"] > eta
        p = float(exceed.mean())
        se = math.sqrt(p * (1.0 - p) / n_samples)
        rows.append(GammaRow(g, p, se, float(eta), n_samples))
    return rows
