"""Experiment CLI: JSON config ingestion, orchestration, result emission.

One versioned JSON config drives every subcommand.  Outputs are written
atomically (temp file + rename) so failed runs never leave partial
artifacts; CSV uses a fixed column order with %.12g formatting so reruns
diff byte-for-byte.  Exit codes: 0 success, 1 validation failure, 2
numerical failure; failures also emit a one-line JSON diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from .chain import Generator, KernelPath, invariant_distribution, validate_generator
from .errors import (
    NUMERICAL_ERRORS,
    VALIDATION_ERRORS,
    MmldpError,
    ParseError,
    ValidationError,
)
from .montecarlo import (
    ball_probability_is,
    ball_probability_naive,
    ldp_curve,
    martingale_check,
    simulate_mmsde,
)
from .pathopt import PathGrid, most_likely_path, zero_cost_path
from .ratefn import RegimeModel, dv_local, joint_rate

SCHEMA_VERSION = 1

DEFAULTS = {
    "horizon": 1.0,
    "grid_n": 1000,
    "dt": 1e-3,
    "epsilons": (0.2, 0.1, 0.05),
    "delta": 0.2,
    "sampler": "both",
    "n_samples": 1000,
    "seed": 0,
    "gamma": 0.0,
    "x0": 0,
}

_PHI_SOURCES = ("straight-line-to", "zero-cost", "file")
_NU_SOURCES = ("invariant", "constant", "file")
_SAMPLERS = ("naive", "is", "both")
SUBCOMMANDS = ("simulate", "rate", "dv", "mlp", "ldp-verify", "is-compare", "martingale")


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully validated experiment description (JSON-native field types)."""

    states: tuple
    generator: tuple
    horizon: float
    grid_n: int
    dt: float
    epsilons: tuple
    delta: float
    phi_source: str
    phi_value: float | None
    phi_path: str | None
    nu_source: str
    nu_weights: tuple | None
    nu_path: str | None
    sampler: str
    n_samples: int
    seed: int
    gamma: float
    x0: int
    tilt_u: tuple | None
    rho_list: tuple | None
    out_dir: str | None
    schema: int = SCHEMA_VERSION

    # -- builders --------------------------------------------------------------

    def build_model(self) -> RegimeModel:
        return RegimeModel(
            drift_const=[s["b0"] for s in self.states],
            drift_slope=[s["b1"] for s in self.states],
            sigma_const=[s["s0"] for s in self.states],
            sigma_slope=[s["s1"] for s in self.states],
        )

    def build_generator(self) -> Generator:
        return validate_generator(np.asarray(self.generator, dtype=float))

    def build_phi(self, Q: Generator) -> PathGrid:
        if self.phi_source == "straight-line-to":
            return PathGrid.straight_line(self.phi_value, self.horizon, self.grid_n)
        if self.phi_source == "zero-cost":
            return zero_cost_path(self.build_model(), Q, self.horizon, self.grid_n)
        doc = _load_json_file(self.phi_path)
        return PathGrid(np.asarray(doc["t"], float), np.asarray(doc["values"], float))

    def build_nu(self, Q: Generator) -> KernelPath:
        if self.nu_source == "invariant":
            return KernelPath.constant(invariant_distribution(Q), self.horizon, self.grid_n)
        if self.nu_source == "constant":
            return KernelPath.constant(np.asarray(self.nu_weights, float),
                                       self.horizon, self.grid_n)
        doc = _load_json_file(self.nu_path)
        return KernelPath(np.asarray(doc["t"], float), np.asarray(doc["kernels"], float))

    def tilt_vector(self, d: int) -> np.ndarray:
        if self.tilt_u is not None:
            return np.asarray(self.tilt_u, dtype=float)
        return 1.0 + np.arange(d) / d


def _load_json_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def path_grid_to_json(phi: PathGrid) -> str:
    """Serialize a path to the {"t": [...], "values": [...]} schema."""
    return _json_text({"t": list(map(float, phi.grid)),
                       "values": list(map(float, phi.values))})


def kernel_path_to_json(nu: KernelPath) -> str:
    """Serialize a kernel path to the {"t": [...], "kernels": [[...]]} schema."""
    return _json_text({"t": list(map(float, nu.grid)),
                       "kernels": [list(map(float, row)) for row in nu.kernels]})


# -- parsing ----------------------------------------------------------------------

def _require(cond, field, constraint):
    if not cond:
        raise ValidationError(field, constraint)


def _check_keys(obj, allowed, where):
    unknown = set(obj) - set(allowed)
    if unknown:
        key = sorted(unknown)[0]
        raise ValidationError(f"{where}.{key}" if where else key, "unknown key")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a JSON config document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc
    if not isinstance(doc, dict):
        raise ValidationError("(root)", "config must be a JSON object")
    allowed = {"schema", "model", "generator", "horizon", "grid_n", "dt", "epsilons",
               "delta", "phi", "nu", "sampler", "n_samples", "seed", "gamma", "x0",
               "tilt_u", "rho_list", "out_dir"}
    _check_keys(doc, allowed, "")
    schema = doc.get("schema", SCHEMA_VERSION)
    _require(schema == SCHEMA_VERSION, "schema", f"must be {SCHEMA_VERSION}")

    _require("model" in doc, "model", "required")
    model = doc["model"]
    _require(isinstance(model, dict), "model", "must be an object")
    _check_keys(model, {"states"}, "model")
    _require("states" in model and isinstance(model["states"], list),
             "model.states", "must be a list of per-state coefficient objects")
    states = []
    for i, st in enumerate(model["states"]):
        _require(isinstance(st, dict), f"model.states[{i}]", "must be an object")
        _check_keys(st, {"b0", "b1", "s0", "s1"}, f"model.states[{i}]")
        entry = {}
        for key in ("b0", "b1", "s0", "s1"):
            val = st.get(key, 0.0)
            _require(isinstance(val, (int, float)) and not isinstance(val, bool),
                     f"model.states[{i}].{key}", "must be a number")
            entry[key] = float(val)
        states.append(entry)
    d = len(states)
    _require(d >= 2, "model.states", "need at least two states")

    _require("generator" in doc, "generator", "required")
    gen = doc["generator"]
    _require(isinstance(gen, list) and all(isinstance(r, list) for r in gen),
             "generator", "must be a matrix (list of rows)")
    _require(len(gen) == d and all(len(r) == d for r in gen),
             "generator.d", f"must be {d}x{d} to match the {d}-state model")
    generator = tuple(tuple(float(v) for v in row) for row in gen)

    horizon = float(doc.get("horizon", DEFAULTS["horizon"]))
    _require(horizon > 0, "horizon", "must be positive")
    grid_n = doc.get("grid_n", DEFAULTS["grid_n"])
    _require(isinstance(grid_n, int) and grid_n >= 1, "grid_n", "must be a positive integer")
    dt = float(doc.get("dt", DEFAULTS["dt"]))
    _require(0 < dt <= horizon, "dt", "must lie in (0, horizon]")
    epsilons = tuple(float(e) for e in doc.get("epsilons", DEFAULTS["epsilons"]))
    _require(all(e > 0 for e in epsilons), "epsilons", "must be positive")
    _require(all(b < a for a, b in zip(epsilons, epsilons[1:])),
             "epsilons", "must be strictly decreasing")
    delta = float(doc.get("delta", DEFAULTS["delta"]))
    _require(delta >= 0, "delta", "must be >= 0")

    phi = doc.get("phi", {"source": "straight-line-to", "value": 1.0})
    _require(isinstance(phi, dict), "phi", "must be an object")
    _check_keys(phi, {"source", "value", "path"}, "phi")
    phi_source = phi.get("source", "straight-line-to")
    _require(phi_source in _PHI_SOURCES, "phi.source", f"must be one of {_PHI_SOURCES}")
    phi_value = phi.get("value")
    phi_path = phi.get("path")
    if phi_source == "straight-line-to":
        _require(isinstance(phi_value, (int, float)) and not isinstance(phi_value, bool),
                 "phi.value", "required for straight-line-to")
        phi_value = float(phi_value)
    if phi_source == "file":
        _require(isinstance(phi_path, str), "phi.path", "required for file source")

    nu = doc.get("nu", {"source": "invariant"})
    _require(isinstance(nu, dict), "nu", "must be an object")
    _check_keys(nu, {"source", "weights", "path"}, "nu")
    nu_source = nu.get("source", "invariant")
    _require(nu_source in _NU_SOURCES, "nu.source", f"must be one of {_NU_SOURCES}")
    nu_weights = nu.get("weights")
    nu_path = nu.get("path")
    if nu_source == "constant":
        _require(isinstance(nu_weights, list) and len(nu_weights) == d,
                 "nu.weights", f"must be a length-{d} simplex vector")
        nu_weights = tuple(float(w) for w in nu_weights)
        _require(all(w >= 0 for w in nu_weights) and abs(sum(nu_weights) - 1.0) <= 1e-12,
                 "nu.weights", "must be nonnegative and sum to 1")
    if nu_source == "file":
        _require(isinstance(nu_path, str), "nu.path", "required for file source")

    sampler = doc.get("sampler", DEFAULTS["sampler"])
    _require(sampler in _SAMPLERS, "sampler", f"must be one of {_SAMPLERS}")
    n_samples = doc.get("n_samples", DEFAULTS["n_samples"])
    _require(isinstance(n_samples, int) and n_samples >= 1,
             "n_samples", "must be a positive integer")
    seed = doc.get("seed", DEFAULTS["seed"])
    _require(isinstance(seed, int) and seed >= 0, "seed", "must be a nonnegative integer")
    gamma = float(doc.get("gamma", DEFAULTS["gamma"]))
    _require(gamma >= 0, "gamma", "must be >= 0")
    x0 = doc.get("x0", DEFAULTS["x0"])
    _require(isinstance(x0, int) and 0 <= x0 < d, "x0", f"must be a state index in [0, {d})")

    tilt_u = doc.get("tilt_u")
    if tilt_u is not None:
        _require(isinstance(tilt_u, list) and len(tilt_u) == d,
                 "tilt_u", f"must be a length-{d} vector")
        tilt_u = tuple(float(v) for v in tilt_u)
        _require(all(v > 0 for v in tilt_u), "tilt_u", "entries must be positive")

    rho_list = doc.get("rho_list")
    if rho_list is not None:
        _require(isinstance(rho_list, list) and rho_list, "rho_list", "must be a nonempty list")
        rows = []
        for i, row in enumerate(rho_list):
            _require(isinstance(row, list) and len(row) == d,
                     f"rho_list[{i}]", f"must be a length-{d} simplex vector")
            rows.append(tuple(float(v) for v in row))
        rho_list = tuple(rows)

    out_dir = doc.get("out_dir")
    if out_dir is not None:
        _require(isinstance(out_dir, str), "out_dir", "must be a string")

    cfg = ExperimentConfig(
        states=tuple({k: s[k] for k in ("b0", "b1", "s0", "s1")} for s in states),
        generator=generator, horizon=horizon, grid_n=grid_n, dt=dt,
        epsilons=epsilons, delta=delta,
        phi_source=phi_source, phi_value=phi_value, phi_path=phi_path,
        nu_source=nu_source, nu_weights=nu_weights, nu_path=nu_path,
        sampler=sampler, n_samples=n_samples, seed=seed, gamma=gamma, x0=x0,
        tilt_u=tilt_u, rho_list=rho_list, out_dir=out_dir, schema=schema,
    )
    try:
        cfg.build_generator()
        cfg.build_model()
    except MmldpError as exc:
        raise ValidationError("generator", str(exc)) from exc
    except ValueError as exc:
        raise ValidationError("model", str(exc)) from exc
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical JSON for a config; parse(serialize(c)) == c."""
    doc = {
        "schema": cfg.schema,
        "model": {"states": [dict(s) for s in cfg.states]},
        "generator": [list(row) for row in cfg.generator],
        "horizon": cfg.horizon,
        "grid_n": cfg.grid_n,
        "dt": cfg.dt,
        "epsilons": list(cfg.epsilons),
        "delta": cfg.delta,
        "phi": {"source": cfg.phi_source},
        "nu": {"source": cfg.nu_source},
        "sampler": cfg.sampler,
        "n_samples": cfg.n_samples,
        "seed": cfg.seed,
        "gamma": cfg.gamma,
        "x0": cfg.x0,
    }
    if cfg.phi_value is not None:
        doc["phi"]["value"] = cfg.phi_value
    if cfg.phi_path is not None:
        doc["phi"]["path"] = cfg.phi_path
    if cfg.nu_weights is not None:
        doc["nu"]["weights"] = list(cfg.nu_weights)
    if cfg.nu_path is not None:
        doc["nu"]["path"] = cfg.nu_path
    if cfg.tilt_u is not None:
        doc["tilt_u"] = list(cfg.tilt_u)
    if cfg.rho_list is not None:
        doc["rho_list"] = [list(r) for r in cfg.rho_list]
    if cfg.out_dir is not None:
        doc["out_dir"] = cfg.out_dir
    return json.dumps(doc, indent=2) + "\n"


# -- output helpers -----------------------------------------------------------------

def _fmt(x):
    return "%.12g" % float(x)


def write_atomic(path, text):
    """Write text via a temp file and rename; no partial output on failure."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, (int, float)) else str(v)
                              for v in row))
    return "\n".join(lines) + "\n"


def _json_text(obj):
    return json.dumps(obj, indent=2) + "\n"


# -- subcommands ---------------------------------------------------------------------

def _cmd_simulate(cfg, out_dir, fmt, threads):
    model, Q = cfg.build_model(), cfg.build_generator()
    artifacts = []
    for i, eps in enumerate(cfg.epsilons):
        path, chain = simulate_mmsde(model, Q, eps, cfg.horizon, cfg.dt, cfg.seed,
                                     gamma=cfg.gamma, x0=cfg.x0, stream=i)
        name = os.path.join(out_dir, f"path_{i:03d}.csv")
        write_atomic(name, _csv(["t", "m"], zip(path.grid, path.values)))
        cname = os.path.join(out_dir, f"chain_{i:03d}.csv")
        times = np.concatenate(([0.0], chain.jump_times))
        states = np.concatenate(([chain.initial_state], chain.states))
        write_atomic(cname, _csv(["t", "state"],
                                 [(t, int(s)) for t, s in zip(times, states)]))
        artifacts += [name, cname]
    return artifacts


def _cmd_rate(cfg, out_dir, fmt, threads):
    model, Q = cfg.build_model(), cfg.build_generator()
    phi, nu = cfg.build_phi(Q), cfg.build_nu(Q)
    breakdown = joint_rate(model, Q, phi, nu)
    name = os.path.join(out_dir, "rate.json")
    write_atomic(name, _json_text({
        "path_rate": breakdown.path_rate,
        "occupation_rate": breakdown.occupation_rate,
        "joint": breakdown.joint,
    }))
    return [name]


def _cmd_dv(cfg, out_dir, fmt, threads):
    Q = cfg.build_generator()
    if cfg.rho_list is None:
        raise ValidationError("rho_list", "required for the dv subcommand")
    rows = []
    for rho in cfg.rho_list:
        sol = dv_local(Q, np.asarray(rho, float))
        rows.append((*rho, sol.value, *sol.tilt, sol.gradient_norm, sol.iterations))
    d = Q.d
    header = [f"rho_{i}" for i in range(d)] + ["value"] + [f"u_{i}" for i in range(d)] \
        + ["gradient_norm", "iterations"]
    if fmt == "json":
        name = os.path.join(out_dir, "dv.json")
        write_atomic(name, _json_text([dict(zip(header, map(float, row))) for row in rows]))
    else:
        name = os.path.join(out_dir, "dv.csv")
        write_atomic(name, _csv(header, rows))
    return [name]


def _cmd_mlp(cfg, out_dir, fmt, threads):
    model, Q = cfg.build_model(), cfg.build_generator()
    if cfg.phi_source == "straight-line-to":
        target = cfg.phi_value
    else:
        target = float(zero_cost_path(model, Q, cfg.horizon, cfg.grid_n).values[-1])
    result = most_likely_path(model, Q, cfg.horizon, target, cfg.grid_n)
    jname = os.path.join(out_dir, "mlp.json")
    write_atomic(jname, _json_text({
        "target": target,
        "path_rate": result.rate.path_rate,
        "occupation_rate": result.rate.occupation_rate,
        "joint": result.rate.joint,
        "converged": result.converged,
        "objective_history": list(result.objective_history),
    }))
    pname = os.path.join(out_dir, "mlp_path.csv")
    header = ["t", "phi"] + [f"k_{i}" for i in range(Q.d)]
    kernels = np.vstack([result.nu_star.kernels, result.nu_star.kernels[-1]])
    rows = [(t, v, *krow) for t, v, krow in
            zip(result.phi_star.grid, result.phi_star.values, kernels)]
    write_atomic(pname, _csv(header, rows))
    return [jname, pname]


def _ldp_csv(curve):
    header = ["epsilon", "delta", "p_hat", "std_err", "minus_eps_log_p", "reference_rate"]
    rows = [(r.epsilon, r.delta, r.p_hat, r.std_err, r.minus_eps_log_p,
             curve.reference_rate) for r in curve.rows]
    return _csv(header, rows)


def _cmd_ldp_verify(cfg, out_dir, fmt, threads):
    model, Q = cfg.build_model(), cfg.build_generator()
    phi, nu = cfg.build_phi(Q), cfg.build_nu(Q)
    method = "is" if cfg.sampler in ("is", "both") else "naive"
    curve = ldp_curve(model, Q, phi, nu, cfg.delta, cfg.epsilons, cfg.n_samples,
                      cfg.seed, dt=cfg.dt, method=method, x0=cfg.x0, threads=threads)
    if fmt == "json":
        name = os.path.join(out_dir, "ldp.json")
        write_atomic(name, _json_text({
            "reference_rate": curve.reference_rate,
            "rows": [dataclasses.asdict(r) for r in curve.rows],
        }))
    else:
        name = os.path.join(out_dir, "ldp.csv")
        write_atomic(name, _ldp_csv(curve))
    return [name]


def _cmd_is_compare(cfg, out_dir, fmt, threads):
    model, Q = cfg.build_model(), cfg.build_generator()
    phi, nu = cfg.build_phi(Q), cfg.build_nu(Q)
    rows = []
    for i, eps in enumerate(cfg.epsilons):
        for estimator, fn in (("naive", ball_probability_naive),
                              ("importance", ball_probability_is)):
            est = fn(model, Q, eps, cfg.horizon, cfg.dt, phi, nu, cfg.delta,
                     cfg.n_samples, cfg.seed, gamma=cfg.gamma, x0=cfg.x0,
                     threads=threads, _salt=(i,))
            rows.append((estimator, eps, cfg.delta, est.p_hat, est.std_err,
                         est.n_samples))
    header = ["estimator", "epsilon", "delta", "p_hat", "std_err", "n_samples"]
    if fmt == "json":
        name = os.path.join(out_dir, "is_compare.json")
        write_atomic(name, _json_text([dict(zip(header, row)) for row in rows]))
    else:
        name = os.path.join(out_dir, "is_compare.csv")
        write_atomic(name, _csv(header, rows))
    return [name]


def _cmd_martingale(cfg, out_dir, fmt, threads):
    Q = cfg.build_generator()
    u = cfg.tilt_vector(Q.d)
    rows = []
    for i, eps in enumerate(cfg.epsilons):
        est = martingale_check(Q, u, eps, cfg.horizon, cfg.n_samples, cfg.seed,
                               x0=cfg.x0, threads=threads)
        ok = abs(est.p_hat - 1.0) <= 3.0 * est.std_err
        rows.append({"epsilon": eps, "mean": est.p_hat, "std_err": est.std_err,
                     "n_samples": est.n_samples, "within_3se": bool(ok)})
    name = os.path.join(out_dir, "martingale.json")
    write_atomic(name, _json_text({"tilt": list(map(float, u)), "rows": rows}))
    return [name]


_HANDLERS = {
    "simulate": _cmd_simulate,
    "rate": _cmd_rate,
    "dv": _cmd_dv,
    "mlp": _cmd_mlp,
    "ldp-verify": _cmd_ldp_verify,
    "is-compare": _cmd_is_compare,
    "martingale": _cmd_martingale,
}


def run_subcommand(name, cfg: ExperimentConfig, out_dir, fmt="csv", threads=None):
    """Run one subcommand; returns the list of artifact paths written."""
    if name not in _HANDLERS:
        raise ValidationError("subcommand", f"must be one of {SUBCOMMANDS}")
    if threads is None:
        threads = os.cpu_count() or 1
    return _HANDLERS[name](cfg, out_dir, fmt, threads)


def _diagnostic(exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "constraint", "line", "column"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    return json.dumps(payload)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mmldp",
        description="Experiment runner for the switching-diffusion large-deviations toolkit.",
        epilog="Config defaults: horizon 1.0, grid_n 1000, dt 1e-3, "
               "epsilons (0.2, 0.1, 0.05), delta 0.2, sampler both, n_samples 1000, "
               "seed 0, gamma 0, x0 0, phi straight-line-to 1.0, nu invariant.",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--out", default=None, help="output directory (default: config out_dir or '.')")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for sampling (default: machine parallelism)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="output format for tabular artifacts")
    args = parser.parse_args(argv)
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
        cfg = parse_config(text)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        out_dir = args.out or cfg.out_dir or "."
        artifacts = run_subcommand(args.subcommand, cfg, out_dir,
                                   fmt=args.format, threads=args.threads)
    except VALIDATION_ERRORS as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return 2
    except OSError as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return 1
    for a in artifacts:
        print(a)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
