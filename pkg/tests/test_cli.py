"""Config parsing, serialization round-trips, subcommands, atomic writes."""

import json
import os

import numpy as np
import pytest

from mmldp.cli import (
    ExperimentConfig,
    main,
    parse_config,
    run_subcommand,
    serialize_config,
    write_atomic,
)
from mmldp.errors import ParseError, ValidationError

MINIMAL = {
    "model": {"states": [{"b0": 0.0, "b1": 0.0, "s0": 1.0, "s1": 0.0},
                          {"b0": 0.0, "b1": 0.0, "s0": 1.0, "s1": 0.0}]},
    "generator": [[-1.0, 1.0], [1.0, -1.0]],
}


def minimal_config(**overrides):
    doc = dict(MINIMAL)
    doc.update(overrides)
    return json.dumps(doc)


class TestParseConfig:
    def test_defaults_filled(self):
        cfg = parse_config(minimal_config())
        assert cfg.grid_n == 1000
        assert cfg.dt == 1e-3
        assert cfg.seed == 0
        assert cfg.horizon == 1.0
        assert cfg.sampler == "both"

    def test_dimension_mismatch(self):
        doc = dict(MINIMAL)
        doc["generator"] = [[-1.0, 0.5, 0.5], [1.0, -2.0, 1.0], [1.0, 1.0, -2.0]]
        with pytest.raises(ValidationError) as exc:
            parse_config(json.dumps(doc))
        assert exc.value.field == "generator.d"

    def test_negative_epsilon(self):
        with pytest.raises(ValidationError) as exc:
            parse_config(minimal_config(epsilons=[0.2, -0.1]))
        assert exc.value.field == "epsilons"

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            parse_config(minimal_config(unknown_field=1))

    def test_bad_json_reports_position(self):
        with pytest.raises(ParseError) as exc:
            parse_config("{\n  \"model\": ,\n}")
        assert exc.value.line == 2

    def test_invalid_generator_content(self):
        doc = dict(MINIMAL)
        doc["generator"] = [[-1.0, 1.0], [0.0, 0.0]]
        with pytest.raises(ValidationError) as exc:
            parse_config(json.dumps(doc))
        assert exc.value.field == "generator"

    def test_roundtrip(self):
        text = minimal_config(
            epsilons=[0.3, 0.1],
            delta=0.25,
            n_samples=512,
            seed=11,
            tilt_u=[1.0, 2.0],
            rho_list=[[0.9, 0.1]],
            nu={"source": "constant", "weights": [0.7, 0.3]},
        )
        cfg = parse_config(text)
        canon = serialize_config(cfg)
        assert parse_config(canon) == cfg
        assert serialize_config(parse_config(canon)) == canon


class TestFileSchemas:
    def test_path_and_kernel_roundtrip(self, tmp_path):
        from mmldp import KernelPath, PathGrid
        from mmldp.cli import kernel_path_to_json, path_grid_to_json

        phi = PathGrid.straight_line(0.7, 1.0, 8)
        nu = KernelPath.constant([0.25, 0.75], 1.0, 8)
        ppath, npath = tmp_path / "phi.json", tmp_path / "nu.json"
        ppath.write_text(path_grid_to_json(phi))
        npath.write_text(kernel_path_to_json(nu))
        cfg = parse_config(minimal_config(
            grid_n=8,
            phi={"source": "file", "path": str(ppath)},
            nu={"source": "file", "path": str(npath)},
        ))
        Q = cfg.build_generator()
        phi2, nu2 = cfg.build_phi(Q), cfg.build_nu(Q)
        assert np.array_equal(phi2.values, phi.values)
        assert np.array_equal(nu2.kernels, nu.kernels)


class TestWriteAtomic:
    def test_no_partial_output(self, tmp_path):
        target = tmp_path / "out.csv"

        class Boom(Exception):
            pass

        class Exploding:
            def __str__(self):
                raise Boom()

        with pytest.raises(Boom):
            write_atomic(str(target), "x" + str(Exploding()))
        assert not target.exists()
        assert list(tmp_path.iterdir()) == []

    def test_writes_and_replaces(self, tmp_path):
        target = tmp_path / "out.csv"
        write_atomic(str(target), "a\n")
        write_atomic(str(target), "b\n")
        assert target.read_text() == "b\n"


class TestSubcommands:
    def test_dv_closed_form_row(self, tmp_path):
        cfg = parse_config(minimal_config(rho_list=[[0.9, 0.1]]))
        (paths,) = run_subcommand("dv", cfg, str(tmp_path))
        rows = open(paths).read().strip().splitlines()
        header = rows[0].split(",")
        vals = dict(zip(header, rows[1].split(",")))
        assert float(vals["value"]) == pytest.approx(0.4, abs=1e-9)

    def test_rate_zero_cost(self, tmp_path):
        cfg = parse_config(minimal_config(
            grid_n=200, phi={"source": "zero-cost"}, nu={"source": "invariant"}))
        (path,) = run_subcommand("rate", cfg, str(tmp_path))
        doc = json.loads(open(path).read())
        assert doc["joint"] <= 1e-6

    def test_simulate_writes_paths(self, tmp_path):
        cfg = parse_config(minimal_config(grid_n=50, dt=0.02, epsilons=[0.2]))
        paths = run_subcommand("simulate", cfg, str(tmp_path))
        assert len(paths) == 2
        lines = open(paths[0]).read().strip().splitlines()
        assert lines[0] == "t,m"
        assert len(lines) == 52

    def test_mlp(self, tmp_path):
        cfg = parse_config(minimal_config(
            grid_n=60, phi={"source": "straight-line-to", "value": 1.0}))
        jpath, cpath = run_subcommand("mlp", cfg, str(tmp_path))
        doc = json.loads(open(jpath).read())
        assert doc["joint"] == pytest.approx(0.5, abs=1e-4)
        assert doc["converged"] is True

    def test_martingale(self, tmp_path):
        cfg = parse_config(minimal_config(
            epsilons=[0.5], n_samples=4000, tilt_u=[1.0, 2.0]))
        (path,) = run_subcommand("martingale", cfg, str(tmp_path))
        doc = json.loads(open(path).read())
        assert doc["rows"][0]["within_3se"] is True

    def test_ldp_verify_csv_schema(self, tmp_path):
        cfg = parse_config(minimal_config(
            grid_n=100, dt=0.01, epsilons=[0.3, 0.2], delta=0.4, n_samples=800,
            sampler="is"))
        (path,) = run_subcommand("ldp-verify", cfg, str(tmp_path))
        lines = open(path).read().strip().splitlines()
        assert lines[0] == "epsilon,delta,p_hat,std_err,minus_eps_log_p,reference_rate"
        assert len(lines) == 3


class TestMain:
    def test_exit_codes_and_diagnostics(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(minimal_config(rho_list=[[0.5, 0.5]]))
        assert main(["dv", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0

        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert main(["dv", "--config", str(bad), "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert json.loads(err)["error"] == "ParseError"

    def test_missing_rho_list_is_validation_failure(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(minimal_config())
        assert main(["dv", "--config", str(cfg_path), "--out", str(tmp_path)]) == 1

    def test_seed_override_changes_output(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(minimal_config(
            grid_n=50, dt=0.02, epsilons=[0.3], n_samples=400, sampler="naive",
            delta=0.4))
        a, b, c = (tmp_path / x for x in ("a", "b", "c"))
        for out, seed in ((a, None), (b, "123"), (c, "123")):
            args = ["is-compare", "--config", str(cfg_path), "--out", str(out)]
            if seed:
                args += ["--seed", seed]
            assert main(args) == 0
        fa, fb, fc = (open(x / "is_compare.csv", "rb").read() for x in (a, b, c))
        assert fb == fc
        assert fa != fb

    def test_thread_independence_byte_identical(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(minimal_config(
            grid_n=100, dt=0.01, epsilons=[0.2], n_samples=5000, delta=0.35))
        outs = []
        for tag, threads in (("t1", "1"), ("t4", "4")):
            out = tmp_path / tag
            assert main(["is-compare", "--config", str(cfg_path), "--out", str(out),
                         "--threads", threads]) == 0
            outs.append(open(out / "is_compare.csv", "rb").read())
        assert outs[0] == outs[1]
