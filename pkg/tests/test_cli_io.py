import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from _problems import V_PAIR, gpe_template, poly_template, resonant_context
from resonant_nls import cli
from resonant_nls.fourier import FourierSeries
from resonant_nls.io import (PROBLEM_DEFAULTS, SET_DEFAULTS, ConfigError, atomic_write,
                             bundle_parts, context_from_config, context_to_config, dumps,
                             load_json, resolve_config)

ROOT = Path(__file__).resolve().parents[1]
GOLDEN_CONFIG = ROOT / "configs" / "golden_solve.json"
GOLDEN_DIR = Path(__file__).parent / "golden"


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def golden_raw():
    return json.loads(GOLDEN_CONFIG.read_text())


def config_for(ctx, **top):
    cfg = {"version": 1, "seed": 0, "problem": context_to_config(ctx)}
    cfg.update(top)
    return cfg


@pytest.fixture(scope="module")
def golden_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("golden")
    code = cli.main(["solve", "--config", str(GOLDEN_CONFIG), "--out", str(out)])
    return code, out


class TestSolve:
    def test_golden_exit_and_bytes(self, golden_run):
        code, out = golden_run
        assert code == 0
        assert (out / "solution.json").read_bytes() == (GOLDEN_DIR / "golden_solution.json").read_bytes()
        assert (out / "trace.csv").read_bytes() == (GOLDEN_DIR / "golden_trace.csv").read_bytes()

    def test_config_echo_has_defaults(self, golden_run, capsys):
        _, out = golden_run
        echoed = json.loads((out / "config.json").read_text())
        assert set(PROBLEM_DEFAULTS) <= set(echoed["problem"])
        assert echoed["problem"]["set_params"] == SET_DEFAULTS
        assert echoed["out"] == str(out)

    def test_echo_printed(self, tmp_path, capsys):
        cli.main(["solve", "--config", str(GOLDEN_CONFIG), "--out", str(tmp_path)])
        assert json.loads(capsys.readouterr().out) == json.loads((tmp_path / "config.json").read_text())

    def test_linear(self, tmp_path):
        cfg = golden_raw()
        cfg["problem"]["sigma"] = 0.0
        code = cli.main(["solve", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)])
        bundle = load_json(tmp_path / "solution.json")
        assert code == 0 and bundle["trace"]["m"] == [1]

    def test_regime_violation(self, tmp_path):
        ctx = resonant_context(8.0, gpe_template())
        cfg = config_for(ctx)
        cfg["problem"]["A"] = [0.1, 0.0]
        path = write_config(tmp_path, cfg)
        assert cli.main(["solve", "--config", path, "--out", str(tmp_path / "a")]) == 3
        assert not (tmp_path / "a" / "solution.json").exists()
        # forced through, the amplitude is far outside the regime and the series diverges
        assert cli.main(["solve", "--config", path, "--out", str(tmp_path / "b"), "--force"]) == 4

    def test_branch_override(self, tmp_path):
        code = cli.main(["solve", "--config", str(GOLDEN_CONFIG), "--out", str(tmp_path),
                         "--branch", "minus"])
        bundle = load_json(tmp_path / "solution.json")
        assert code == 0 and bundle["context"]["branch"] == "minus"
        assert bundle["lambda"] < load_json(GOLDEN_DIR / "golden_solution.json")["lambda"]

    def test_non_contraction_exit(self, tmp_path):
        cfg = golden_raw()
        cfg["problem"].update(A=[8.0, 0.0], split_mean=True)
        assert cli.main(["solve", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path),
                         "--force"]) == 4
        assert (tmp_path / "trace.csv").exists()

    def test_seed_override_echoed(self, tmp_path):
        cli.main(["solve", "--config", str(GOLDEN_CONFIG), "--out", str(tmp_path), "--seed", "7"])
        assert load_json(tmp_path / "config.json")["seed"] == 7


class TestInvalidConfig:
    @pytest.mark.parametrize("mutate", [
        lambda c: c.update(extra=1),
        lambda c: c.update(version=2),
        lambda c: c["problem"].pop("V"),
        lambda c: c["problem"].update(branch="up"),
        lambda c: c["problem"].update(bogus=1),
        lambda c: c["problem"].update(t=[0.1]),
        lambda c: c["problem"].update(q=[0, 0, 1]),
        lambda c: c["problem"].update(V={"dim": 2}),
        lambda c: c["problem"].update(A="big"),
        lambda c: c.update(seed=-1),
        lambda c: c["problem"].update(set_params={"radius": 3}),
    ])
    def test_exit_2(self, tmp_path, mutate):
        cfg = golden_raw()
        mutate(cfg)
        assert cli.main(["solve", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)]) == 2

    def test_unreadable_file(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert cli.main(["solve", "--config", str(p), "--out", str(tmp_path)]) == 2

    def test_vq_zero_is_config_error(self, tmp_path):
        cfg = golden_raw()
        cfg["problem"]["q"] = [3, 3]
        assert cli.main(["solve", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path),
                         "--force"]) == 2

    def test_sweep_needs_block(self, tmp_path):
        assert cli.main(["sweep", "--config", str(GOLDEN_CONFIG), "--out", str(tmp_path)]) == 2

    def test_bad_sweep_family(self, tmp_path):
        cfg = golden_raw()
        cfg["sweep"] = {"family": "nope", "k_values": [6, 9, 12]}
        assert cli.main(["sweep", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)]) == 2

    def test_trace_needs_lambda0(self, tmp_path):
        cfg = golden_raw()
        cfg["trace"] = {"max_points": 3}
        assert cli.main(["trace", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)]) == 2


class TestVerify:
    def test_fresh_bundle(self, golden_run, capsys):
        _, out = golden_run
        assert cli.main(["verify", str(out / "solution.json")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 4 and all(line.startswith("ok") for line in lines)

    def test_shifted_eigenvalue(self, tmp_path, capsys):
        bundle = load_json(GOLDEN_DIR / "golden_solution.json")
        bundle["lambda"] += 1e-3
        p = tmp_path / "b.json"
        p.write_text(dumps(bundle))
        assert cli.main(["verify", str(p)]) == 5
        text = capsys.readouterr().out
        assert "FAILED residual" in text and "FAILED eigenvalue" in text

    def test_truncated_psi(self, tmp_path, capsys):
        bundle = load_json(GOLDEN_DIR / "golden_solution.json")
        coeffs = sorted(bundle["psi"]["coeffs"], key=lambda c: -(c["re"] ** 2 + c["im"] ** 2))
        bundle["psi"]["coeffs"] = coeffs[:2]
        p = tmp_path / "b.json"
        p.write_text(dumps(bundle))
        assert cli.main(["verify", str(p)]) == 5
        assert "FAILED fixed-point defect" in capsys.readouterr().out

    def test_perturbed_w(self, tmp_path):
        bundle = load_json(GOLDEN_DIR / "golden_solution.json")
        bundle["W"]["coeffs"][0]["re"] += 1e-6
        p = tmp_path / "b.json"
        p.write_text(dumps(bundle))
        assert cli.main(["verify", str(p)]) == 5

    def test_not_a_bundle(self, tmp_path):
        p = tmp_path / "b.json"
        p.write_text(json.dumps({"format": "other"}))
        assert cli.main(["verify", str(p)]) == 5

    def test_linear_bundle(self, tmp_path):
        cfg = golden_raw()
        cfg["problem"]["A"] = [0.0, 0.0]
        cli.main(["solve", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)])
        assert cli.main(["verify", str(tmp_path / "solution.json")]) == 0


class TestSweepAndTrace:
    def test_sweep(self, tmp_path):
        cfg = config_for(resonant_context(9.0, poly_template()),
                         sweep={"family": "contraction", "k_values": [6.0, 9.0, 12.0],
                                "point_method": "construct"})
        code = cli.main(["sweep", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "sweep.csv").read_text().startswith("k,metric,fit_slope,pass\n")
        data = load_json(tmp_path / "sweep.json")
        assert data["metric"] == [0.0, 0.0, 0.0] and data["pass"] is True
        assert data["fit_slope"] is None

    def test_failing_sweep_exit(self, tmp_path):
        cfg = config_for(resonant_context(9.0, poly_template()),
                         sweep={"family": "deficit", "k_values": [6.0, 9.0, 12.0],
                                "point_method": "construct"})
        cfg["problem"]["V"] = FourierSeries(2, {(0, 1): 0.01, (0, -1): 0.01}).to_dict()
        assert cli.main(["sweep", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)]) == 4

    def test_trace(self, tmp_path):
        ctx = resonant_context(12.0, poly_template(V=V_PAIR, pair_only=True), 0.3)
        cfg = config_for(ctx, trace={"lambda0": 12.0**4, "max_points": 3, "layer_position": 0.3,
                                     "point_method": "construct"})
        code = cli.main(["trace", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)])
        assert code == 0
        data = load_json(tmp_path / "isocurve.json")
        assert len(data["points"]) == 3 and data["max_model_deviation"] <= 1e-9
        rows = (tmp_path / "isocurve.csv").read_text().splitlines()
        assert rows[0] == "index,t_1,t_2,lambda,model_deviation" and len(rows) == 4


class TestIO:
    def test_context_round_trip(self):
        ctx = resonant_context(9.0, poly_template())
        back = context_from_config(context_to_config(ctx))
        assert back == ctx

    def test_bundle_round_trip(self):
        bundle = load_json(GOLDEN_DIR / "golden_solution.json")
        ctx, W, psi, lam, trace = bundle_parts(bundle)
        assert lam == bundle["lambda"] and trace.m == bundle["trace"]["m"]
        assert W.to_dict() == bundle["W"]

    def test_dumps_is_canonical(self):
        assert dumps({"b": float("nan"), "a": [1.0, float("inf")]}) == \
            '{\n  "a": [\n    1.0,\n    null\n  ],\n  "b": null\n}\n'

    def test_resolve_is_idempotent(self):
        once = resolve_config(golden_raw(), "solve")
        assert resolve_config(once, "solve") == once

    def test_resolve_does_not_mutate(self):
        raw = golden_raw()
        before = json.dumps(raw, sort_keys=True)
        resolve_config(raw, "solve")
        assert json.dumps(raw, sort_keys=True) == before

    def test_scalar_amplitude(self):
        raw = golden_raw()
        raw["problem"]["A"] = 0.5
        assert resolve_config(raw, "solve")["problem"]["A"] == [0.5, 0.0]

    def test_load_missing(self, tmp_path):
        with pytest.raises(ConfigError):
            load_json(tmp_path / "none.json")

    def test_atomic_write_replaces(self, tmp_path):
        p = tmp_path / "sub" / "f.txt"
        atomic_write(p, "one")
        atomic_write(p, "two")
        assert p.read_text() == "two"
        assert os.listdir(p.parent) == ["f.txt"]

    def test_atomic_write_failure_keeps_original(self, tmp_path):
        p = tmp_path / "f.txt"
        atomic_write(p, "keep")
        with pytest.raises(TypeError):
            atomic_write(p, 123)
        assert p.read_text() == "keep" and os.listdir(tmp_path) == ["f.txt"]


class TestEntryPoints:
    def test_module_help(self):
        res = subprocess.run([sys.executable, "-m", "resonant_nls", "--help"], capture_output=True,
                             text=True, check=False)
        assert res.returncode == 0
        for cmd in ("solve", "sweep", "trace", "verify"):
            assert cmd in res.stdout

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as err:
            cli.main([])
        assert err.value.code == 2
