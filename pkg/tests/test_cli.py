import csv
import json

import pytest

from cvahedge import ConfigError
from cvahedge.cli import Scenario, bundled_scenario, dump_scenario, load_scenario, main, run

SMALL_EST = {"inner_paths": 200, "dt": 0.1, "table_dt": 0.25, "table_nodes": 5, "table_paths": 50, "seed": 3}


def small_scenario(scenario, tmp_path, mode, weight=1.0, n_paths=200):
    raw = scenario.to_dict()
    raw["sim"].update(n_paths=n_paths, dt=0.1)
    raw["estimator"] = dict(SMALL_EST)
    raw["portfolio"]["claims"][0]["weight"] = weight
    raw["output"] = {"mode": mode, "dir": str(tmp_path / mode)}
    return Scenario.from_dict(raw)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def read_summary(path):
    return dict(line.strip().split("=", 1) for line in open(path))


class TestScenario:
    def test_bundled_loads(self, scenario):
        assert scenario.model.n_names == 2 and scenario.maturity == 1.0 and scenario.mode == "verify"

    @pytest.mark.parametrize("suffix", [".toml", ".json"])
    def test_round_trip(self, scenario, tmp_path, suffix):
        path = tmp_path / f"copy{suffix}"
        dump_scenario(scenario, path)
        assert load_scenario(path) == scenario

    def test_replace_overrides(self, scenario, tmp_path):
        sc = scenario.replace(seed=5, threads=2, out_dir=tmp_path, mode="simulate")
        assert sc.sim.seed == 5 and sc.estimator.seed == 5 and sc.sim.threads == 2 and sc.mode == "simulate"

    def test_toml_syntax_error_names_file(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[model\nkappa = 1\n")
        with pytest.raises(ConfigError, match="bad.toml"):
            load_scenario(bad)

    def test_json_error_has_position(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"model": ]}')
        with pytest.raises(ConfigError, match="line 1 column"):
            load_scenario(bad)

    @pytest.mark.parametrize("edit,field", [
        (lambda r: r["sim"].update(n_paths=0), "sim"),
        (lambda r: r["model"].update(chi=[0.2]), "model"),
        (lambda r: r["estimator"].update(bogus=1), "estimator"),
        (lambda r: r["portfolio"]["claims"][0].update(name=1), "portfolio.claims"),
        (lambda r: r["portfolio"]["claims"][0].update(kind="swap"), "portfolio.claims"),
        (lambda r: r["output"].update(mode="plot"), "output.mode"),
        (lambda r: r.update(extra={}), "unknown section"),
    ])
    def test_invalid_fields(self, scenario, edit, field):
        raw = scenario.to_dict()
        edit(raw)
        with pytest.raises(ConfigError, match=field):
            Scenario.from_dict(raw)


class TestMain:
    def test_config_error_exit_code(self, scenario, tmp_path, capsys):
        raw = scenario.to_dict()
        raw["sim"]["n_paths"] = 0
        path = tmp_path / "zero.json"
        path.write_text(json.dumps(raw))
        assert main(["--scenario", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["--scenario", str(tmp_path / "nope.toml")]) == 2

    def test_environment_overrides(self, scenario, tmp_path, monkeypatch):
        path = tmp_path / "small.toml"
        dump_scenario(small_scenario(scenario, tmp_path, "verify"), path)
        out = tmp_path / "env"
        monkeypatch.setenv("CVAHEDGE_SCENARIO", str(path))
        monkeypatch.setenv("CVAHEDGE_MODE", "simulate")
        monkeypatch.setenv("CVAHEDGE_SEED", "17")
        monkeypatch.setenv("CVAHEDGE_OUT", str(out))
        assert main([]) == 0
        assert read_summary(out / "summary.txt")["seed"] == "17"

    def test_flags_beat_environment(self, scenario, tmp_path, monkeypatch):
        path = tmp_path / "small.toml"
        dump_scenario(small_scenario(scenario, tmp_path, "simulate"), path)
        monkeypatch.setenv("CVAHEDGE_SEED", "17")
        assert main(["--scenario", str(path), "--seed", "4", "--out", str(tmp_path / "f")]) == 0
        assert read_summary(tmp_path / "f" / "summary.txt")["seed"] == "4"

    def test_bad_env_value(self, monkeypatch):
        monkeypatch.setenv("CVAHEDGE_SEED", "seven")
        assert main([]) == 2


class TestModes:
    def test_simulate_outputs(self, scenario, tmp_path):
        sc = small_scenario(scenario, tmp_path, "simulate")
        assert run(sc) == 0
        rows = read_csv(tmp_path / "simulate" / "defaults.csv")
        assert rows[0] == ["path", "tau_0", "tau_1", "M_0", "M_1"] and len(rows) == 201
        assert read_summary(tmp_path / "simulate" / "summary.txt")["status"] == "ok"

    def test_simulate_thread_invariant(self, scenario, tmp_path):
        outs = []
        for threads in (1, 3):
            sc = small_scenario(scenario, tmp_path, "simulate", n_paths=9000).replace(
                threads=threads, out_dir=tmp_path / f"t{threads}")
            assert run(sc) == 0
            outs.append([(tmp_path / f"t{threads}" / f).read_bytes() for f in ("defaults.csv", "summary.txt")])
        assert outs[0] == outs[1]

    def test_price_outputs(self, scenario, tmp_path):
        assert run(small_scenario(scenario, tmp_path, "price")) == 0
        rows = read_csv(tmp_path / "price" / "exposure.csv")
        assert rows[0] == ["time", "price_0", "exposure", "positive_part"]
        assert float(rows[-1][2]) == 0.0

    def test_cva_outputs(self, scenario, tmp_path):
        assert run(small_scenario(scenario, tmp_path, "cva")) == 0
        rows = read_csv(tmp_path / "cva" / "cva.csv")
        assert rows[0] == ["time", "cva", "std_error"] and float(rows[-1][1]) == 0.0
        summary = read_summary(tmp_path / "cva" / "summary.txt")
        assert float(summary["cva_function"]) > 0 and float(summary["cva_stream"]) > 0

    def test_hedge_zero_portfolio(self, scenario, tmp_path):
        assert run(small_scenario(scenario, tmp_path, "hedge", weight=0.0)) == 0
        rows = read_csv(tmp_path / "hedge" / "hedge.csv")
        assert rows[0][:3] == ["time", "theta", "eta"]
        for row in rows[1:]:
            assert all(float(v) == 0.0 for v in row[1:4] + row[8:])

    def test_hedge_small_has_no_diagnostics(self, scenario, tmp_path):
        assert run(small_scenario(scenario, tmp_path, "hedge")) == 0
        assert not (tmp_path / "hedge" / "buckets.csv").exists()

    def test_verify_needs_single_claim(self, scenario, tmp_path):
        raw = small_scenario(scenario, tmp_path, "verify").to_dict()
        raw["portfolio"]["claims"] = []
        with pytest.raises(ConfigError):
            run(Scenario.from_dict(raw))

    @pytest.mark.slow
    def test_verify_bundled_passes(self, tmp_path):
        assert main(["--scenario", str(bundled_scenario()), "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "verify.txt").read_text().splitlines()
        assert lines and all(" PASS " in line for line in lines)
        assert read_summary(tmp_path / "summary.txt")["status"] == "ok"
