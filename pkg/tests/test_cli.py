import json
import os
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from multirate import cli, config
from multirate.sim import CSV_HEADER


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def short_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    a, b = root / "a", root / "b"
    assert run_cli("run", "constrained_10hz", "--duration", 0.5, "--seedless", "--out", a) == 0
    assert run_cli("run", "constrained_10hz", "--duration", 0.5, "--seedless", "--out", b) == 0
    return a / "constrained_10hz", b / "constrained_10hz"


class TestConfig:
    @pytest.mark.parametrize("name", config.BUNDLED)
    def test_round_trip(self, name):
        cfg = config.load(name)
        assert config.loads(config.dumps(cfg)) == cfg

    def test_schedule(self):
        cfg = config.load("constrained_10hz")
        s = cfg.schedule()
        assert s.steps_per_period == 100 and s.n_periods == 100

    def test_field_paths(self):
        d = config.to_dict(config.load("constrained_10hz"))
        d["sets"]["Qe"][3][3] = -1.0
        with pytest.raises(config.ConfigError) as info:
            config.from_dict(d)
        assert info.value.path == "sets.Qe"
        d = config.to_dict(config.load("constrained_10hz"))
        d["cost"]["N"] = 0
        with pytest.raises(config.ConfigError) as info:
            config.from_dict(d)
        assert info.value.path == "cost.N"
        d = config.to_dict(config.load("constrained_10hz"))
        d["rates"]["planner_hz"] = 7.0
        with pytest.raises(config.ConfigError) as info:
            config.from_dict(d)
        assert info.value.path == "rates"

    def test_baseline_horizons(self):
        assert config.baseline_horizon(100.0) == 500
        assert config.baseline_horizon(20.0) == 100
        assert config.baseline_horizon(10.0) == 50
        with pytest.raises(config.ConfigError):
            config.baseline_horizon(0.3)

    def test_baseline_build(self):
        sc = config.build_baseline(config.load("constrained_10hz"), 20.0)
        assert sc.cfg.N == 100 and sc.cfg.planner_hz == 20.0
        assert sc.low_level is None
        assert len(sc.mpc.tightened_state) == 101


class TestCommands:
    def test_outputs(self, short_runs):
        a, _ = short_runs
        for name in ("trace.csv", "config.toml", "report.txt", "meta.json"):
            assert (a / name).is_file()
        with open(a / "trace.csv") as fh:
            assert tuple(fh.readline().strip().split(",")) == CSV_HEADER
        meta = json.loads((a / "meta.json").read_text())
        assert meta["monitors"]["passed"] is True
        assert "created" not in meta
        assert config.load(str(a / "config.toml")).duration == 0.5
        assert (a / "report.txt").read_text().startswith("scenario: constrained_10hz")

    def test_svg_parses(self, short_runs):
        a, _ = short_runs
        svgs = sorted(os.listdir(a / "plots"))
        assert svgs == ["inputs.svg", "states.svg", "theta.svg"]
        for name in svgs:
            root = ET.parse(a / "plots" / name).getroot()
            assert root.tag.endswith("svg")

    def test_seedless_byte_identical(self, short_runs):
        a, b = short_runs
        for name in ("trace.csv", "report.txt", "meta.json", "plots/theta.svg"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_compare_identical(self, short_runs, tmp_path, capsys):
        a, b = short_runs
        rows, traces = cli.compare_runs([str(a), str(b)])
        assert [r["max_diff"] for r in rows] == [0.0, 0.0]
        assert len(traces[0]) == len(traces[1]) == 501
        assert run_cli("compare", a, b, "--out", tmp_path, "--seedless") == 0
        out = tmp_path / "compare"
        assert (out / "comparison.txt").is_file()
        ET.parse(out / "plots" / "overlay.svg")

    def test_compare_schema_mismatch(self, short_runs, tmp_path):
        a, _ = short_runs
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "trace.csv").write_text("t,x\n0,1\n")
        with pytest.raises(cli.SchemaMismatch):
            cli.compare_runs([str(a), str(bad)])
        assert run_cli("compare", a, bad, "--out", tmp_path) == 1

    def test_malformed_config_exit(self, tmp_path, capsys):
        d = config.to_dict(config.load("constrained_10hz"))
        d["sets"]["Qe"] = [[1.0, 0.0], [0.0, 1.0]]
        import tomli_w
        path = tmp_path / "bad.toml"
        path.write_text(tomli_w.dumps(d))
        assert run_cli("run", path, "--out", tmp_path) == 1
        assert "sets.Qe" in capsys.readouterr().err

    def test_missing_file_exit(self, tmp_path, capsys):
        assert run_cli("run", tmp_path / "nope.toml", "--out", tmp_path) == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_dt(self, tmp_path):
        assert run_cli("run", "constrained_10hz", "--dt-low", 0.003, "--out", tmp_path) == 1

    def test_baseline_command(self, tmp_path):
        code = run_cli("baseline", "constrained_10hz", "--rate", 10, "--duration", 0.5,
                       "--seedless", "--out", tmp_path)
        assert code == 0
        out = tmp_path / "constrained_10hz_baseline_10hz"
        trace = np.genfromtxt(out / "trace.csv", delimiter=",", skip_header=1, usecols=range(14))
        assert np.all(trace[:, 9] == 0.0)
        assert "linear MPC only at 10 Hz" in (out / "report.txt").read_text()

    def test_env_out_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MULTIRATE_OUT", str(tmp_path))
        assert run_cli("run", "unconstrained_2hz", "--duration", 0.5, "--seedless") == 0
        assert (tmp_path / "unconstrained_2hz" / "trace.csv").is_file()

    def test_console_entry(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "multirate.cli", "--help"],
                             capture_output=True, text=True)
        assert res.returncode == 0 and "compare" in res.stdout
