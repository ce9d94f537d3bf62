import csv
import hashlib
import json
from pathlib import Path

import pytest

from cacc_mbc import cli
from cacc_mbc.sim import ScenarioConfig

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

SHORT = """
[scenario]
n_vehicles = 3
duration_s = 1.0
r = 2

[channel]
per = {per}
seed = 4
"""


def write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestLoadConfig:
    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIG_DIR.glob("*.toml")))
    def test_shipped_configs_parse(self, name):
        cfg, sweep = cli.load_config(CONFIG_DIR / name)
        assert cfg.n_vehicles == 10
        assert sweep.trials >= 1

    def test_channel_section_maps_to_scenario(self, tmp_path):
        cfg, _ = cli.load_config(write(tmp_path, SHORT.format(per=0.25)))
        assert (cfg.per, cfg.trial_seed, cfg.r) == (0.25, 4, 2)

    def test_nested_values(self, tmp_path):
        text = SHORT.format(per=0.0) + "\n[mpc]\nQ = [[2, 0, 0], [0, 1, 0], [0, 0, 0.5]]\nq = 4.0\n\n[vehicle]\ntau = 0.8\n"
        cfg, _ = cli.load_config(write(tmp_path, text))
        assert cfg.mpc.Q == ((2, 0, 0), (0, 1, 0), (0, 0, 0.5))
        assert cfg.mpc.q == 4.0
        assert cfg.vehicle.tau == 0.8

    @pytest.mark.parametrize(
        "text, line, fragment",
        [
            ("[scenario]\nn_vehicles = 3\nbogus = 1\n", 3, "unknown key 'bogus'"),
            ("[scenario]\nn_vehicles = 3\n\n[extras]\nx = 1\n", 4, "unknown section"),
            ("[scenario]\nn_vehicles = = 3\n", 2, "malformed TOML"),
            ("[scenario]\nn_vehicles = 1\n", 1, "at least two vehicles"),
            ("[scenario]\nper = 0.1\n[channel]\nper = 0.2\n", 4, "both"),
            ("[sweep]\ntrials = 0\n", 1, "trials"),
        ],
    )
    def test_errors_carry_location(self, tmp_path, text, line, fragment):
        path = write(tmp_path, text)
        with pytest.raises(cli.ConfigFileError) as info:
            cli.load_config(path)
        assert info.value.line == line
        assert fragment in str(info.value)
        assert str(path) in str(info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(cli.ConfigFileError):
            cli.load_config(tmp_path / "absent.toml")


class TestRun:
    def test_outputs_and_manifest(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(["run", str(write(tmp_path, SHORT.format(per=0.3))), "--out", str(out)])
        assert code == cli.EXIT_OK
        rows = read_csv(out / "trace.csv")
        assert tuple(rows[0]) == cli.TRACE_COLUMNS
        assert len(rows) == 1 + 11 * 3
        manifest = json.loads((out / "manifest.json").read_text())
        for name, digest in manifest["artifacts"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
        assert set(manifest["artifacts"]) == {"trace.csv", "metrics.json"}
        cfg = cli.config_from_manifest(manifest)
        assert cfg == cli.load_config(tmp_path / "cfg.toml")[0]

    def test_full_precision_fields(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["run", str(write(tmp_path, SHORT.format(per=0.0))), "--out", str(out)])
        row = read_csv(out / "trace.csv")[5]
        x = float(row[3])
        assert repr(x) == repr(float("%.17g" % x))
        assert row[0].isdigit() and row[9] in ("0", "1")

    def test_seed_override_changes_channel(self, tmp_path):
        cfg_path = write(tmp_path, SHORT.format(per=0.5))
        cli.main(["run", str(cfg_path), "--out", str(tmp_path / "a"), "--seed", "1"])
        cli.main(["run", str(cfg_path), "--out", str(tmp_path / "b"), "--seed", "2"])
        man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert man_a["config"]["scenario"]["trial_seed"] == 1
        received_a = [r[10] for r in read_csv(tmp_path / "a" / "trace.csv")[1:]]
        received_b = [r[10] for r in read_csv(tmp_path / "b" / "trace.csv")[1:]]
        assert received_a != received_b

    def test_config_error_leaves_no_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.main(["run", str(write(tmp_path, "[scenario]\nper = 2.0\n")), "--out", str(out)])
        assert code == cli.EXIT_CONFIG
        assert not out.exists()
        assert "cfg.toml" in capsys.readouterr().err

    def test_total_loss_completes(self, tmp_path):
        code = cli.main(["run", str(write(tmp_path, SHORT.format(per=1.0))), "--out", str(tmp_path / "o")])
        assert code in (cli.EXIT_OK, cli.EXIT_COLLISION)
        assert (tmp_path / "o" / "trace.csv").exists()

    def test_collision_exit_code(self, tmp_path):
        # vehicles start overlapping when the standstill distance is negative
        text = SHORT.format(per=0.0) + "\n[vehicle]\nd_s = -17.0\n"
        code = cli.main(["run", str(write(tmp_path, text)), "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_COLLISION
        assert json.loads((tmp_path / "o" / "metrics.json").read_text())["collision"] is True


class TestSweep:
    SWEEP = SHORT.format(per=0.0) + "\n[sweep]\npers = [0.0, 0.5]\nrs = [1]\ntrials = 2\n"

    def test_rows_and_resume(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write(tmp_path, self.SWEEP)
        assert cli.main(["sweep", str(cfg_path), "--out", str(out)]) == cli.EXIT_OK
        rows = read_csv(out / "sweep.csv")
        assert tuple(rows[0]) == cli.SWEEP_COLUMNS
        assert [(r[0], r[1], r[2]) for r in rows[1:]] == [("0", "1", "2"), ("0.5", "1", "2")]
        cells = sorted((out / "cells").glob("*.json"))
        assert len(cells) == 2
        first = (out / "sweep.csv").read_bytes()
        stamp = [c.stat().st_mtime_ns for c in cells]
        assert cli.main(["sweep", str(cfg_path), "--out", str(out), "--resume"]) == cli.EXIT_OK
        assert (out / "sweep.csv").read_bytes() == first
        assert [c.stat().st_mtime_ns for c in cells] == stamp

    def test_single_cell(self, tmp_path):
        text = SHORT.format(per=0.0) + "\n[sweep]\npers = [0.2]\nrs = [2]\ntrials = 1\n"
        out = tmp_path / "out"
        assert cli.main(["sweep", str(write(tmp_path, text)), "--out", str(out), "--jobs", "1"]) == 0
        assert len(read_csv(out / "sweep.csv")) == 2


class TestPredStats:
    def test_fourteen_rows(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(["pred-stats", str(write(tmp_path, SHORT.format(per=0.5))), "--out", str(out)])
        assert code == cli.EXIT_OK
        rows = read_csv(out / "pred_error.csv")
        assert tuple(rows[0]) == cli.PRED_COLUMNS
        assert len(rows) == 15
        assert {r[1] for r in rows[1:]} == {"gp", "mpc"}
        assert [int(r[0]) for r in rows[1::2]] == list(range(1, 8))

    def test_missing_samples(self, tmp_path, capsys):
        # a run too short for any seven-step-ahead target to exist
        text = "[scenario]\nn_vehicles = 2\nduration_s = 0.3\n"
        out = tmp_path / "out"
        code = cli.main(["pred-stats", str(write(tmp_path, text)), "--out", str(out)])
        assert code == cli.EXIT_CONFIG
        assert "no prediction samples" in capsys.readouterr().err
        assert not (out / "pred_error.csv").exists()


class TestParser:
    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            cli.main([])

    def test_rejects_zero_jobs(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["sweep", str(write(tmp_path, SHORT.format(per=0.0))), "--jobs", "0"])

    def test_manifest_round_trip_of_defaults(self):
        cfg = ScenarioConfig()
        assert cli.ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
