import csv
import json
from importlib import resources
from pathlib import Path

import pytest

from rbsdelab import __version__
from rbsdelab.cli import bundled_configs, main, run

GOLDEN = Path(__file__).parent / "golden"


def bundled(name):
    return json.loads((resources.files("rbsdelab") / "configs" / f"{name}.json").read_text())


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return path


def trivial(**changes):
    cfg = bundled("trivial_constant")
    cfg.update(changes)
    return cfg


def small_acceptance(checks):
    cfg = bundled("acceptance")
    cfg["chain"] = {"steps": 20, "bounds": [20.0, 300.0], "nodes": 60}
    cfg["checks"] = checks
    return cfg


def read_Y(run_dir):
    with open(run_dir / "solution.csv") as fh:
        return [float(r["Y"]) for r in csv.DictReader(fh)]


def test_bundled_configs_are_listed():
    assert {"acceptance", "dynkin_3step", "trivial_constant"} <= set(bundled_configs())


def test_trivial_config(tmp_path, capsys):
    assert main(["check", "--config", "trivial_constant", "--out", str(tmp_path)]) == 0
    assert set(read_Y(tmp_path)) == {5.0}
    out = capsys.readouterr().out
    assert "overall: PASS" in out and "norms (squared)" in out
    for name in ("solution.csv", "verdicts.json", "summary.txt", "manifest.json"):
        assert (tmp_path / name).is_file()


def test_dynkin_config_matches_golden(tmp_path):
    assert main(["solve", "--config", "dynkin_3step", "--out", str(tmp_path)]) == 0
    golden = json.loads((GOLDEN / "dynkin_3step.json").read_text())
    verdicts = json.loads((tmp_path / "verdicts.json").read_text())
    assert abs(verdicts["Y0"] - golden["Y0"]) <= 1e-12


def test_crossed_obstacles_are_a_config_error(tmp_path, capsys):
    cfg = trivial()
    cfg["problem"]["lower"] = {"type": "constant", "value": 6.0}
    path = write_config(tmp_path, cfg)
    assert main(["check", "--config", str(path), "--out", str(tmp_path / "run")]) == 2
    err = capsys.readouterr().err
    line = next(i for i, text in enumerate(path.read_text().splitlines(), 1) if '"lower"' in text)
    assert f"{path}:{line}: error:" in err
    assert "(M.2.ii)" in err


def test_malformed_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "seed": 1,\n  oops\n}\n')
    assert main(["check", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert f"{path}:3: error:" in capsys.readouterr().err


@pytest.mark.parametrize("edit, message", [
    (lambda c: c.pop("seed"), "'seed' is required"),
    (lambda c: c.update(seed=-3), "unsigned 64-bit"),
    (lambda c: c["checks"].append({"name": "telepathy"}), "unknown checker 'telepathy'"),
    (lambda c: c.update(colour="blue"), "unknown top-level keys"),
    (lambda c: c["chain"].update(nodes=1), "two spatial nodes"),
])
def test_config_errors_exit_2(tmp_path, capsys, edit, message):
    cfg = trivial()
    edit(cfg)
    path = write_config(tmp_path, cfg)
    assert main(["check", "--config", str(path), "--out", str(tmp_path / "run")]) == 2
    assert message in capsys.readouterr().err


def test_missing_output_dir(tmp_path, capsys):
    cfg = trivial()
    del cfg["output"]
    path = write_config(tmp_path, cfg)
    assert main(["solve", "--config", str(path)]) == 2
    assert "no output directory" in capsys.readouterr().err


def test_unknown_config_and_bad_arguments(tmp_path, capsys):
    assert main(["check", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert main(["frobnicate"]) == 2
    capsys.readouterr()
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_failing_check_exits_1(tmp_path, capsys):
    path = write_config(tmp_path, trivial(checks=[{"name": "paste_tau", "tol": -1.0}]))
    assert main(["check", "--config", str(path), "--out", str(tmp_path / "run")]) == 1
    assert "overall: FAIL" in capsys.readouterr().out
    verdicts = json.loads((tmp_path / "run" / "verdicts.json").read_text())
    assert verdicts["status"] == "FAIL"


def test_outputs_are_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("trivial_constant", out=a) == 0
    assert run("trivial_constant", out=b, threads=2) == 0
    for name in ("solution.csv", "verdicts.json", "summary.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma["config_sha256"] == mb["config_sha256"] and ma["files"] == mb["files"]
    assert run("trivial_constant", out=tmp_path / "c", seed=2) == 0
    mc = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert mc["seed"] == 2


class TestReport:
    @pytest.fixture()
    def run_dir(self, tmp_path, capsys):
        assert main(["check", "--config", "trivial_constant", "--out", str(tmp_path)]) == 0
        capsys.readouterr()
        return tmp_path

    def test_clean_run(self, run_dir, capsys):
        assert main(["report", str(run_dir)]) == 0
        out = capsys.readouterr().out
        assert "invariants" in out and "overall: PASS" in out and "INTEGRITY" not in out

    def test_tampered_file(self, run_dir, capsys):
        with open(run_dir / "solution.csv", "a") as fh:
            fh.write("0,0,0,0,0,6,0,0,0,0\n")
        assert main(["report", str(run_dir)]) == 1
        assert "checksum mismatch: solution.csv" in capsys.readouterr().out

    def test_missing_manifest(self, run_dir, capsys):
        (run_dir / "manifest.json").unlink()
        assert main(["report", str(run_dir)]) == 2
        assert "manifest.json missing" in capsys.readouterr().err

    def test_mixed_version(self, run_dir, capsys):
        path = run_dir / "manifest.json"
        manifest = json.loads(path.read_text())
        manifest["versions"]["rbsdelab"] = "0.0.0"
        path.write_text(json.dumps(manifest))
        assert main(["report", str(run_dir)]) == 2
        assert "different version" in capsys.readouterr().err


def test_simulate_with_path_dump(tmp_path, capsys):
    cfg = trivial(simulate={"n_paths": 2000, "steps": 10, "dump_paths": True})
    path = write_config(tmp_path, cfg)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "run")]) == 0
    lines = (tmp_path / "run" / "paths.csv").read_text().splitlines()
    assert lines[0] == "path,t,x_1,regime" and len(lines) == 1 + 2000 * 11
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert "paths.csv" in manifest["files"] and "solution.csv" not in manifest["files"]
    assert "compensator" in capsys.readouterr().out


def test_compare_subcommand(tmp_path, capsys):
    cfg = trivial(compare={"terminal_shift": 0.1, "upper_shift": 0.1})
    path = write_config(tmp_path, cfg)
    assert main(["compare", "--config", str(path), "--out", str(tmp_path / "run")]) == 0
    verdicts = json.loads((tmp_path / "run" / "verdicts.json").read_text())["verdicts"]
    comp = next(v for v in verdicts if v["name"] == "comparison")
    assert comp["status"] == "PASS" and comp["worst_margin"] >= 0


def test_compare_reports_violated_hypothesis(tmp_path, capsys):
    cfg = trivial(compare={"terminal_shift": 0.0, "lower_shift": -0.1})
    cfg["problem"]["lower"]["value"] = 4.9
    path = write_config(tmp_path, cfg)
    assert main(["compare", "--config", str(path), "--out", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "NOT-APPLICABLE" in out and "first violated hypothesis: L <= L'" in out


def test_apriori_table_is_rendered(tmp_path, capsys):
    path = write_config(tmp_path, small_acceptance([{"name": "apriori", "n": [1, 2, 4]}]))
    assert main(["check", "--config", str(path), "--out", str(tmp_path / "run")]) == 0
    summary = (tmp_path / "run" / "summary.txt").read_text()
    assert "diff to limit" in summary
    rows = [line.split() for line in summary.splitlines() if line.split()[:1] in (["1"], ["2"], ["4"])]
    assert [r[0] for r in rows] == ["1", "2", "4"]
    diffs = [float(r[3]) for r in rows]
    assert diffs[0] > diffs[1] > diffs[2]
