import json
import subprocess
import sys

import numpy as np
import pytest

from diffbev.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from diffbev.scene import load_json


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert run(["gen", "--seed", "3", "--frames", "100", "--out", str(d)]) == EXIT_OK
    return d


def test_gen_outputs(gen_dir):
    for name in ("scene.json", "obs.json", "truth.json", "globals.json", "manifest.json"):
        assert (gen_dir / name).exists()
    man = load_json(gen_dir / "manifest.json")
    assert man["command"] == "gen" and man["seed"] == 3
    assert {"diffbev", "numpy", "scipy", "numba", "python"} <= set(man["versions"])


def test_simulate_then_identify_initial(gen_dir, tmp_path):
    assert run(["simulate", "--scene", str(gen_dir / "truth.json"), "--frames", "100",
                "--out", str(tmp_path / "sim")]) == EXIT_OK
    assert run(["identify", "--obs", str(tmp_path / "sim" / "trajectory.json"), "--scene",
                str(gen_dir / "scene.json"), "--globals", str(gen_dir / "globals.json"),
                "--stages", "initial", "--out", str(tmp_path / "fit")]) == EXIT_OK
    rep = load_json(tmp_path / "fit" / "fit_report.json")
    truth = load_json(gen_dir / "truth.json")["scene"]
    for fb, tb in zip(rep["scene"]["bodies"], truth["bodies"]):
        assert np.max(np.abs(np.subtract(fb["velocity"], tb["velocity"]))) < 1e-3


def test_query_count(gen_dir, tmp_path, capsys):
    prog = tmp_path / "prog.json"
    prog.write_text(json.dumps([{"op": "Objects", "args": []}, {"op": "Count", "args": ["PIPE"]}]))
    rc = run(["query", "--scene", str(gen_dir / "truth.json"), "--program", str(prog), "--out", str(tmp_path / "q")])
    assert rc == EXIT_OK
    n = len(load_json(gen_dir / "truth.json")["scene"]["bodies"])
    assert capsys.readouterr().out.strip() == json.dumps({"type": "int", "value": n}, separators=(",", ":"))


def test_gradcheck_report(gen_dir, tmp_path, capsys):
    assert run(["gradcheck", "--scene", str(gen_dir / "truth.json"), "--frames", "40",
                "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "gradcheck.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["param", "analytic", "finite_difference", "relative_error"]
    assert load_json(tmp_path / "gradcheck.json")["relative_error"] < 1e-2


def test_predict_against_truth(gen_dir, tmp_path):
    assert run(["predict", "--scene", str(gen_dir / "truth.json"), "--truth", str(gen_dir / "truth.json"),
                "--horizon", "20", "--out", str(tmp_path)]) == EXIT_OK
    res = load_json(tmp_path / "prediction.json")
    assert res["error"] == {"s1": 0.0, "s2": 0.0}


def test_plot(gen_dir, tmp_path):
    assert run(["plot", "--obs", str(gen_dir / "obs.json"), "--scene", str(gen_dir / "truth.json"),
                "--out", str(tmp_path)]) == EXIT_OK
    svg = (tmp_path / "plot.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<circle") > 10


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "frames": 30}))
    assert run(["gen", "--config", str(cfg), "--frames", "40", "--out", str(tmp_path / "o")]) == EXIT_OK
    man = load_json(tmp_path / "o" / "manifest.json")
    assert man["config"]["seed"] == 5 and man["config"]["frames"] == 40
    assert man["config"]["noise_sigma"] == 0.0


def test_unknown_flag_is_usage_error(capsys):
    assert run(["gen", "--bogus", "--out", "x"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_unknown_command_and_missing_args():
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run([]) == EXIT_USAGE
    assert run(["simulate", "--out", "x"]) == EXIT_USAGE


def test_missing_file_is_data_error(tmp_path):
    assert run(["simulate", "--scene", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_DATA


def test_bad_program_is_data_error(gen_dir, tmp_path):
    prog = tmp_path / "prog.json"
    prog.write_text(json.dumps(["Objects", ["Filter_static_concept", "mauve"], "Count"]))
    assert run(["query", "--scene", str(gen_dir / "truth.json"), "--program", str(prog),
                "--out", str(tmp_path)]) == EXIT_DATA


def test_console_script_usage_exit():
    r = subprocess.run([sys.executable, "-m", "diffbev.cli", "--no-such-flag"], capture_output=True, text=True)
    assert r.returncode == EXIT_USAGE


PRIMARY = {"gen": ("scene.json", "obs.json", "truth.json", "globals.json"),
           "simulate": ("trajectory.json", "events.json"), "identify": ("fit_report.json",),
           "query": ("answer.json",)}


def _pipeline(root):
    run(["gen", "--seed", "9", "--noise-sigma", "0.01", "--out", str(root / "gen")])
    run(["simulate", "--scene", str(root / "gen" / "truth.json"), "--out", str(root / "simulate")])
    run(["identify", "--obs", str(root / "gen" / "obs.json"), "--scene", str(root / "gen" / "scene.json"),
         "--globals", str(root / "gen" / "globals.json"), "--schedule", "standard", "--out", str(root / "identify")])
    prog = root / "prog.json"
    prog.write_text(json.dumps(["Events", "Objects", "Filter_collision", "Count"]))
    run(["query", "--scene", str(root / "identify" / "fit_report.json"), "--program", str(prog),
         "--out", str(root / "query")])


def test_byte_identical_reruns(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a)
    _pipeline(b)
    for cmd, names in PRIMARY.items():
        for n in names:
            assert (a / cmd / n).read_bytes() == (b / cmd / n).read_bytes(), (cmd, n)
