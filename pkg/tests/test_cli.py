import json
from pathlib import Path

import numpy as np
import pytest

from nanotrace import __version__
from nanotrace.cli import main

POINTS = {"points": [
    {"name": "P1", "measured": {"mean": 15.91, "sd": 0.13}, "certified": {"mean": 15.60, "sd": 0.50}},
    {"name": "P2", "measured": {"mean": 42.15, "sd": 0.01}, "certified": {"mean": 42.30, "sd": 0.60}},
    {"name": "P3", "measured": {"mean": 99.06, "sd": 0.43}, "certified": {"mean": 99.00, "sd": 0.60}},
    {"name": "P4", "measured": {"mean": 177.04, "sd": 0.70}, "certified": {"mean": 177.40, "sd": 0.65}},
]}

TRUTH = {"intercept": 23.4, "components_nm2": {"u2_day": 0.16, "u2_pos": 0.88, "u2_im": 0.0, "u2_res": 7.61},
         "dims": {"I": 4, "J": 3, "K": 2, "n_ijk": 6},
         "factors": {"probe": {"A": 2.0, "B": -2.0}, "operator": {"x": 0.0, "y": 0.0}},
         "assignment": "per_observation"}

MODEL = {"fixed": ["probe", "operator"], "interactions": [["probe", "operator"]]}


def numeric_artifacts(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "run.log"}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "points.json").write_text(json.dumps(POINTS))
    (root / "truth.json").write_text(json.dumps(TRUTH))
    (root / "model.cfg").write_text(json.dumps(MODEL))
    assert main(["simulate", "--truth", str(root / "truth.json"), "--seed", "3", "--out", str(root / "sim")]) == 0
    assert main(["calibrate", "--config", str(root / "points.json"), "--N", "20000", "--seed", "1",
                 "--out", str(root / "cal")]) == 0
    assert main(["fit", "--data", str(root / "sim" / "dataset.csv"), "--model", str(root / "model.cfg"),
                 "--seed", "42", "--warmup", "300", "--draws", "500", "--out", str(root / "fit")]) == 0
    return root


def test_fit_contract(work):
    out = work / "fit"
    for name in ("fit.json", "draws.csv", "diagnostics.json", "significance.json", "prior_next.json", "run.log"):
        assert (out / name).exists(), name
    fit = json.loads((out / "fit.json").read_text())
    assert fit["provenance"]["seed"] == 42
    assert fit["provenance"]["software"] == f"nanotrace {__version__}"
    sig = json.loads((out / "significance.json").read_text())
    terms = {t["term"]: t for t in sig["tests"]}
    assert terms["probe"]["keep"]
    assert "probe" in fit["model_reduced"]["fixed"]
    assert json.loads((out / "diagnostics.json").read_text())["passed"]


def test_fit_rerun_byte_identical(work):
    out = work / "fit2"
    assert main(["fit", "--data", str(work / "sim" / "dataset.csv"), "--model", str(work / "model.cfg"),
                 "--seed", "42", "--warmup", "300", "--draws", "500", "--out", str(out)]) == 0
    assert numeric_artifacts(out) == numeric_artifacts(work / "fit")


def test_fit_prior_chaining(work):
    out = work / "fit_chain"
    code = main(["fit", "--data", str(work / "sim" / "dataset.csv"), "--model", str(work / "model.cfg"),
                 "--prior-from", str(work / "fit"), "--seed", "1", "--warmup", "300", "--draws", "500",
                 "--out", str(out)])
    assert code == 0
    prior = json.loads((out / "fit.json").read_text())["prior"]
    chained = json.loads((work / "fit" / "prior_next.json").read_text())
    assert prior == chained
    assert prior["intercept"]["sd"] < 2.0


def test_diagnostics_failure_exit_3(work):
    out = work / "fit_short"
    code = main(["fit", "--data", str(work / "sim" / "dataset.csv"), "--seed", "1",
                 "--warmup", "5", "--draws", "20", "--out", str(out)])
    assert code == 3
    assert (out / "draws.csv").exists() and (out / "fit.json").exists()
    assert not json.loads((out / "diagnostics.json").read_text())["passed"]


def test_data_error_exit_2(work, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("value,day,position,replicate\n1,1,1,1\n")
    assert main(["fit", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    three = {"points": POINTS["points"][:3]}
    (tmp_path / "p3.json").write_text(json.dumps(three))
    assert main(["calibrate", "--config", str(tmp_path / "p3.json"), "--out", str(tmp_path / "c")]) == 2


def test_usage_errors_exit_64(work, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["calibrate", "--config", str(work / "points.json"), "--N", "0", "--out", str(tmp_path)])
    assert exc.value.code == 64
    with pytest.raises(SystemExit) as exc:
        main(["calibrate", "--N", "abc", "--out", str(tmp_path)])
    assert exc.value.code == 64
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--dims", "0", "2", "2", "2", "--out", str(tmp_path)])
    assert exc.value.code == 64
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 64
    assert main(["propagate", "--curve", str(work / "cal"), "--out", str(tmp_path / "p")]) == 64


def test_calibrate_outputs(work):
    s = json.loads((work / "cal" / "summary.json").read_text())
    assert abs(s["beta"]["mean"] - 1.0025) < 0.01
    meta = json.loads((work / "cal" / "curve.json").read_text())
    assert meta["N"] == 20000 and meta["provenance"]["seed"] == 1


def test_calibrate_command_line_wins(work, tmp_path):
    cfg = dict(POINTS, N=10000, seed=5)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["calibrate", "--config", str(tmp_path / "c.json"), "--seed", "6", "--out", str(tmp_path / "o")]) == 0
    meta = json.loads((tmp_path / "o" / "curve.json").read_text())
    assert meta["N"] == 10000 and meta["seed"] == 6


def test_propagate_outputs_and_determinism(work, tmp_path, capsys):
    args = ["propagate", "--curve", str(work / "cal"), "--mean", "23.40", "--sd", "1.19", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert numeric_artifacts(tmp_path / "a") == numeric_artifacts(tmp_path / "b")
    for name in ("certified_samples.csv", "summary.json", "histogram.csv", "histogram.svg"):
        assert (tmp_path / "a" / name).exists()
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert abs(s["certified"]["mean"] - 23.25) < 0.10 and abs(s["certified"]["sd"] - 1.44) < 0.10
    assert s["warnings"] == []
    counts = np.loadtxt(tmp_path / "a" / "histogram.csv", delimiter=",", skiprows=1)[:, 2]
    assert counts.sum() == s["certified"]["n"]


def test_propagate_range_warning(work, tmp_path, capsys):
    assert main(["propagate", "--curve", str(work / "cal"), "--mean", "5", "--sd", "1",
                 "--out", str(tmp_path)]) == 0
    assert "extrapolation" in capsys.readouterr().err
    assert json.loads((tmp_path / "summary.json").read_text())["warnings"]


def test_propagate_single_sample_file(work, tmp_path):
    (tmp_path / "one.csv").write_text("value\n23.4\n")
    assert main(["propagate", "--curve", str(work / "cal"), "--samples", str(tmp_path / "one.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    s = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert 0.5 < s["certified"]["sd"] < 1.2


def test_simulate_zero_variance_and_reproducible(tmp_path):
    args = ["simulate", "--dims", "2", "2", "2", "3", "--components", "0", "0", "0", "0",
            "--intercept", "30", "--seed", "9"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    values = np.loadtxt(tmp_path / "a" / "dataset.csv", delimiter=",", skiprows=1)[:, 0]
    assert np.all(values == 30.0) and values.size == 24
    args[7:11] = ["0.2", "0.3", "0.1", "1"]
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert main(args + ["--out", str(tmp_path / "c")]) == 0
    assert numeric_artifacts(tmp_path / "b") == numeric_artifacts(tmp_path / "c")


def test_report(work, tmp_path):
    args = ["report", "--fit", str(work / "fit"), "--curve", str(work / "cal"), "--seed", "3", "--size", "20000"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert numeric_artifacts(tmp_path / "a") == numeric_artifacts(tmp_path / "b")
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    s = rep["summaries"]
    assert rep["combinations"] == 2
    assert s["h_m"]["sd"] > s["mu_m"]["sd"]
    assert s["h_c"]["sd"] > s["mu_c"]["sd"]


def test_config_hash_ignores_out(work, tmp_path):
    args = ["simulate", "--dims", "2", "2", "2", "2", "--seed", "1"]
    main(args + ["--out", str(tmp_path / "x")])
    main(args + ["--out", str(tmp_path / "y")])
    hx = json.loads((tmp_path / "x" / "truth.json").read_text())["provenance"]["config_sha256"]
    hy = json.loads((tmp_path / "y" / "truth.json").read_text())["provenance"]["config_sha256"]
    assert hx == hy
