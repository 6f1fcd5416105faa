import csv
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest
import yaml

from jfsqlab import EstimationError, cli
from jfsqlab.cli import apply_override, as_float, as_int, load_config, main
from jfsqlab.output import validate_results

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
HEADER = "n,alpha,lambda,b,policy,profile,seed,metric,estimate,stderr,method"


def write(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def base(n=3, **system):
    doc = {"system": {"n": n, "lambda": 0.6, "buffer_b": 2, "profile": {"kind": "homogeneous"}},
           "policy": "jfsq", "run": {"horizon_events": "2e5", "seed": 7, "replications": 2}}
    doc["system"].update(system)
    return doc


def rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def metric(path, name):
    return next(r for r in rows(path) if r["metric"] == name)


def test_simulate_outputs(tmp_path):
    cfg = write(tmp_path, base())
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    text = (tmp_path / "o" / "results.csv").read_text()
    assert text.splitlines()[0] == HEADER
    doc = json.loads((tmp_path / "o" / "results.json").read_text())
    validate_results(doc)
    run = doc["runs"][0]
    assert run["method"] == "sim" and run["seed"] == 7
    assert {"p_wait", "p_block", "mean_wait", "mean_qbar"} <= set(run["metrics"])
    assert run["counts"]["admitted"] + run["counts"]["blocked"] == run["counts"]["arrivals"]


def test_simulate_is_bit_stable(tmp_path):
    cfg = write(tmp_path, base())
    for d in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    for f in ("results.csv", "results.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_config(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.yaml")]) == 2


@pytest.mark.parametrize("mutate", [
    lambda d: d["system"].update(colour="red"),
    lambda d: d.update(extra={}),
    lambda d: d["system"].update(alpha=0.3),          # both alpha and lambda
    lambda d: d["run"].update(horizon_events="lots"),
    lambda d: d.update(policy="fastest"),
])
def test_bad_configs_exit_2(tmp_path, mutate):
    doc = base()
    mutate(doc)
    assert main(["simulate", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 2


def test_light_load(tmp_path):
    doc = base(n=10)
    del doc["system"]["lambda"]
    doc["system"]["alpha"] = 0.99
    assert main(["simulate", "--config", write(tmp_path, doc), "--out", str(tmp_path / "a")]) == 0
    doc["system"]["alpha"] = 0.01  # lambda = 1 - 10^-0.01 ~ 0.023
    assert main(["simulate", "--config", write(tmp_path, doc), "--out", str(tmp_path / "b")]) == 0
    assert float(metric(tmp_path / "b" / "results.csv", "p_wait")["estimate"]) < 1e-3


def test_estimation_error_exit_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise EstimationError("no admitted jobs after warm-up")
    monkeypatch.setattr(cli, "replicate", boom)
    assert main(["simulate", "--config", write(tmp_path, base()), "--out", str(tmp_path)]) == 3


def test_exact_golden(tmp_path):
    assert main(["exact", "--config", str(CONFIGS / "golden_n1.yaml"), "--out", str(tmp_path)]) == 0
    out = tmp_path / "results.csv"
    assert out.read_text().splitlines()[0] == HEADER
    pw = metric(out, "p_wait")
    assert float(pw["estimate"]) == pytest.approx(3 / 7, abs=1e-12)
    assert pw["method"] == "exact" and float(pw["stderr"]) == 0
    assert float(metric(out, "mean_wait")["estimate"]) == pytest.approx(1 / 3, abs=1e-12)
    names = [r["metric"] for r in rows(out)]
    assert any(n.startswith("stein_identity[") for n in names)
    assert any(n.startswith("moment_inequality_rhs[") for n in names)
    assert all(float(r["estimate"]) <= 1e-8 for r in rows(out) if r["metric"].startswith("stein"))
    validate_results(json.loads((tmp_path / "results.json").read_text()))


def test_exact_scale_guard(tmp_path):
    doc = base(n=20, buffer_b=3)
    assert main(["exact", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 4


def test_exact_and_simulate_agree(tmp_path):
    doc = base(n=2)
    doc["system"]["profile"] = {"kind": "explicit", "params": {"rates": [2, 1]}}
    doc["run"]["horizon_events"] = "1e6"
    cfg = write(tmp_path, doc)
    assert main(["exact", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    for name in ("p_wait", "p_block", "mean_wait", "mean_qbar"):
        e = float(metric(tmp_path / "e" / "results.csv", name)["estimate"])
        s = metric(tmp_path / "s" / "results.csv", name)
        assert abs(float(s["estimate"]) - e) <= 3 * float(s["stderr"]), name


def sweep_doc(n_grid, **sweep):
    doc = {"system": {"buffer_b": 2, "alpha": 0.45, "profile": {"kind": "homogeneous"}},
           "policy": "jfsq", "run": {"horizon_events": "3e5", "seed": 2},
           "sweep": {"n_grid": n_grid, **sweep}}
    return doc


def test_sweep_fits_and_plot(tmp_path):
    doc = sweep_doc([20, 40, 80], alpha_grid=[0.45, 0.6])
    assert main(["sweep", "--config", write(tmp_path, doc), "--out", str(tmp_path), "--plot"]) == 0
    fits = json.loads((tmp_path / "fits.json").read_text())
    assert len(fits["fits"]) == 2
    for f in fits["fits"]:
        assert {"slope", "r_squared", "predicted_exponent", "points"} <= set(f)
    assert (tmp_path / "sweep.csv").read_text().splitlines()[0] == HEADER
    validate_results(json.loads((tmp_path / "sweep.json").read_text()))
    svg = ET.parse(tmp_path / "sweep.svg").getroot()
    lines = [e for e in svg.iter() if e.tag.endswith("polyline")]
    assert len(lines) == 2


def test_sweep_metric_flag(tmp_path):
    doc = sweep_doc([20, 40, 80])
    assert main(["sweep", "--config", write(tmp_path, doc), "--out", str(tmp_path),
                 "--metric", "mean_wait"]) == 0
    assert json.loads((tmp_path / "fits.json").read_text())["metric"] == "mean_wait"
    assert main(["sweep", "--config", write(tmp_path, doc), "--out", str(tmp_path),
                 "--metric", "nonsense"]) == 2


def test_sweep_empty_grid(tmp_path):
    assert main(["sweep", "--config", write(tmp_path, sweep_doc([])), "--out", str(tmp_path)]) == 2


def test_sweep_fit_error_keeps_outputs(tmp_path):
    doc = sweep_doc([20, 40, 80], alpha_grid=[0.01])  # near-zero load: p_wait = 0
    assert main(["sweep", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 5
    assert (tmp_path / "sweep.csv").exists() and (tmp_path / "fits.json").exists()
    assert "error" in json.loads((tmp_path / "fits.json").read_text())["fits"][0]


def test_drift_check_reference(tmp_path):
    cfg = str(CONFIGS / "reference_n3.yaml")
    assert main(["drift-check", "--config", cfg, "--lemma", "most_n1", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "drift_most_n1.json").read_text())
    assert rep["checked"] > 0 and rep["violations"] == 0
    assert main(["drift-check", "--config", cfg, "--lemma", "ssc_super", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "drift_ssc_super.json").read_text())["checked"] == 0
    assert main(["drift-check", "--config", cfg, "--lemma", "lemma9", "--out", str(tmp_path)]) == 2


def test_drift_check_scale_guard(tmp_path):
    doc = base(n=20, buffer_b=3)
    assert main(["drift-check", "--config", write(tmp_path, doc), "--lemma", "most_n1",
                 "--out", str(tmp_path)]) == 4


def test_overrides_and_numbers(tmp_path):
    doc = load_config(write(tmp_path, base()), ["system.n=5", "run.seed=18446744073709551615",
                                                 "system.alpha=0.4"])
    assert doc["system"]["n"] == 5 and "lambda" not in doc["system"]
    assert as_int(doc["run"]["seed"], "seed") == 2 ** 64 - 1
    assert as_int("1e7", "h") == 10_000_000
    assert as_float("2.5e-1", "x") == 0.25
    with pytest.raises(ValueError):
        as_int("1.5", "h")
    d = {"system": {}}
    apply_override(d, "system.profile.kind=two_group")
    assert d["system"]["profile"]["kind"] == "two_group"


@pytest.mark.parametrize("name", ["golden_n1.yaml", "reference_n3.yaml", "two_group_1e4.yaml",
                                  "sweep_sub.yaml"])
def test_shipped_configs_validate(name):
    load_config(CONFIGS / name)
