import math

import numpy as np
import pytest

from jfsqlab import ConfigError, EstimationError, FitError
from jfsqlab import engine, sweep
from jfsqlab.engine import replicate
from jfsqlab.metrics import Estimate
from jfsqlab.sweep import (SweepSpec, fit_exponent, point_seed, predicted_exponent, run_sweep,
                           series_of, trend)

HOM = {"kind": "homogeneous"}


def small(**kw):
    base = dict(n_grid=(10, 20), alpha_grid=(0.3,), profiles=(HOM,), policies=("jfsq",),
                horizon_events=20_000, seed=1)
    base.update(kw)
    return SweepSpec(**base)


def test_exact_power_law_fit():
    table = [(n, Estimate(n ** -0.5, 0.0)) for n in (100, 1000, 10_000, 100_000)]
    fit = fit_exponent(table, "p_wait", alpha=0.3)
    assert fit.slope == pytest.approx(-0.5, abs=1e-9)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.predicted_exponent == pytest.approx(-0.3)


def test_constant_fit():
    fit = fit_exponent([(n, Estimate(0.2, 0.0)) for n in (10, 100, 1000)], "mean_wait")
    assert fit.slope == pytest.approx(0.0, abs=1e-12)


def test_fit_skips_noisy_points():
    table = [(10, Estimate(1.0, 0.01)), (100, Estimate(0.1, 0.001)),
             (1000, Estimate(0.01, 0.01)), (10_000, Estimate(0.001, 0.0))]
    fit = fit_exponent(table, "p_wait")
    assert fit.points == (10, 100, 10_000)
    with pytest.raises(FitError):
        fit_exponent(table[:3], "p_wait")
    with pytest.raises(FitError):
        fit_exponent([(10, Estimate(0.0, 0.0))] * 5, "p_wait")


def test_predicted_exponents():
    assert predicted_exponent("p_wait", 0.3) == pytest.approx(-0.3)
    assert predicted_exponent("mean_wait", 0.7) == pytest.approx(-0.3)
    assert predicted_exponent("moment[r2:sub]", 0.3) == pytest.approx(-1.4)
    assert predicted_exponent("p_block", 0.3) is None


def test_trend():
    pts = [(10, Estimate(1.0, 0.01)), (20, Estimate(0.99, 0.01)), (40, Estimate(0.5, 0.01))]
    assert [s.ok for s in trend(pts, "x")] == [True, True]
    assert [s.ok for s in trend(pts, "x", strict=True)] == [False, True]
    up = [(10, Estimate(0.5, 0.01)), (20, Estimate(1.0, 0.01))]
    assert not trend(up, "x")[0].ok


def test_spec_validation():
    with pytest.raises(ConfigError):
        small(n_grid=())
    with pytest.raises(ConfigError):
        small(n_grid=(20, 10))
    with pytest.raises(ConfigError):
        small(alpha_grid=())
    with pytest.raises(ConfigError):
        small(replications=0)


def test_grid_rows_and_determinism():
    spec = small(n_grid=(10, 20, 40), alpha_grid=(0.3, 0.6))
    rows = run_sweep(spec)
    assert len(rows) == 6
    assert all(r.ok for r in rows)
    again = run_sweep(spec, max_workers=1)
    assert [r.metrics.fingerprint() for r in rows] == [r.metrics.fingerprint() for r in again]
    assert len(series_of(rows)) == 2
    prov = rows[0].provenance
    assert set(prov) == {"config_hash", "seed", "commit"}
    assert len({r.provenance["config_hash"] for r in rows}) == 6
    assert len({r.point.spec.seed for r in rows}) == 6


def test_single_point_equals_replicate():
    spec = small(n_grid=(15,), replications=2)
    row = run_sweep(spec)[0]
    assert row.metrics.fingerprint() == replicate(row.point.spec, 2).fingerprint()
    assert row.point.spec.seed == point_seed(1, 0)


def test_failing_point_recorded(monkeypatch):
    real = engine.run

    def flaky(spec, rep=0):
        if spec.config.n == 20:
            raise EstimationError("no admitted jobs after warm-up")
        return real(spec, rep)

    monkeypatch.setattr(sweep, "run", flaky)
    rows = run_sweep(small(n_grid=(10, 20, 40)))
    assert [r.ok for r in rows] == [True, False, True]
    assert "replication 0" in rows[1].error


def test_flags_follow_assumption_checker():
    rows = run_sweep(small())
    assert all(r.flagged for r in rows)  # large-N conditions fail at N = 10, 20


def test_monotone_trend_in_n():
    spec = SweepSpec((1000, 2000, 4000), (0.45,), (HOM,), ("jfsq",), horizon_events=1_000_000,
                     seed=3)
    rows = run_sweep(spec)
    steps = trend(rows, "p_wait")
    assert all(s.ok for s in steps), steps
    assert rows[0].metrics.p_wait.value > 0


def test_lambda_grid_points():
    spec = SweepSpec((2, 3), (), (HOM,), ("jsq",), horizon_events=10_000, lambda_grid=(0.5,))
    rows = run_sweep(spec)
    assert [r.point.config.lam for r in rows] == [0.5, 0.5]
    assert rows[0].point.series[2] == "lambda=0.5"
    assert math.isfinite(rows[0].metrics.p_wait.value)
    assert np.isfinite(rows[1].metrics.mean_qbar.value)
