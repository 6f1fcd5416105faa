import itertools
import math

import numpy as np
import pytest

from jfsqlab import (ConfigError, NumericalError, PolicySpec, ScaleError, SystemConfig, constants,
                     make_profile)
from jfsqlab.oracle import (LEMMAS, RegionSpec, build_generator, drift_check, enumerate_states,
                            exact_metrics, moment_inequality_check, solve, state_index,
                            stationary, stein_identity_check)

import reference

# frozen outputs of the independent reference solver (tests/reference.py)
FROZEN = {
    ("n2_jsq_l06_b2", 2, 2, (1, 1), 0.6, "jsq"):
        {"p_wait": 0.366887039030069, "p_block": 0.078279777724088,
         "mean_qbar": 0.726196490149136, "mean_wait": 0.313118074585964},
    ("n2_jfsq_het_b3", 2, 3, (2, 1), 0.6, "jfsq"):
        {"p_wait": 0.405874750619769, "p_block": 0.026447502964322,
         "mean_qbar": 0.85914425212349, "mean_wait": 0.483355152162795},
    ("n3_jfsq_ref_b2", 3, 2, (1.5, 1.0, 0.5), 0.5, "jfsq"):
        {"p_wait": 0.191230960027165, "p_block": 0.016132120276354,
         "mean_qbar": 0.54598189437162, "mean_wait": 0.160501373186789},
    ("n3_jsq_het_b3", 3, 3, (2, 1, 0.5), 0.6, "jsq"):
        {"p_wait": 0.358012883145343, "p_block": 0.010927569459797,
         "mean_qbar": 0.960851044093569, "mean_wait": 0.513651805291029},
    ("n3_random_het_b2", 3, 2, (2, 1, 0.5), 0.6, "random"):
        {"p_wait": 0.544968016520224, "p_block": 0.25215914241178,
         "mean_qbar": 0.797127158932005, "mean_wait": 0.561971485094193},
    ("n3_jiq_het_b2", 3, 2, (2, 1, 0.5), 0.6, "jiq"):
        {"p_wait": 0.257434219771791, "p_block": 0.079302687447794,
         "mean_qbar": 0.69821856771105, "mean_wait": 0.248475659116326},
    ("n4_pod2_het_b2", 4, 2, (2, 1, 0.5, 0.5), 0.7, "pod:2"):
        {"p_wait": 0.478192045052884, "p_block": 0.117851576464495,
         "mean_qbar": 0.981036368306404, "mean_wait": 0.485682755335085},
}
# |E_pi'[Gg]| after adding 1e-3 to pi(empty) and renormalising; N=2, rates (2,1)
# normalised, b=2, lambda=0.6, JFSQ, r=1, eta=0 (reference solver)
PERTURBED_STEIN = 3.746253746248469e-4


def cfg(raw, b=2, lam=0.5, alpha=None):
    n = len(raw)
    kw = {"alpha": alpha} if alpha is not None else {"lambda_override": lam}
    return SystemConfig(n, b, make_profile("explicit", {"rates": raw}, n), **kw)


def golden():
    return SystemConfig(1, 2, make_profile("homogeneous", {}, 1), lambda_override=0.5)


def test_birth_death_generator():
    G = build_generator(golden(), PolicySpec.parse("jfsq")).toarray()
    want = np.array([[-0.5, 0.5, 0], [1, -1.5, 0.5], [0, 1, -1]])
    np.testing.assert_array_equal(G, want)


def test_jfsq_generator_row():
    c = cfg((2, 1), lam=0.6)
    G = build_generator(c, PolicySpec.parse("jfsq")).toarray()
    i0 = state_index((0, 0), c)
    assert G[i0, state_index((1, 0), c)] == pytest.approx(c.arrival_rate)
    assert G[i0, state_index((0, 1), c)] == 0


@pytest.mark.parametrize("policy", ["jfsq", "jsq", "jiq", "random", "pod:2"])
def test_generator_rows_sum_to_zero(policy):
    G = build_generator(cfg((2, 1, 1, 0.5), b=3), PolicySpec.parse(policy))
    assert np.abs(np.asarray(G.sum(axis=1))).max() <= 1e-12


def test_state_enumeration():
    c = cfg((2, 1, 1), b=2)
    Q = enumerate_states(c)
    assert len(Q) == 27
    assert {tuple(q) for q in Q} == set(itertools.product(range(3), repeat=3))
    for i, q in enumerate(Q):
        assert state_index(q, c) == i


def test_scale_guard():
    n = 20
    c = SystemConfig(n, 3, make_profile("homogeneous", {}, n), lambda_override=0.5)
    with pytest.raises(ScaleError):
        enumerate_states(c)
    with pytest.raises(ScaleError):
        stationary(c, PolicySpec.parse("jfsq"))


def test_birth_death_closed_form():
    d = stationary(golden(), PolicySpec.parse("jfsq"))
    np.testing.assert_allclose(d.pi, [4 / 7, 2 / 7, 1 / 7], atol=1e-12)
    assert d.residual <= 1e-9
    m = exact_metrics(d)
    assert m.p_wait.value == pytest.approx(3 / 7, abs=1e-10)
    assert m.p_block.value == pytest.approx(1 / 7, abs=1e-10)
    assert m.mean_wait.value == pytest.approx(1 / 3, abs=1e-10)
    assert m.mean_qbar.value == pytest.approx(4 / 7, abs=1e-10)
    assert m.method == "exact" and m.p_wait.stderr == 0


@pytest.mark.parametrize("key", list(FROZEN), ids=[k[0] for k in FROZEN])
def test_exact_metrics_match_reference(key):
    _, n, b, raw, lam, policy = key
    m = exact_metrics(stationary(cfg(raw, b, lam), PolicySpec.parse(policy)))
    for name, v in FROZEN[key].items():
        assert m.get(name).value == pytest.approx(v, abs=1e-12), name


def test_jsq_symmetric_states_equal_mass():
    c = SystemConfig(2, 3, make_profile("homogeneous", {}, 2), lambda_override=0.7)
    d = stationary(c, PolicySpec.parse("jsq"))
    for q in itertools.product(range(4), repeat=2):
        assert d.prob(q) == pytest.approx(d.prob(q[::-1]), abs=1e-14)


def test_jfsq_equals_jsq_when_homogeneous():
    c = SystemConfig(2, 2, make_profile("homogeneous", {}, 2), lambda_override=0.6)
    a = exact_metrics(stationary(c, PolicySpec.parse("jfsq")))
    b = exact_metrics(stationary(c, PolicySpec.parse("jsq")))
    assert a.p_wait.value == pytest.approx(b.p_wait.value, abs=1e-13)


def test_dense_and_power_iteration_agree():
    c = cfg((2, 1, 1, 0.5, 0.5), b=2, lam=0.7)
    Q = enumerate_states(c)
    G = build_generator(c, PolicySpec.parse("jfsq"), Q)
    dense = solve(G, Q, c, PolicySpec.parse("jfsq"))
    power = solve(G, Q, c, PolicySpec.parse("jfsq"), dense_limit=0)
    assert dense.method != power.method
    np.testing.assert_allclose(dense.pi, power.pi, atol=1e-9)
    assert power.residual <= 1e-9


def test_power_iteration_cap_raises():
    c = cfg((2, 1, 1, 0.5, 0.5), b=2, lam=0.7)
    Q = enumerate_states(c)
    G = build_generator(c, PolicySpec.parse("jfsq"), Q)
    with pytest.raises(NumericalError) as err:
        solve(G, Q, c, PolicySpec.parse("jfsq"), max_iter=3, dense_limit=0)
    assert err.value.residual > 1e-9


def test_larger_system_uses_iteration():
    n = 7
    c = SystemConfig(n, 3, make_profile("linear_decay", {"ratio": 2}, n), lambda_override=0.8)
    d = stationary(c, PolicySpec.parse("jfsq"))
    assert len(d.pi) == 4 ** 7 and d.residual <= 1e-9
    assert abs(d.pi.sum() - 1) <= 1e-10 and d.pi.min() >= 0


@pytest.mark.parametrize("r", [1, 2, 3])
@pytest.mark.parametrize("eta", [0.0, 0.5, 1.0])
@pytest.mark.parametrize("raw,policy", [((1,), "jfsq"), ((2, 1), "jfsq"), ((2, 1, 0.5), "jsq")])
def test_stein_identity(raw, policy, r, eta):
    d = stationary(cfg(raw, lam=0.6), PolicySpec.parse(policy))
    assert stein_identity_check(d, r=r, eta=eta) <= 1e-8
    assert stein_identity_check(d, r=r, eta=eta, via="generator") <= 1e-8


def test_stein_identity_sensitive_to_perturbation():
    d = stationary(cfg((2, 1), lam=0.6), PolicySpec.parse("jfsq"))
    pi = d.pi.copy()
    pi[0] += 1e-3
    pi /= pi.sum()
    bad = type(d)(d.states, pi, d.residual, d.config, d.policy, d.generator, d.method)
    val = stein_identity_check(bad, r=1, eta=0.0)
    assert val > 1e-6
    assert val == pytest.approx(PERTURBED_STEIN, rel=1e-9)


def test_moment_inequality_golden():
    d = stationary(golden(), PolicySpec.parse("jfsq"))
    rep = moment_inequality_check(d, r=1, eta=0.0)
    # N = 1, N^alpha read as 1/(1-lambda) = 2
    qbar = np.array([0, 1, 2])
    pi = np.array([4, 2, 1]) / 7
    assert rep.lhs == pytest.approx(float(pi @ qbar))
    drift = sum(p * 2 * x * (0.5 + 0.5 - (x >= 1)) * (x > 1) for p, x in zip(pi, qbar))
    assert rep.drift_term == pytest.approx(drift)
    assert rep.gradient_term == pytest.approx(2 ** 3 * 2)
    assert rep.remainder_term == pytest.approx(1 / 0.5)
    assert rep.holds


def test_moment_inequality_h_zero():
    d = stationary(cfg((2, 1), b=2, lam=0.6), PolicySpec.parse("jfsq"))
    rep = moment_inequality_check(d, r=2, eta=2.5)
    assert rep.lhs == 0 and rep.holds


@pytest.mark.parametrize("r", [1, 2, 3])
def test_moment_inequality_gradient_term(r):
    c = cfg((2, 1, 0.5), b=2, alpha=0.4)
    d = stationary(c, PolicySpec.parse("jfsq"))
    rep = moment_inequality_check(d, r=r)
    assert rep.gradient_term == pytest.approx(2 ** (r + 2) / 3 ** (r - 0.4))
    assert rep.theorem_bound == pytest.approx((constants(c, r).k_sub / 3 ** 0.6) ** r)
    assert rep.holds


def test_exact_metrics_blocking_one():
    c = SystemConfig(1, 1, make_profile("homogeneous", {}, 1), lambda_override=0.5)
    d = stationary(c, PolicySpec.parse("jfsq"))
    m = exact_metrics(d)
    assert m.p_block.value == pytest.approx(1 / 3)


# ---------------------------------------------------------------------------
# drift


def reference_n3():
    return cfg((1.5, 1.0, 0.5), b=2, lam=0.5)


def test_drift_example_state():
    rep = drift_check("most_n1", reference_n3(), delta=0.5)
    i = state_index((0, 1, 1), reference_n3())
    assert rep.premise[i]
    assert rep.drift[i] == pytest.approx(-1.5)
    assert rep.bound[i] == pytest.approx(-0.75)
    assert rep.holds[i]


def test_drift_reference_system_all_lemmas():
    for lemma in ("most_n1", "ssc_sub", "ssc_super"):
        rep = drift_check(lemma, reference_n3(), delta=0.5)
        assert rep.violations == 0, lemma
        assert rep.recompute_error <= 1e-9
    rep = drift_check("most_n1", reference_n3(), delta=0.5)
    assert rep.checked > 0
    assert not rep.premise[rep.values == 0].any()


def test_drift_matches_brute_force():
    c = cfg((2, 1, 1, 0.5), b=2, lam=0.7)
    rep = drift_check("most_n1", c, delta=0.5)
    Q = rep.states
    where = {tuple(q): i for i, q in enumerate(Q)}
    rates = list(c.profile.rates)
    for i, q in enumerate(Q):
        probs = reference.choice_probs("jfsq", tuple(q), rates)
        tot = 0.0
        for s in range(4):
            if q[s] < 2 and probs[s] > 0:
                t = list(q)
                t[s] += 1
                tot += c.arrival_rate * probs[s] * (rep.values[where[tuple(t)]] - rep.values[i])
            if q[s] >= 1:
                t = list(q)
                t[s] -= 1
                tot += rates[s] * (rep.values[where[tuple(t)]] - rep.values[i])
        assert rep.drift[i] == pytest.approx(tot, abs=1e-9)


def test_drift_empty_region_and_unknown_lemma():
    rep = drift_check("ssc_super", reference_n3())
    assert rep.checked == 0 and rep.violations == 0
    assert rep.to_dict()["checked"] == 0
    with pytest.raises(ConfigError):
        drift_check("most_n3", reference_n3())


def test_drift_sampled_region():
    n = 50
    c = SystemConfig(n, 2, make_profile("linear_decay", {"ratio": 2}, n), alpha=0.3)
    rep = drift_check("ssc_sub", c, region=RegionSpec("sample", samples=2000, seed=1))
    assert 0 < rep.checked <= 2000
    assert rep.recompute_error <= 1e-9
    assert rep.violations == 0 or not rep.side_conditions_hold
    again = drift_check("ssc_sub", c, region=RegionSpec("sample", samples=2000, seed=1))
    np.testing.assert_array_equal(rep.states, again.states)


def test_drift_report_serialises():
    import json
    rep = drift_check("most_n1", reference_n3(), delta=0.5)
    doc = json.loads(json.dumps(rep.to_dict()))
    assert doc["lemma"] == "most_n1" and doc["violations"] == 0
    assert {"name", "holds", "detail"} <= set(doc["side_conditions"][0])
    assert set(LEMMAS) == {"most_n1", "most_n2", "ssc_sub", "ssc_super"}


def test_drift_no_idle_exclusion_counted():
    c = cfg((2, 1, 1, 0.5), b=3, alpha=0.3)
    rep = drift_check("ssc_sub", c)
    assert rep.excluded_no_idle >= 0
    assert rep.to_dict()["excluded_no_idle"] == rep.excluded_no_idle
    assert math.isfinite(rep.recompute_error)
