"""Exact analysis of small systems by enumerating the queue-length CTMC.

States are all vectors in {0..b}^N, indexed in mixed radix with server 1 as
the most significant digit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, EstimationError, NumericalError, ScaleError, StateError
from .metrics import (Estimate, MomentSpec, ProbeId, ProbeSpec, RunMetrics, default_moments,
                      eta_threshold, indicator_batch, probe_terms, stein_terms, K_PREFIX_GE)
from .model import HeterogeneityConstants, Regime, SystemConfig, check_assumptions, constants
from .policy import PolicyKind, PolicySpec, route_distribution_batch

MAX_STATES = 10 ** 6
DENSE_LIMIT = 10 ** 4
RESIDUAL_TOL = 1e-9


def state_count(config: SystemConfig) -> int:
    return (config.buffer_b + 1) ** config.n


def enumerate_states(config: SystemConfig) -> np.ndarray:
    count = state_count(config)
    if count > MAX_STATES:
        raise ScaleError(f"(b+1)^N = {count} states exceeds the limit of {MAX_STATES}")
    n, base = config.n, config.buffer_b + 1
    idx = np.arange(count, dtype=np.int64)
    weights = base ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return (idx[:, None] // weights[None, :]) % base


def state_index(q, config: SystemConfig) -> int:
    base = config.buffer_b + 1
    weights = base ** np.arange(config.n - 1, -1, -1, dtype=np.int64)
    return int(np.asarray(q, dtype=np.int64) @ weights)


def build_generator(config: SystemConfig, policy: PolicySpec, states: np.ndarray | None = None):
    """Sparse CSR generator over ``enumerate_states(config)``."""
    if states is None:
        states = enumerate_states(config)
    S, n = states.shape
    b = config.buffer_b
    weights = (b + 1) ** np.arange(n - 1, -1, -1, dtype=np.int64)
    idx = states @ weights
    rates = config.profile.rates
    routes = route_distribution_batch(policy, states, config.profile, b)
    rows, cols, vals = [], [], []
    for m in range(n):
        ok = (states[:, m] < b) & (routes[:, m] > 0)
        rows.append(idx[ok]); cols.append(idx[ok] + weights[m])
        vals.append(config.arrival_rate * routes[ok, m])
        busy = states[:, m] >= 1
        rows.append(idx[busy]); cols.append(idx[busy] - weights[m])
        vals.append(np.full(int(busy.sum()), rates[m]))
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    off = sp.coo_matrix((vals, (rows, cols)), shape=(S, S)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


@dataclass
class StationaryDistribution:
    states: np.ndarray
    pi: np.ndarray
    residual: float
    config: SystemConfig | None = None
    policy: PolicySpec | None = None
    generator: object = field(default=None, repr=False)
    method: str = "dense"

    def prob(self, q) -> float:
        return float(self.pi[state_index(q, self.config)])


def _residual(pi, G) -> float:
    return float(np.abs(G.T @ pi).max())


def solve(generator, states=None, config=None, policy=None, max_iter: int = 2_000_000,
          tol: float = 1e-12, dense_limit: int = DENSE_LIMIT) -> StationaryDistribution:
    G = sp.csr_matrix(generator)
    S = G.shape[0]
    if S <= dense_limit:
        A = G.T.toarray()
        A[-1, :] = 1.0
        rhs = np.zeros(S)
        rhs[-1] = 1.0
        pi = np.linalg.solve(A, rhs)
        method = "dense"
    else:
        # uniformised chain P = I + G / L
        L = 1.1 * float(np.abs(G.diagonal()).max())
        PT = (sp.identity(S, format="csr") + G / L).T.tocsr()
        pi = np.full(S, 1.0 / S)
        method = "power"
        for it in range(1, max_iter + 1):
            pi = PT @ pi
            if it % 200 == 0:
                pi /= pi.sum()
                if _residual(pi, G) <= tol:
                    break
    pi[(pi < 0) & (pi >= -1e-12)] = 0.0
    pi /= pi.sum()
    res = _residual(pi, G)
    if res > RESIDUAL_TOL or pi.min() < 0:
        raise NumericalError("stationary solve did not converge", res)
    return StationaryDistribution(states, pi, res, config, policy, G, method)


def stationary(config: SystemConfig, policy: PolicySpec) -> StationaryDistribution:
    states = enumerate_states(config)
    G = build_generator(config, policy, states)
    return solve(G, states, config, policy)


# ---------------------------------------------------------------------------
# exact metrics


def _exact(x) -> Estimate:
    return Estimate(float(x), 0.0)


def exact_metrics(dist: StationaryDistribution, config: SystemConfig | None = None,
                  policy: PolicySpec | None = None, moments=None, probes=()) -> RunMetrics:
    """Stationary metrics; arrival quantities use PASTA, E[W] uses Little's law."""
    config = config or dist.config
    policy = policy or dist.policy
    Q, pi, n = dist.states, dist.pi, config.n
    routes = route_distribution_batch(policy, Q, config.profile, config.buffer_b)
    # a blocked arrival also found its selected server busy
    p_wait = math.fsum(pi * (routes[:, :n] * (Q >= 1)).sum(axis=1)) + math.fsum(pi * routes[:, n])
    p_block = math.fsum(pi * routes[:, n])
    busy = (Q >= 1).sum(axis=1)
    qw = Q.sum(axis=1) - busy
    qbar = Q.sum(axis=1) / n
    mean_qw = math.fsum(pi * qw)
    if p_block >= 1.0 - 1e-15:
        raise EstimationError("blocking probability is 1; waiting time undefined")
    mean_wait = mean_qw / (config.arrival_rate * (1.0 - p_block))
    mean_qbar = math.fsum(pi * qbar)
    extras = {
        "mean_qw": _exact(mean_qw),
        "mean_busy": _exact(math.fsum(pi * busy)),
        "mean_busy_rate": _exact(math.fsum(pi * ((Q >= 1) @ config.profile.rates))),
        "arrival_qbar": _exact(mean_qbar),
        "little_wait": _exact(mean_wait),
    }
    if moments is None:
        moments = default_moments(config)
    mom = {}
    for m in moments:
        m = m if isinstance(m, MomentSpec) else MomentSpec.parse(m)
        h = np.maximum(qbar - m.eta(config), 0.0)
        mom[m.key] = _exact(math.fsum(pi * h ** m.r))
    occ = {}
    for p in probes:
        p = p if isinstance(p, ProbeSpec) else ProbeSpec.parse(p)
        occ[p.label] = _exact(math.fsum(pi * indicator_batch(p, Q, config)))
    return RunMetrics(_exact(p_wait), _exact(p_block), _exact(mean_wait), _exact(mean_qbar),
                      clipped_moments=mom, event_occupancy=occ, counts={}, extras=extras,
                      method="exact")


# ---------------------------------------------------------------------------
# Stein identity and the iterative moment inequality


def _block_prob(dist: StationaryDistribution, config: SystemConfig) -> np.ndarray:
    routes = route_distribution_batch(dist.policy, dist.states, config.profile, config.buffer_b)
    return routes[:, config.n]


def stein_generator_values(dist: StationaryDistribution, config: SystemConfig, r: int,
                           eta: float) -> np.ndarray:
    """(Gg)(q) for every state, expanded in terms of the mean queue length."""
    Q, n = dist.states, config.n
    scale = config.n_alpha
    qbar = Q.sum(axis=1) / n
    g0 = stein_terms(qbar, eta, r, scale)[0]
    gp = stein_terms(qbar + 1.0 / n, eta, r, scale)[0]
    gm = stein_terms(qbar - 1.0 / n, eta, r, scale)[0]
    a_b = _block_prob(dist, config)
    busy_rate = (Q >= 1) @ config.profile.rates
    return config.arrival_rate * (1.0 - a_b) * (gp - g0) + busy_rate * (gm - g0)


def stein_identity_check(dist: StationaryDistribution, config: SystemConfig | None = None,
                         r: int = 1, eta: float = 0.0, via: str = "expansion") -> float:
    """|E_pi[(Gg)(Qbar)]|; zero up to round-off for any stationary pi."""
    config = config or dist.config
    if via == "expansion":
        vals = stein_generator_values(dist, config, r, eta)
        terms = dist.pi * vals
    elif via == "generator":
        G = dist.generator if dist.generator is not None else build_generator(config, dist.policy, dist.states)
        f = stein_terms(dist.states.sum(axis=1) / config.n, eta, r, config.n_alpha)[0]
        terms = dist.pi * (G @ f)
    else:
        raise ConfigError(f"unknown evaluation route {via!r}")
    return abs(math.fsum(terms))


@dataclass(frozen=True)
class MomentInequalityReport:
    r: int
    eta: float
    lhs: float
    drift_term: float
    gradient_term: float
    remainder_term: float
    theorem_bound: float | None

    @property
    def rhs(self) -> float:
        return self.drift_term + self.gradient_term + self.remainder_term

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1 + 1e-12) + 1e-300

    def to_dict(self) -> dict:
        return {"r": self.r, "eta": self.eta, "lhs": self.lhs, "rhs": self.rhs,
                "drift_term": self.drift_term, "gradient_term": self.gradient_term,
                "remainder_term": self.remainder_term, "holds": self.holds,
                "theorem_bound": self.theorem_bound}


def theorem_moment_bound(config: SystemConfig, consts: HeterogeneityConstants, r: int) -> float | None:
    regime = config.regime
    if regime is Regime.SUB:
        return (consts.k_sub / config.n_one_minus_alpha) ** r
    if regime is Regime.SUPER:
        return 10.0 * (2.0 * r / config.n_one_minus_alpha) ** r
    return None


def moment_inequality_check(dist: StationaryDistribution, config: SystemConfig | None = None,
                            consts: HeterogeneityConstants | None = None, r: int = 1,
                            eta: float | None = None) -> MomentInequalityReport:
    """Both sides of the iterative moment relation, exactly under pi:

        E[h^r] <= E[N^a h^r (lam + N^-a - busy_rate/N) I(Qbar > eta + 1/N)]
                  + 2^(r+2) / N^(r-a) + (r / N^(1-a)) E[h^(r-1)(Qbar + 1/N)]

    with h(x) = max(x - eta, 0) and h^0 = 1.
    """
    config = config or dist.config
    if eta is None:
        consts = consts or constants(config, r)
        eta = eta_threshold(config.regime, config, consts)
    Q, pi, n = dist.states, dist.pi, config.n
    qbar = Q.sum(axis=1) / n
    h = np.maximum(qbar - eta, 0.0)
    na, n1a = config.n_alpha, config.n_one_minus_alpha
    busy_rate = (Q >= 1) @ config.profile.rates
    lhs = math.fsum(pi * h ** r)
    drift = math.fsum(pi * na * h ** r * (config.lam + 1.0 / na - busy_rate / n) * (qbar > eta + 1.0 / n))
    grad = 2.0 ** (r + 2) * na / float(n) ** r  # 2^(r+2) / N^(r-alpha)
    rem = r / n1a * math.fsum(pi * np.maximum(qbar + 1.0 / n - eta, 0.0) ** (r - 1))
    bound = None
    if config.regime is not Regime.DIRECT:
        try:
            bound = theorem_moment_bound(config, consts or constants(config, r), r)
        except ConfigError:
            bound = None
    return MomentInequalityReport(r, float(eta), lhs, drift, grad, rem, bound)


# ---------------------------------------------------------------------------
# Lyapunov drift verification


LEMMAS = ("most_n1", "most_n2", "ssc_sub", "ssc_super")


@dataclass(frozen=True)
class SideCondition:
    name: str
    holds: bool
    detail: str = ""

    def __post_init__(self):
        object.__setattr__(self, "holds", bool(self.holds))


@dataclass(frozen=True)
class RegionSpec:
    """``all`` enumerates {0..b}^N; ``sample`` draws premise states at random."""
    kind: str = "all"
    samples: int = 100_000
    seed: int = 0
    max_draws: int = 20_000_000
    give_up_after: int = 1_000_000  # draws with no accepted state => empty region

    def __post_init__(self):
        if self.kind not in ("all", "sample"):
            raise ConfigError(f"region kind must be 'all' or 'sample', got {self.kind!r}")


@dataclass
class DriftReport:
    lemma: str
    states: np.ndarray
    values: np.ndarray
    drift: np.ndarray
    bound: np.ndarray
    case: np.ndarray          # 0 = single case, 1 / 2 = proof cases
    premise: np.ndarray
    excluded_no_idle: int
    side_conditions: tuple
    recompute_error: float
    region: str
    drawn: int = 0

    @property
    def holds(self) -> np.ndarray:
        return self.drift <= self.bound + 1e-9 * np.maximum(1.0, np.abs(self.bound))

    @property
    def checked(self) -> int:
        return int(self.premise.sum())

    @property
    def violations(self) -> int:
        return int((self.premise & ~self.holds).sum())

    @property
    def side_conditions_hold(self) -> bool:
        return all(c.holds for c in self.side_conditions)

    def case_counts(self) -> dict:
        out = {}
        for c in np.unique(self.case[self.premise]):
            sel = self.premise & (self.case == c)
            out[f"case{c}" if c else "main"] = {"checked": int(sel.sum()),
                                                "violations": int((sel & ~self.holds).sum())}
        return out

    def records(self, only_violations: bool = False):
        holds = self.holds
        sel = self.premise & ~holds if only_violations else self.premise
        for i in np.flatnonzero(sel):
            ok = bool(holds[i])
            yield {"state": self.states[i].tolist(), "V": float(self.values[i]),
                   "drift": float(self.drift[i]), "bound": float(self.bound[i]),
                   "case": int(self.case[i]), "premise": True, "holds": ok}

    def to_dict(self) -> dict:
        return {
            "lemma": self.lemma, "region": self.region,
            "checked": self.checked, "violations": self.violations,
            "excluded_no_idle": self.excluded_no_idle, "drawn": self.drawn,
            "cases": self.case_counts(),
            "side_conditions": [{"name": c.name, "holds": c.holds, "detail": c.detail}
                                for c in self.side_conditions],
            "side_conditions_hold": self.side_conditions_hold,
            "max_recompute_error": self.recompute_error,
            "violating_states": list(self.records(only_violations=True)),
        }


def _lemma_probe(lemma: str, delta: float | None, r: int) -> ProbeSpec:
    return {"most_n1": ProbeSpec(ProbeId.V_N1, delta, r), "most_n2": ProbeSpec(ProbeId.V_N2, None, r),
            "ssc_sub": ProbeSpec(ProbeId.V_SUB, None, r),
            "ssc_super": ProbeSpec(ProbeId.V_SUPER, None, r)}[lemma]


def _neighbour_values(terms, Q):
    """V at q, q + e_m and q - e_m for every server m."""
    Q = np.asarray(Q, dtype=np.int64)
    if terms.kind == K_PREFIX_GE:
        inpre = np.arange(Q.shape[1]) < terms.prefix_a
        v = (Q[:, inpre] == 0).sum(axis=1).astype(float)
        up = v[:, None] - ((Q == 0) & inpre)
        down = v[:, None] + ((Q == 1) & inpre)
        return v, up.astype(float), down.astype(float)
    busy = (Q >= 1).sum(axis=1)
    qw = Q.sum(axis=1) - busy
    A, B = terms.A, terms.B
    v = np.minimum(qw - A, B - busy)
    idle = Q == 0
    up = np.where(idle, np.minimum(qw[:, None] - A, B - busy[:, None] - 1.0),
                  np.minimum(qw[:, None] + 1.0 - A, B - busy[:, None]))
    one = Q == 1
    down = np.where(one, np.minimum(qw[:, None] - A, B - busy[:, None] + 1.0),
                    np.minimum(qw[:, None] - 1.0 - A, B - busy[:, None]))
    return v, up, down


def _drift(terms, Q, config: SystemConfig, policy: PolicySpec) -> tuple:
    v, up, down = _neighbour_values(terms, Q)
    routes = route_distribution_batch(policy, Q, config.profile, config.buffer_b)
    n = config.n
    drift = config.arrival_rate * (routes[:, :n] * (up - v[:, None])).sum(axis=1)
    drift += ((Q >= 1) * config.profile.rates * (down - v[:, None])).sum(axis=1)
    return v, drift


def _drift_by_generator_rows(terms, Q, config: SystemConfig, policy: PolicySpec) -> np.ndarray:
    """Independent recomputation: explicit transitions, V recomputed from scratch."""
    from .metrics import _value_batch
    Q = np.asarray(Q, dtype=np.int64)
    n, b = config.n, config.buffer_b
    out = np.empty(len(Q))
    for i, q in enumerate(Q):
        v0 = _value_batch(terms, q[None, :])[0]
        route = route_distribution_batch(policy, q[None, :], config.profile, b)[0]
        targets, rates = [], []
        for m in range(n):
            if route[m] > 0 and q[m] < b:
                t = q.copy(); t[m] += 1
                targets.append(t); rates.append(config.arrival_rate * route[m])
            if q[m] >= 1:
                t = q.copy(); t[m] -= 1
                targets.append(t); rates.append(config.profile.rates[m])
        if targets:
            vals = _value_batch(terms, np.array(targets))
            out[i] = float(np.dot(rates, vals - v0))
        else:
            out[i] = 0.0
    return out


def _effective_alpha(config: SystemConfig) -> float:
    if config.alpha is not None:
        return config.alpha
    if config.n == 1:
        return math.nan
    return -math.log(1.0 - config.lam) / math.log(config.n)


def _side_conditions(lemma, config, policy, consts, probe) -> tuple:
    n, lam = config.n, config.lam
    logn = math.log(n) if n > 1 else 0.0
    conds = [SideCondition("policy is jfsq", policy.kind is PolicyKind.JFSQ, str(policy))]
    cum = np.cumsum(config.profile.rates)
    n2_exact = abs(cum[consts.n2 - 1] - config.arrival_rate) <= 1e-9 * n
    n2_detail = f"sum of first N2={consts.n2} rates = {cum[consts.n2 - 1]:.6g}, lambda N = {config.arrival_rate:.6g}"
    a_eff = _effective_alpha(config)
    rates = config.profile.rates

    def split(p):
        # arrivals only stay inside the prefix if JFSQ cannot tie across its edge
        ok = p == 0 or p == n or rates[p - 1] > rates[p]
        return SideCondition("no rate tie at prefix boundary", ok, f"prefix length {p}")

    if lemma == "most_n1":
        d = probe.resolved_delta(config)
        conds += [SideCondition("2/N^alpha <= delta", 2 * (1 - lam) <= d + 1e-12, f"{2 * (1 - lam):.6g} vs {d:.6g}"),
                  SideCondition("delta <= 0.5", d <= 0.5, f"{d:.6g}"),
                  split(probe_terms(probe, config, consts).prefix_a)]
    elif lemma == "most_n2":
        conds += [SideCondition("mu_N2 <= sqrt(N)/log N", n > 1 and consts.mu_n2 <= math.sqrt(n) / logn,
                                f"{consts.mu_n2:.6g}"),
                  SideCondition("N2 capacity exact", n2_exact, n2_detail), split(consts.n2)]
    elif lemma == "ssc_sub":
        assum = check_assumptions(config, 1)
        conds += [SideCondition("sub regime", a_eff < 0.5, f"alpha = {a_eff:.6g}"),
                  SideCondition("sub assumption", assum.regime is Regime.SUB and assum.satisfied,
                                "large-N assumption of the sub regime"),
                  SideCondition("nu >= 1", consts.nu >= 1, f"nu = {consts.nu:.6g}"),
                  SideCondition("nu >= 3 (case 2 chain, stated as b >= 5)", consts.nu >= 3, f"nu = {consts.nu:.6g}"),
                  SideCondition("N2 capacity exact", n2_exact, n2_detail)]
    else:
        assum = check_assumptions(config, consts.r)
        n1a = config.n_one_minus_alpha
        conds += [SideCondition("super regime", a_eff >= 0.5, f"alpha = {a_eff:.6g}"),
                  SideCondition("super assumption", assum.regime is Regime.SUPER and assum.satisfied,
                                "large-N assumption of the super regime"),
                  SideCondition("N^(1-alpha) >= 12 r mu1 log N", n1a >= 12 * consts.r * consts.mu1 * logn,
                                f"{n1a:.6g} vs {12 * consts.r * consts.mu1 * logn:.6g}")]
    return tuple(conds)


def _premise_and_bounds(lemma, Q, v, config, consts, probe):
    """(premise mask, case labels, claimed bound, mask of states lacking an idle server)."""
    S = len(Q)
    n = config.n
    logn = math.log(n) if n > 1 else 0.0
    n1a, na = config.n_one_minus_alpha, config.n_alpha
    eps, bm1 = consts.epsilon, config.buffer_b - 1
    no_idle = (Q >= 1).all(axis=1)
    case = np.zeros(S, dtype=np.int64)
    if lemma == "most_n1":
        d = probe.resolved_delta(config)
        return v >= 1, case, np.full(S, -d * n / 2), np.zeros(S, bool)
    if lemma == "most_n2":
        thr = math.sqrt(n) * logn
        return v >= max(thr, 1.0), case, np.full(S, -consts.mu_n2 * thr), np.zeros(S, bool)
    terms = probe_terms(probe, config, consts)
    busy = (Q >= 1).sum(axis=1)
    qw = Q.sum(axis=1) - busy
    c1 = (qw - terms.A) <= (terms.B - busy)
    case = np.where(c1, 1, 2)
    if lemma == "ssc_sub":
        base = consts.c0 * n1a
        bound = np.where(c1, -eps * consts.c0 * n1a / bm1 if bm1 else -np.inf,
                         -eps * n1a / (4 * bm1) if bm1 else -np.inf)
    else:
        base = consts.c1 * n1a
        full = -eps * (consts.c1 * n1a + consts.k_super * na * logn) / bm1 if bm1 else -np.inf
        bound = np.where(c1, full, full / 2)
    premise = v >= base
    return premise & ~no_idle, case, bound, premise & no_idle


def _sample_states(config: SystemConfig, region: RegionSpec, accept) -> tuple:
    """Draw states with a uniform number of busy servers, uniform busy set and
    uniform queue lengths in 1..b, keeping those that satisfy ``accept``."""
    rng = np.random.default_rng(region.seed)
    n, b = config.n, config.buffer_b
    kept, drawn, total = [], 0, 0
    batch = 20_000
    while total < region.samples and drawn < region.max_draws:
        k = rng.integers(0, n + 1, size=batch)
        order = np.argsort(rng.random((batch, n)), axis=1)
        busy = np.empty((batch, n), dtype=bool)
        np.put_along_axis(busy, order, np.arange(n)[None, :] < k[:, None], axis=1)
        Q = np.where(busy, rng.integers(1, b + 1, size=(batch, n)), 0).astype(np.int64)
        drawn += batch
        Q = Q[accept(Q)]
        kept.append(Q)
        total += len(Q)
        if total == 0 and drawn >= region.give_up_after:
            break
    Q = np.concatenate(kept)[:region.samples] if kept else np.zeros((0, n), dtype=np.int64)
    return Q, drawn


def drift_check(lemma: str, config: SystemConfig, policy: PolicySpec | None = None,
                region: RegionSpec | None = None, delta: float | None = None, r: int = 1,
                recheck: int = 200) -> DriftReport:
    """Exact drift of the lemma's Lyapunov function on its premise states,
    compared with the bound claimed in the proof (per case where it has cases)."""
    if lemma not in LEMMAS:
        raise ConfigError(f"unknown lemma {lemma!r}; expected one of {LEMMAS}")
    policy = policy or PolicySpec(PolicyKind.JFSQ)
    region = region or RegionSpec()
    consts = constants(config, r)
    probe = _lemma_probe(lemma, delta, r)
    if lemma in ("ssc_sub", "ssc_super") and config.buffer_b < 2:
        raise ConfigError("state-space collapse checks need buffer_b >= 2")
    terms = probe_terms(probe, config, consts)
    drawn = 0
    if region.kind == "all":
        Q = enumerate_states(config)
    else:
        def accept(Qs):
            v = _neighbour_values(terms, Qs)[0]
            prem, _, _, noidle = _premise_and_bounds(lemma, Qs, v, config, consts, probe)
            return prem | noidle
        Q, drawn = _sample_states(config, region, accept)
    v, drift = _drift(terms, Q, config, policy)
    premise, case, bound, no_idle = _premise_and_bounds(lemma, Q, v, config, consts, probe)
    if region.kind == "all" and len(Q) <= 20_000:
        G = build_generator(config, policy, Q)
        ref = G @ v
    else:
        pick = np.flatnonzero(premise)[:recheck]
        ref = drift.copy()
        ref[pick] = _drift_by_generator_rows(terms, Q[pick], config, policy)
    err = float(np.abs(ref - drift).max()) if len(Q) else 0.0
    return DriftReport(lemma, Q, v, drift, bound, case, premise, int(no_idle.sum()),
                       _side_conditions(lemma, config, policy, consts, probe), err,
                       region.kind, drawn)
