"""Evaluators for the analysed functionals and the batch-means accumulator.

Lyapunov functions, concentration events, clipped moments, the Stein
solution ``g`` with its derivatives, and ``RunMetrics``, the result type
shared by simulation and exact analysis.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EstimationError
from .model import (HeterogeneityConstants, Regime, SystemConfig, capacity_index,
                    constants as model_constants)


# ---------------------------------------------------------------------------
# probes


class ProbeId(str, enum.Enum):
    E0 = "e0"
    E_SUB = "e_sub"
    E_SUPER = "e_super"
    V_N1 = "v_n1"
    V_N2 = "v_n2"
    V_SUB = "v_sub"
    V_SUPER = "v_super"


EVENT_IDS = (ProbeId.E0, ProbeId.E_SUB, ProbeId.E_SUPER)

# kernel probe kinds
K_E0, K_UNIFIED_LE, K_PREFIX_GE, K_UNIFIED_GE = 0, 1, 2, 3


@dataclass(frozen=True)
class ProbeSpec:
    id: ProbeId
    delta: float | None = None
    r: int = 1

    def __post_init__(self):
        object.__setattr__(self, "id", ProbeId(self.id))

    @classmethod
    def parse(cls, text: str, r: int = 1) -> "ProbeSpec":
        name, _, arg = text.strip().lower().partition(":")
        try:
            pid = ProbeId(name)
        except ValueError as exc:
            raise ConfigError(f"unknown probe {text!r}") from exc
        delta = None
        if arg:
            if pid not in (ProbeId.V_N1, ProbeId.E0):
                raise ConfigError(f"probe {name!r} takes no argument")
            try:
                delta = float(arg)
            except ValueError as exc:
                raise ConfigError(f"bad delta in {text!r}") from exc
        return cls(pid, delta, r)

    @property
    def label(self) -> str:
        if self.delta is not None:
            return f"{self.id.value}:{self.delta:g}"
        return self.id.value

    def resolved_delta(self, config: SystemConfig) -> float:
        if self.delta is not None:
            if not 0.0 < self.delta <= 0.5:
                raise ConfigError(f"delta must lie in (0, 0.5], got {self.delta}")
            return self.delta
        # smallest delta the busy-servers lemma allows, i.e. 2 N^-alpha
        return min(0.5, 2.0 * (1.0 - config.lam))


@dataclass(frozen=True)
class ProbeTerms:
    """Everything needed to evaluate one probe from aggregate counters."""
    kind: int
    prefix_a: int = 0
    prefix_b: int = 0
    A: float = 0.0
    B: float = 0.0
    thr: float = 0.0
    thr2: float = 0.0


def _log_terms(config: SystemConfig):
    logn = config.log_n
    return 1.0 + 8.0 * logn ** 2, 5.0 * math.sqrt(config.n) * logn


def unified_ab(which: ProbeId, config: SystemConfig, consts: HeterogeneityConstants):
    """(A, B) offsets of the unified min-form Lyapunov function."""
    if which in (ProbeId.E_SUB, ProbeId.V_SUB):
        if consts.nu <= 0:
            raise ConfigError("sub-regime probes need nu > 0 (buffer_b >= 2)")
        return 0.0, consts.n2 + (1.0 - 1.0 / (4.0 * consts.nu)) * config.n_one_minus_alpha
    return consts.k_super * config.n_alpha * config.log_n, float(config.n)


def probe_terms(probe: ProbeSpec, config: SystemConfig,
                consts: HeterogeneityConstants | None = None) -> ProbeTerms:
    consts = consts or model_constants(config, probe.r)
    pid = probe.id
    t1, t2 = _log_terms(config)
    if pid in (ProbeId.E0, ProbeId.V_N1):
        n1 = capacity_index(config.profile, (1.0 - probe.resolved_delta(config)) * config.n)
        if pid is ProbeId.E0:
            return ProbeTerms(K_E0, n1, consts.n2, thr=t1, thr2=t2)
        return ProbeTerms(K_PREFIX_GE, n1, thr=t1)
    if pid is ProbeId.V_N2:
        return ProbeTerms(K_PREFIX_GE, consts.n2, thr=t2)
    A, B = unified_ab(pid, config, consts)
    if pid in (ProbeId.E_SUB, ProbeId.V_SUB):
        thr = (1.0 - 3.0 / (8.0 * consts.nu)) * config.n_one_minus_alpha
    else:
        thr = 3.0 * consts.c1 * config.n_one_minus_alpha
    kind = K_UNIFIED_LE if pid in EVENT_IDS else K_UNIFIED_GE
    return ProbeTerms(kind, A=A, B=B, thr=thr)


def _as_batch(q) -> np.ndarray:
    return np.atleast_2d(np.asarray(q, dtype=np.int64))


def _value_batch(terms: ProbeTerms, Q: np.ndarray):
    if terms.kind in (K_E0, K_PREFIX_GE):
        return (Q[:, :terms.prefix_a] == 0).sum(axis=1).astype(float)
    busy = (Q >= 1).sum(axis=1)
    qw = Q.sum(axis=1) - busy
    return np.minimum(qw - terms.A, terms.B - busy)


def lyapunov_batch(probe: ProbeSpec, Q, config: SystemConfig,
                   consts: HeterogeneityConstants | None = None) -> np.ndarray:
    terms = probe_terms(probe, config, consts)
    return _value_batch(terms, _as_batch(Q))


def indicator_batch(probe: ProbeSpec, Q, config: SystemConfig,
                    consts: HeterogeneityConstants | None = None) -> np.ndarray:
    """Membership in the probe's event (E-probes) or tail set {V >= threshold}."""
    terms = probe_terms(probe, config, consts)
    Q = _as_batch(Q)
    v = _value_batch(terms, Q)
    if terms.kind == K_E0:
        v2 = (Q[:, :terms.prefix_b] == 0).sum(axis=1)
        return (v <= terms.thr) & (v2 <= terms.thr2)
    if terms.kind == K_UNIFIED_LE:
        return v <= terms.thr
    return v >= terms.thr


def _probe(pid) -> ProbeSpec:
    return pid if isinstance(pid, ProbeSpec) else ProbeSpec.parse(str(getattr(pid, "value", pid)))


def lyapunov(pid, q, config: SystemConfig, consts: HeterogeneityConstants | None = None) -> float:
    probe = _probe(pid)
    if probe.id is ProbeId.E0:
        raise ConfigError("e0 is an event, not a Lyapunov function")
    if probe.id is ProbeId.E_SUB:
        probe = ProbeSpec(ProbeId.V_SUB, r=probe.r)
    elif probe.id is ProbeId.E_SUPER:
        probe = ProbeSpec(ProbeId.V_SUPER, r=probe.r)
    return float(lyapunov_batch(probe, q, config, consts)[0])


def event_indicator(pid, q, config: SystemConfig, consts: HeterogeneityConstants | None = None) -> bool:
    probe = _probe(pid)
    if probe.id not in EVENT_IDS:
        raise ConfigError(f"{probe.label} is not an event probe")
    return bool(indicator_batch(probe, q, config, consts)[0])


# ---------------------------------------------------------------------------
# clipped moments and thresholds


def clipped_moment_sample(qbar: float, eta: float, r: int) -> float:
    return max(qbar - eta, 0.0) ** r


def eta_threshold(regime, config: SystemConfig, consts: HeterogeneityConstants,
                  variant: str = "proof") -> float:
    """Clipping threshold for the moment bounds.

    ``variant="proof"`` gives the thresholds the moment recursion is run
    with; ``"statement"`` gives the ones in the headline moment bound. They
    coincide in the sub regime (4/(k_sub eps) = 1/(4 nu)) and differ in the
    super regime (log N / N^alpha vs log N / N^(1-alpha)).
    """
    regime = Regime(regime)
    if regime is Regime.DIRECT or config.alpha is None:
        raise ConfigError("no clipping threshold is defined for a direct-lambda config")
    if variant not in ("proof", "statement"):
        raise ConfigError(f"unknown threshold variant {variant!r}")
    n, a = config.n, config.alpha
    if regime is Regime.SUB:
        if consts.nu <= 0:
            raise ConfigError("sub-regime threshold needs nu > 0 (buffer_b >= 2)")
        if variant == "proof":
            slack = 1.0 - 1.0 / (4.0 * consts.nu)
        else:
            slack = 1.0 - 4.0 / (consts.k_sub * consts.epsilon)
        return consts.n2 / n + slack * n ** (-a)
    denom = n ** a if variant == "proof" else n ** (1.0 - a)
    return 1.0 + consts.k_super * math.log(n) / denom


@dataclass(frozen=True)
class MomentSpec:
    """Clipped moment E[h^r(Qbar)]; ``label`` is "sub", "super", "sub_statement",
    "super_statement" or a literal threshold such as "0.5"."""
    r: int
    label: str

    @property
    def key(self) -> str:
        return f"r{self.r}:{self.label}"

    def eta(self, config: SystemConfig) -> float:
        regime, _, variant = self.label.partition("_")
        if regime in ("sub", "super"):
            consts = model_constants(config, self.r)
            return eta_threshold(regime, config, consts, variant or "proof")
        try:
            return float(self.label)
        except ValueError as exc:
            raise ConfigError(f"bad moment threshold label {self.label!r}") from exc

    @classmethod
    def parse(cls, text: str) -> "MomentSpec":
        r, _, label = text.partition(":")
        try:
            return cls(int(r.lstrip("r")), label)
        except ValueError as exc:
            raise ConfigError(f"bad moment spec {text!r}; expected 'r:label'") from exc


def default_moments(config: SystemConfig) -> tuple:
    if config.regime is Regime.DIRECT:
        return ()
    if config.regime is Regime.SUB and config.buffer_b < 2:
        return ()
    return tuple(MomentSpec(r, config.regime.value) for r in (1, 2))


# ---------------------------------------------------------------------------
# Stein solution


def stein_terms(x, eta: float, r: int, scale: float):
    """Vectorised (g, g', g'') with ``scale`` = N^alpha."""
    x = np.asarray(x, dtype=float)
    d = x - eta
    on = d >= 0
    dp = np.where(on, d, 0.0)
    g = np.where(on, -scale / (r + 1) * dp ** (r + 1), 0.0)
    g1 = np.where(on, -scale * dp ** r, 0.0)
    # one-sided at the kink: g''(eta) = 0
    g2 = np.where(d > 0, -r * scale * dp ** (r - 1), 0.0)
    return g, g1, g2


def stein_g(x: float, eta: float, r: int, n: int, alpha: float):
    if r < 1 or n < 1:
        raise ConfigError("stein_g needs r >= 1 and n >= 1")
    g, g1, g2 = stein_terms(x, eta, r, float(n) ** alpha)
    return float(g), float(g1), float(g2)


def gradient_bound_check(eta: float, r: int, n: int, alpha: float, b: int = 2,
                         points: int = 10_000) -> bool:
    """Check |g'| <= 2^r / N^(r-alpha) near the threshold and
    |g''| <= r N^alpha h^(r-1) above it, on dense grids."""
    # g depends on x only through x - eta; gridding the offset directly keeps
    # the interval ends exact (eta + 2/N - eta can round above 2/N)
    scale = float(n) ** alpha
    d = np.linspace(-2.0 / n, 2.0 / n, points)
    _, g1, _ = stein_terms(d, 0.0, r, scale)
    bound1 = 2.0 ** r / float(n) ** (r - alpha)
    ok1 = np.all(np.abs(g1) <= bound1 * (1 + 1e-12))
    d2 = np.linspace(0.0, b, points + 1)[1:]
    _, _, g2 = stein_terms(d2, 0.0, r, scale)
    bound2 = r * scale * d2 ** (r - 1)
    ok2 = np.all(np.abs(g2) <= bound2 * (1 + 1e-12))
    return bool(ok1 and ok2)


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float = 0.0

    def __iter__(self):
        return iter((self.value, self.stderr))

    def within(self, target: float, k: float = 3.0, extra: float = 0.0) -> bool:
        return abs(self.value - target) <= k * math.hypot(self.stderr, extra)


def combined_stderr(a: Estimate, b: Estimate) -> float:
    return math.hypot(a.stderr, b.stderr)


def _ratio(num: np.ndarray, den: np.ndarray) -> Estimate:
    tn, td = math.fsum(num), math.fsum(den)
    if td == 0:
        return Estimate(math.nan, math.nan)
    R = tn / td
    B = len(num)
    if B < 2:
        return Estimate(R, math.nan)
    resid = num - R * den
    se = math.sqrt(math.fsum(resid * resid) / (B * (B - 1))) / (td / B)
    return Estimate(R, se)


# column layout of the accumulator arrays (shared with the kernel)
T_TIME, T_Q, T_QW, T_BUSY, T_BUSY_RATE = range(5)
T_FIXED = 5
C_ARR, C_ADM, C_BLK, C_WAITED, C_ARR_QBAR, C_WSUM, C_WCNT, C_DEP = range(8)
C_COLS = 8


@dataclass
class MetricsAccumulator:
    """Per-batch sums for one or more replications. Merging concatenates batches."""
    n: int
    arrival_rate: float
    tacc: np.ndarray
    cacc: np.ndarray
    moment_keys: tuple
    probe_keys: tuple
    totals: np.ndarray  # whole-run arrivals, admitted, blocked, departures
    jobs: np.ndarray    # jobs in system initially / at measurement start / at the end

    @classmethod
    def empty(cls, n, arrival_rate, batches, moment_keys, probe_keys):
        return cls(n, arrival_rate,
                   np.zeros((batches, T_FIXED + len(moment_keys) + len(probe_keys))),
                   np.zeros((batches, C_COLS)), tuple(moment_keys), tuple(probe_keys),
                   np.zeros(4, dtype=np.int64), np.zeros(3, dtype=np.int64))

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        if (self.n, self.moment_keys, self.probe_keys) != (other.n, other.moment_keys, other.probe_keys):
            raise ConfigError("cannot merge accumulators of different runs")
        return MetricsAccumulator(self.n, self.arrival_rate,
                                  np.vstack([self.tacc, other.tacc]),
                                  np.vstack([self.cacc, other.cacc]),
                                  self.moment_keys, self.probe_keys,
                                  self.totals + other.totals, self.jobs + other.jobs)

    def finalize(self) -> "RunMetrics":
        t, c = self.tacc, self.cacc
        time = t[:, T_TIME]
        arrivals = c[:, C_ARR]
        if c[:, C_ADM].sum() == 0:
            raise EstimationError("no admitted jobs after warm-up")
        n = self.n
        p_block = _ratio(c[:, C_BLK], arrivals)
        qw = _ratio(t[:, T_QW], time)
        blk_frac = np.divide(c[:, C_BLK], arrivals, out=np.zeros_like(arrivals), where=arrivals > 0)
        extras = {
            "mean_qw": qw,
            "mean_busy": _ratio(t[:, T_BUSY], time),
            "mean_busy_rate": _ratio(t[:, T_BUSY_RATE], time),
            "arrival_qbar": _ratio(c[:, C_ARR_QBAR], arrivals),
            "little_wait": _ratio(t[:, T_QW], time * self.arrival_rate * (1.0 - blk_frac)),
        }
        moments = {k: _ratio(t[:, T_FIXED + i], time) for i, k in enumerate(self.moment_keys)}
        off = T_FIXED + len(self.moment_keys)
        occ = {k: _ratio(t[:, off + i], time) for i, k in enumerate(self.probe_keys)}
        counts = {
            "arrivals": int(arrivals.sum()), "admitted": int(c[:, C_ADM].sum()),
            "blocked": int(c[:, C_BLK].sum()), "departures": int(c[:, C_DEP].sum()),
            "jobs_initial": int(self.jobs[0]), "jobs_start": int(self.jobs[1]),
            "jobs_end": int(self.jobs[2]),
            "run_arrivals": int(self.totals[0]), "run_admitted": int(self.totals[1]),
            "run_blocked": int(self.totals[2]), "run_departures": int(self.totals[3]),
        }
        return RunMetrics(
            p_wait=_ratio(c[:, C_WAITED], arrivals), p_block=p_block,
            mean_wait=_ratio(c[:, C_WSUM], c[:, C_WCNT]),
            mean_qbar=_ratio(t[:, T_Q] / n, time),
            clipped_moments=moments, event_occupancy=occ, counts=counts,
            extras=extras, method="sim", accumulator=self,
        )


@dataclass
class RunMetrics:
    p_wait: Estimate
    p_block: Estimate
    mean_wait: Estimate
    mean_qbar: Estimate
    clipped_moments: dict = field(default_factory=dict)
    event_occupancy: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    method: str = "sim"
    accumulator: MetricsAccumulator | None = field(default=None, repr=False, compare=False)

    def merge(self, other: "RunMetrics") -> "RunMetrics":
        if self.accumulator is None or other.accumulator is None:
            raise ConfigError("only simulated metrics carry mergeable state")
        return self.accumulator.merge(other.accumulator).finalize()

    def metric_items(self):
        """(name, Estimate) pairs in a fixed order, as emitted to CSV/JSON."""
        yield "p_wait", self.p_wait
        yield "p_block", self.p_block
        yield "mean_wait", self.mean_wait
        yield "mean_qbar", self.mean_qbar
        for k, v in self.extras.items():
            yield k, v
        for k, v in self.clipped_moments.items():
            yield f"moment[{k}]", v
        for k, v in self.event_occupancy.items():
            yield f"occupancy[{k}]", v

    def get(self, name: str) -> Estimate:
        for k, v in self.metric_items():
            if k == name:
                return v
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "metrics": {k: {"estimate": v.value, "stderr": v.stderr} for k, v in self.metric_items()},
            "counts": dict(self.counts),
        }

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
