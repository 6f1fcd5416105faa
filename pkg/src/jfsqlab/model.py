"""System parameterization: service-rate profiles, load, capacity indices,
regime classification and the heterogeneity constants."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError

NORM_RTOL = 1e-9


class Regime(str, enum.Enum):
    SUB = "sub"
    SUPER = "super"
    DIRECT = "direct"


class ProfileKind(str, enum.Enum):
    HOMOGENEOUS = "homogeneous"
    TWO_GROUP = "two_group"
    LINEAR_DECAY = "linear_decay"
    GEOMETRIC_DECAY = "geometric_decay"
    EXPLICIT = "explicit"


def classify(alpha: float) -> Regime:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return Regime.SUB if alpha < 0.5 else Regime.SUPER


@dataclass(frozen=True)
class ServiceProfile:
    rates: np.ndarray
    kind: ProfileKind = ProfileKind.EXPLICIT
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def n(self) -> int:
        return len(self.rates)

    @property
    def epsilon(self) -> float:
        return float(self.rates[-1])

    @property
    def mu1(self) -> float:
        return float(self.rates[0])

    @property
    def total(self) -> float:
        return float(self.rates.sum())

    def rate(self, index: int) -> float:
        """Rate of server ``index`` (1-based, as in the model)."""
        return float(self.rates[index - 1])

    def label(self) -> str:
        if self.kind is ProfileKind.EXPLICIT:
            return "explicit"
        args = ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.kind.value}({args})" if args else self.kind.value

    def to_dict(self) -> dict:
        if self.kind is ProfileKind.EXPLICIT:
            return {"kind": self.kind.value, "params": {"rates": [float(x) for x in self.rates]}}
        return {"kind": self.kind.value, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping, n: int) -> "ServiceProfile":
        return make_profile(d["kind"], d.get("params", {}), n)

    def __eq__(self, other):
        return isinstance(other, ServiceProfile) and np.array_equal(self.rates, other.rates)

    def __hash__(self):
        return hash(self.rates.tobytes())


def _raw_rates(kind: ProfileKind, params: Mapping, n: int) -> np.ndarray:
    if kind is ProfileKind.HOMOGENEOUS:
        return np.ones(n)
    if kind is ProfileKind.TWO_GROUP:
        frac = float(params.get("fraction_fast", 0.5))
        ratio = float(params["rate_ratio"])
        if ratio <= 0:
            raise ConfigError("rate_ratio must be positive")
        if not 0.0 <= frac <= 1.0:
            raise ConfigError("fraction_fast must lie in [0, 1]")
        n_fast = min(n, max(0, int(math.floor(frac * n + 0.5))))
        return np.concatenate([np.full(n_fast, ratio), np.ones(n - n_fast)])
    if kind is ProfileKind.LINEAR_DECAY:
        ratio = float(params["ratio"])
        if ratio <= 0:
            raise ConfigError("ratio must be positive")
        return np.linspace(ratio, 1.0, n) if n > 1 else np.ones(1)
    if kind is ProfileKind.GEOMETRIC_DECAY:
        factor = float(params["factor"])
        if factor <= 0:
            raise ConfigError("decay factor must be positive")
        return factor ** np.arange(n, dtype=float)
    if kind is ProfileKind.EXPLICIT:
        raw = np.asarray(params["rates"], dtype=float)
        if raw.ndim != 1 or raw.size == 0:
            raise ConfigError("explicit profile needs a non-empty rate list")
        return raw
    raise ConfigError(f"unknown profile kind {kind!r}")


def make_profile(kind, params: Mapping | None = None, n: int | None = None) -> ServiceProfile:
    """Build a profile sorted descending and rescaled so the rates sum to ``n``.

    For ``explicit`` profiles ``n`` defaults to the length of the rate list and
    the list is truncated to ``n`` when shorter.
    """
    try:
        kind = ProfileKind(kind)
    except ValueError as exc:
        raise ConfigError(f"unknown profile kind {kind!r}") from exc
    params = dict(params or {})
    if kind is ProfileKind.EXPLICIT:
        raw = list(params.get("rates", []))
        if not raw:
            raise ConfigError("explicit profile needs a non-empty rate list")
        if n is None:
            n = len(raw)
        if n > len(raw):
            raise ConfigError(f"explicit profile has {len(raw)} rates, need {n}")
        params = {"rates": raw[:n]}
    if n is None or n < 1:
        raise ConfigError(f"server count must be >= 1, got {n}")
    raw = _raw_rates(kind, params, n)
    if not np.all(np.isfinite(raw)) or np.any(raw <= 0):
        raise ConfigError("service rates must be finite and positive")
    rates = np.sort(raw)[::-1] * (n / raw.sum())
    if kind is ProfileKind.EXPLICIT:
        params = {}
    return ServiceProfile(rates, kind, params)


def capacity_index(profile: ServiceProfile, target: float) -> int:
    """Smallest m with rates[0] + ... + rates[m-1] >= target (0 for target 0)."""
    if target < 0:
        raise ConfigError(f"capacity target must be non-negative, got {target}")
    if target == 0:
        return 0
    cum = np.cumsum(profile.rates)
    tol = 1e-12 * max(1.0, cum[-1])
    if target > cum[-1] + tol:
        raise ConfigError(f"target {target} exceeds total capacity {cum[-1]}")
    return int(np.searchsorted(cum, target - tol, side="left")) + 1


@dataclass(frozen=True)
class SystemConfig:
    n: int
    buffer_b: int
    profile: ServiceProfile
    alpha: float | None = None
    lambda_override: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.buffer_b < 1:
            raise ConfigError("buffer_b must be >= 1")
        if self.profile.n != self.n:
            raise ConfigError(f"profile has {self.profile.n} servers, config has {self.n}")
        if (self.alpha is None) == (self.lambda_override is None):
            raise ConfigError("exactly one of alpha / lambda must be given")
        if self.alpha is not None:
            classify(self.alpha)
        lam = self.lam
        if not 0.0 < lam < 1.0:
            raise ConfigError(f"effective lambda must lie in (0, 1), got {lam}")

    @property
    def regime(self) -> Regime:
        if self.alpha is None:
            return Regime.DIRECT
        return classify(self.alpha)

    @property
    def lam(self) -> float:
        if self.alpha is None:
            return float(self.lambda_override)
        return 1.0 - self.n ** (-self.alpha)

    @property
    def arrival_rate(self) -> float:
        return self.lam * self.n

    # N^alpha and N^(1-alpha); with a direct lambda, N^-alpha is read as 1 - lambda.
    @property
    def n_alpha(self) -> float:
        if self.alpha is None:
            return 1.0 / (1.0 - self.lam)
        return self.n ** self.alpha

    @property
    def n_one_minus_alpha(self) -> float:
        if self.alpha is None:
            return self.n * (1.0 - self.lam)
        return self.n ** (1.0 - self.alpha)

    @property
    def log_n(self) -> float:
        return math.log(self.n)

    def with_(self, **changes) -> "SystemConfig":
        d = dict(n=self.n, buffer_b=self.buffer_b, profile=self.profile,
                 alpha=self.alpha, lambda_override=self.lambda_override)
        d.update(changes)
        return SystemConfig(**d)


@dataclass(frozen=True)
class CapacityIndices:
    n2: int
    n1: dict
    delta: float


def capacity_indices(config: SystemConfig, deltas: Sequence[float] = (0.5,)) -> CapacityIndices:
    n1 = {}
    for d in deltas:
        if not 0.0 < d <= 0.5:
            raise ConfigError(f"delta must lie in (0, 0.5], got {d}")
        n1[d] = capacity_index(config.profile, (1.0 - d) * config.n)
    return CapacityIndices(n2=capacity_index(config.profile, config.arrival_rate),
                           n1=n1, delta=min(deltas))


@dataclass(frozen=True)
class HeterogeneityConstants:
    nu: float
    k_sub: float
    k_super: float
    c0: float
    c1: float
    r: int
    n2: int
    mu_n2: float
    epsilon: float
    mu1: float


def constants(config: SystemConfig, r: int = 1) -> HeterogeneityConstants:
    if r < 1:
        raise ConfigError("moment order r must be >= 1")
    prof = config.profile
    n2 = capacity_index(prof, config.arrival_rate)
    if n2 == 0:
        raise ConfigError("critical index N2 is 0 (degenerate load)")
    mu_n2 = prof.rate(n2)
    eps, mu1, bm1 = prof.epsilon, prof.mu1, config.buffer_b - 1
    nu = bm1 * mu_n2 / eps
    return HeterogeneityConstants(
        nu=nu,
        k_sub=16.0 * bm1 * mu_n2 / eps ** 2,
        k_super=24.0 * r * bm1 * mu1 / eps,
        c0=1.0 - 3.0 / (4.0 * nu) if nu > 0 else -math.inf,
        c1=1.0 / (6.0 * mu1),
        r=r, n2=n2, mu_n2=mu_n2, epsilon=eps, mu1=mu1,
    )


@dataclass(frozen=True)
class Inequality:
    name: str
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


@dataclass(frozen=True)
class AssumptionReport:
    regime: Regime
    r: int
    checks: tuple
    log_base: str = "e"

    @property
    def applicable(self) -> bool:
        return self.regime is not Regime.DIRECT

    @property
    def satisfied(self) -> bool:
        return self.applicable and all(c.holds for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value, "r": self.r, "log_base": self.log_base,
            "satisfied": self.satisfied,
            "checks": [{"name": c.name, "lhs": c.lhs, "rhs": c.rhs, "holds": c.holds}
                       for c in self.checks],
        }


def check_assumptions(config: SystemConfig, r: int = 1) -> AssumptionReport:
    """Evaluate the large-N conditions for the config's regime. Never raises
    on failure; the report carries both sides of every inequality."""
    regime = config.regime
    if regime is Regime.DIRECT:
        return AssumptionReport(regime, r, ())
    n, b, a = config.n, config.buffer_b, config.alpha
    eps, mu1 = config.profile.epsilon, config.profile.mu1
    logn = math.log(n)
    checks = [Inequality("b >= 2", 2.0, float(b))]
    if regime is Regime.SUB:
        checks += [
            Inequality("2(r+1)/log N <= epsilon", 2 * (r + 1) / logn, eps),
            Inequality("27(r+1) b log N / N^(1/4 - alpha/2) <= epsilon",
                       27 * (r + 1) * b * logn / n ** (0.25 - 0.5 * a), eps),
            Inequality("epsilon <= 0.5", eps, 0.5),
            Inequality("mu1/eps^2 bound", mu1 / eps ** 2,
                       n ** (1 - a) / (64 * b * (2 * logn ** 2 + 3))),
        ]
    else:
        checks.append(Inequality("mu1/eps bound", mu1 / eps,
                                 n ** (1 - a) / (24 * r * b * logn ** 2)))
    return AssumptionReport(regime, r, tuple(checks))
