"""Routing rules: JFSQ and the comparison baselines (JSQ, JIQ, power-of-d, random).

Servers are indexed by descending rate, so "fastest" means lowest index up to
exact rate ties. Selection never looks at the buffer limit; an arrival whose
selected server already holds ``b`` jobs is blocked.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError
from .model import ServiceProfile


class PolicyKind(str, enum.Enum):
    JFSQ = "jfsq"
    JSQ = "jsq"
    JIQ = "jiq"
    POD = "pod"
    RANDOM = "random"


# integer codes shared with the simulation kernel
POLICY_CODES = {PolicyKind.JFSQ: 0, PolicyKind.JSQ: 1, PolicyKind.JIQ: 2,
                PolicyKind.POD: 3, PolicyKind.RANDOM: 4}


@dataclass(frozen=True)
class PolicySpec:
    kind: PolicyKind
    d: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.kind is PolicyKind.POD and self.d < 1:
            raise ConfigError("power-of-d needs d >= 1")

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        name, _, arg = text.strip().lower().partition(":")
        try:
            kind = PolicyKind(name)
        except ValueError as exc:
            raise ConfigError(f"unknown policy {text!r}") from exc
        if kind is PolicyKind.POD:
            if not arg:
                raise ConfigError("pod policy needs a sample size, e.g. 'pod:2'")
            try:
                return cls(kind, int(arg))
            except ValueError as exc:
                raise ConfigError(f"bad sample size in {text!r}") from exc
        if arg:
            raise ConfigError(f"policy {name!r} takes no argument")
        return cls(kind)

    def __str__(self):
        return f"pod:{self.d}" if self.kind is PolicyKind.POD else self.kind.value

    @property
    def code(self) -> int:
        return POLICY_CODES[self.kind]

    def validate_for(self, n: int):
        if self.kind is PolicyKind.POD and self.d > n:
            raise ConfigError(f"pod:{self.d} needs d <= N = {n}")


@dataclass(frozen=True)
class RoutingDecision:
    """``server`` is the 1-based selected server; ``blocked`` means it was full."""
    server: int
    blocked: bool = False

    @property
    def kind(self) -> str:
        return "block" if self.blocked else "assign"


def _check_state(q, profile: ServiceProfile, b: int) -> np.ndarray:
    q = np.asarray(q)
    if q.ndim != 1 or q.shape[0] != profile.n:
        raise StateError(f"queue vector must have length {profile.n}")
    if q.size and (q.min() < 0 or q.max() > b):
        raise StateError(f"queue lengths must lie in [0, {b}]")
    return q.astype(np.int64)


def _fastest_of(rng, idx: np.ndarray, rates: np.ndarray) -> int:
    r = rates[idx]
    top = idx[r == r.max()]
    return int(top[rng.integers(len(top))]) if len(top) > 1 else int(top[0])


def route(policy: PolicySpec, q, profile: ServiceProfile, b: int, rng: np.random.Generator) -> RoutingDecision:
    q = _check_state(q, profile, b)
    policy.validate_for(profile.n)
    rates = profile.rates
    n = len(q)
    k = policy.kind
    if k is PolicyKind.JFSQ:
        m = _fastest_of(rng, np.flatnonzero(q == q.min()), rates)
    elif k is PolicyKind.JSQ:
        cand = np.flatnonzero(q == q.min())
        m = int(cand[rng.integers(len(cand))])
    elif k is PolicyKind.JIQ:
        idle = np.flatnonzero(q == 0)
        m = _fastest_of(rng, idle, rates) if len(idle) else int(rng.integers(n))
    elif k is PolicyKind.POD:
        sample = rng.choice(n, size=policy.d, replace=False)
        qs = q[sample]
        m = _fastest_of(rng, np.sort(sample[qs == qs.min()]), rates)
    else:
        m = int(rng.integers(n))
    return RoutingDecision(m + 1, bool(q[m] >= b))


def _pod_weights(q: np.ndarray, rates: np.ndarray, d: int) -> np.ndarray:
    # A server wins iff the sample holds no strictly better server, and it then
    # splits the win uniformly with its exact ties.
    n = len(q)
    total = math.comb(n, d)
    w = np.zeros(n)
    keys = list(zip(q.tolist(), (-rates).tolist()))
    for i in range(n):
        better = sum(1 for kj in keys if kj < keys[i])
        ties = sum(1 for kj in keys if kj == keys[i])
        hit = math.comb(n - better, d) - math.comb(n - better - ties, d)
        w[i] = hit / total / ties
    return w


def route_distribution_batch(policy: PolicySpec, Q, profile: ServiceProfile, b: int) -> np.ndarray:
    """Exact outcome distributions for a batch of states.

    ``Q`` has shape (S, N); the result has shape (S, N + 1) with the last
    column the blocking probability.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=np.int64))
    S, n = Q.shape
    if n != profile.n:
        raise StateError(f"queue vectors must have length {profile.n}")
    if Q.size and (Q.min() < 0 or Q.max() > b):
        raise StateError(f"queue lengths must lie in [0, {b}]")
    policy.validate_for(n)
    rates = profile.rates
    k = policy.kind
    if k is PolicyKind.RANDOM:
        sel = np.full((S, n), 1.0 / n)
    elif k is PolicyKind.POD:
        sel = np.array([_pod_weights(row, rates, policy.d) for row in Q]).reshape(S, n)
    else:
        qmin = Q.min(axis=1, keepdims=True)
        cand = Q == qmin
        if k is PolicyKind.JIQ:
            any_idle = (qmin[:, 0] == 0)
        if k in (PolicyKind.JFSQ, PolicyKind.JIQ):
            r = np.where(cand, rates[None, :], -np.inf)
            cand = cand & (rates[None, :] == r.max(axis=1, keepdims=True))
        sel = cand / cand.sum(axis=1, keepdims=True)
        if k is PolicyKind.JIQ:
            sel[~any_idle] = 1.0 / n
    out = np.zeros((S, n + 1))
    full = Q >= b
    out[:, :n] = np.where(full, 0.0, sel)
    out[:, n] = np.where(full, sel, 0.0).sum(axis=1)
    return out


def route_distribution(policy: PolicySpec, q, profile: ServiceProfile, b: int) -> np.ndarray:
    q = _check_state(q, profile, b)
    return route_distribution_batch(policy, q[None, :], profile, b)[0]
