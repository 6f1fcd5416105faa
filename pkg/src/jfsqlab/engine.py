"""Event-by-event simulation of the queue-length CTMC under a routing policy.

The hot loop is a numba kernel working on plain arrays:

* per level, an indexed set of servers (uniform pick for JSQ) and, inside it,
  one contiguous bucket per equal-rate group (uniform pick among the
  fastest shortest queues);
* a min segment tree over queue lengths (leftmost = fastest argmin);
* a sum segment tree over busy service rates (departure sampling, and the
  busy rate itself, recomputed from children on every update so it cannot
  drift);
* per-server FIFO rings of arrival timestamps for waiting jobs.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError, EstimationError, InvariantViolation, JfsqError, StateError
from .metrics import (C_ADM, C_ARR, C_ARR_QBAR, C_BLK, C_DEP, C_WAITED, C_WCNT, C_WSUM,
                      T_BUSY, T_BUSY_RATE, T_FIXED, T_Q, T_QW, T_TIME,
                      MetricsAccumulator, MomentSpec, ProbeSpec, RunMetrics,
                      default_moments, probe_terms)
from .model import SystemConfig
from .policy import PolicyKind, PolicySpec

# integer state slots
I_EVENTS, I_TOTAL_Q, I_BUSY, I_ARR, I_ADM, I_BLK, I_DEP = range(7)
# last-event record slots
L_KIND, L_SERVER, L_BLOCKED, L_WAIT_REC, L_WAIT, L_SEL_BUSY = range(6)


@numba.njit(nogil=True, cache=True)
def _move(s, new, q, group_of, group_start, gslots, gcount, gpos,
          lslots, lcount, lpos, mintree, P):
    old = q[s]
    g = group_of[s]
    base = group_start[g]
    p = gpos[s]
    t = gslots[old, base + gcount[old, g] - 1]
    gslots[old, p] = t
    gpos[t] = p
    gcount[old, g] -= 1
    p2 = base + gcount[new, g]
    gslots[new, p2] = s
    gpos[s] = p2
    gcount[new, g] += 1

    p = lpos[s]
    t = lslots[old, lcount[old] - 1]
    lslots[old, p] = t
    lpos[t] = p
    lcount[old] -= 1
    p2 = lcount[new]
    lslots[new, p2] = s
    lpos[s] = p2
    lcount[new] += 1

    q[s] = new
    i = P + s
    mintree[i] = new
    i >>= 1
    while i >= 1:
        a = mintree[2 * i]
        c = mintree[2 * i + 1]
        mintree[i] = a if a < c else c
        i >>= 1


@numba.njit(nogil=True, cache=True)
def _set_busy(s, value, sumtree, P):
    i = P + s
    sumtree[i] = value
    i >>= 1
    while i >= 1:
        sumtree[i] = sumtree[2 * i] + sumtree[2 * i + 1]
        i >>= 1


@numba.njit(nogil=True, cache=True)
def _route(policy, d, n, q, rates, group_of, group_start, gslots, gcount,
           lslots, lcount, mintree, P, perm, rng):
    if policy == 0 or (policy == 2 and lcount[0] > 0):
        node = 1
        while node < P:
            if mintree[2 * node] == mintree[node]:
                node = 2 * node
            else:
                node = 2 * node + 1
        s = node - P
        m = q[s]
        g = group_of[s]
        c = gcount[m, g]
        if c > 1:
            s = gslots[m, group_start[g] + rng.integers(0, c)]
        return s
    if policy == 1:
        m = 0
        while lcount[m] == 0:
            m += 1
        c = lcount[m]
        if c > 1:
            return lslots[m, rng.integers(0, c)]
        return lslots[m, 0]
    if policy == 3:
        best = -1
        ties = 0
        for j in range(d):
            k = j + rng.integers(0, n - j)
            x = perm[k]
            perm[k] = perm[j]
            perm[j] = x
            if best < 0 or q[x] < q[best] or (q[x] == q[best] and rates[x] > rates[best]):
                best = x
                ties = 1
            elif q[x] == q[best] and rates[x] == rates[best]:
                ties += 1
                if rng.integers(0, ties) == 0:
                    best = x
        return best
    return rng.integers(0, n)


@numba.njit(nogil=True, cache=True)
def _advance(n_events, q, rates, group_of, group_start, gslots, gcount, gpos,
             lslots, lcount, lpos, mintree, sumtree, P, pending, head, perm,
             prefix_len, idle_prefix, fstate, istate, policy, d, lam_n, b, rng,
             warmup, horizon, tacc, cacc, m_r, m_eta, p_kind, p_a, p_b, p_A, p_B,
             p_thr, p_thr2, last):
    n = q.shape[0]
    cap = pending.shape[1]
    nb = tacc.shape[0]
    n_mom = m_r.shape[0]
    n_probe = p_kind.shape[0]
    span = horizon - warmup
    for _ in range(n_events):
        k = istate[I_EVENTS]
        busy_rate = sumtree[1]
        total = lam_n + busy_rate
        dt = rng.standard_exponential() / total
        stats = k >= warmup
        bi = 0
        tq = istate[I_TOTAL_Q]
        busy = istate[I_BUSY]
        if stats:
            bi = (k - warmup) * nb // span
            if bi >= nb:
                bi = nb - 1
            qw = tq - busy
            tacc[bi, T_TIME] += dt
            tacc[bi, T_Q] += dt * tq
            tacc[bi, T_QW] += dt * qw
            tacc[bi, T_BUSY] += dt * busy
            tacc[bi, T_BUSY_RATE] += dt * busy_rate
            qbar = tq / n
            for j in range(n_mom):
                h = qbar - m_eta[j]
                if h > 0.0:
                    tacc[bi, T_FIXED + j] += dt * h ** m_r[j]
            for j in range(n_probe):
                kind = p_kind[j]
                hit = False
                if kind == 0:
                    hit = idle_prefix[p_a[j]] <= p_thr[j] and idle_prefix[p_b[j]] <= p_thr2[j]
                elif kind == 2:
                    hit = idle_prefix[p_a[j]] >= p_thr[j]
                else:
                    v1 = qw - p_A[j]
                    v2 = p_B[j] - busy
                    v = v1 if v1 < v2 else v2
                    hit = v <= p_thr[j] if kind == 1 else v >= p_thr[j]
                if hit:
                    tacc[bi, T_FIXED + n_mom + j] += dt
        clock = fstate[0] + dt
        fstate[0] = clock
        last[L_WAIT_REC] = 0.0
        last[L_BLOCKED] = 0.0
        u = rng.random() * total
        if u < lam_n or busy == 0:
            s = _route(policy, d, n, q, rates, group_of, group_start, gslots, gcount,
                       lslots, lcount, mintree, P, perm, rng)
            qs = q[s]
            istate[I_ARR] += 1
            last[L_KIND] = 0.0
            last[L_SERVER] = s
            last[L_SEL_BUSY] = 1.0 if qs >= 1 else 0.0
            if stats:
                cacc[bi, C_ARR] += 1.0
                cacc[bi, C_ARR_QBAR] += tq / n
                if qs >= 1:
                    cacc[bi, C_WAITED] += 1.0
            if qs >= b:
                istate[I_BLK] += 1
                last[L_BLOCKED] = 1.0
                if stats:
                    cacc[bi, C_BLK] += 1.0
            else:
                istate[I_ADM] += 1
                if stats:
                    cacc[bi, C_ADM] += 1.0
                if qs == 0:
                    last[L_WAIT_REC] = 1.0
                    last[L_WAIT] = 0.0
                    if stats:
                        cacc[bi, C_WCNT] += 1.0
                    _set_busy(s, rates[s], sumtree, P)
                    istate[I_BUSY] += 1
                    for j in range(prefix_len.shape[0]):
                        if s < prefix_len[j]:
                            idle_prefix[j] -= 1
                else:
                    pending[s, (head[s] + qs - 1) % cap] = clock
                _move(s, qs + 1, q, group_of, group_start, gslots, gcount, gpos,
                      lslots, lcount, lpos, mintree, P)
                istate[I_TOTAL_Q] += 1
        else:
            s = -1
            for _try in range(16):
                x = u - lam_n
                node = 1
                while node < P:
                    left = 2 * node
                    if x < sumtree[left]:
                        node = left
                    else:
                        x -= sumtree[left]
                        node = left + 1
                cand = node - P
                if cand < n and q[cand] >= 1:
                    s = cand
                    break
                u = lam_n + rng.random() * busy_rate
            if s < 0:
                return 1
            qs = q[s]
            istate[I_DEP] += 1
            last[L_KIND] = 1.0
            last[L_SERVER] = s
            if stats:
                cacc[bi, C_DEP] += 1.0
            if qs >= 2:
                w = clock - pending[s, head[s]]
                head[s] = (head[s] + 1) % cap
                last[L_WAIT_REC] = 1.0
                last[L_WAIT] = w
                if stats:
                    cacc[bi, C_WSUM] += w
                    cacc[bi, C_WCNT] += 1.0
            else:
                _set_busy(s, 0.0, sumtree, P)
                istate[I_BUSY] -= 1
                for j in range(prefix_len.shape[0]):
                    if s < prefix_len[j]:
                        idle_prefix[j] += 1
            _move(s, qs - 1, q, group_of, group_start, gslots, gcount, gpos,
                  lslots, lcount, lpos, mintree, P)
            istate[I_TOTAL_Q] -= 1
        istate[I_EVENTS] = k + 1
    return 0


# ---------------------------------------------------------------------------
# Python-side state


@dataclass
class SimState:
    q: np.ndarray
    rates: np.ndarray
    b: int
    group_of: np.ndarray
    group_start: np.ndarray
    gslots: np.ndarray
    gcount: np.ndarray
    gpos: np.ndarray
    lslots: np.ndarray
    lcount: np.ndarray
    lpos: np.ndarray
    mintree: np.ndarray
    sumtree: np.ndarray
    P: int
    pending: np.ndarray
    head: np.ndarray
    perm: np.ndarray
    prefix_len: np.ndarray
    idle_prefix: np.ndarray
    fstate: np.ndarray
    istate: np.ndarray
    last: np.ndarray = field(default_factory=lambda: np.zeros(6))

    @classmethod
    def build(cls, config: SystemConfig, q0=None, prefix_len=()) -> "SimState":
        n, b = config.n, config.buffer_b
        rates = np.ascontiguousarray(config.profile.rates, dtype=float)
        q0 = np.zeros(n, dtype=np.int64) if q0 is None else np.asarray(q0, dtype=np.int64).copy()
        if q0.shape != (n,) or q0.min() < 0 or q0.max() > b:
            raise StateError(f"initial state must be a length-{n} vector in [0, {b}]")
        # equal-rate groups are contiguous because rates are sorted
        starts = np.flatnonzero(np.r_[True, rates[1:] != rates[:-1]])
        group_start = np.r_[starts, n].astype(np.int64)
        group_of = (np.searchsorted(starts, np.arange(n), side="right") - 1).astype(np.int64)
        G, L = len(starts), b + 1
        gslots = np.full((L, n), -1, dtype=np.int64)
        gcount = np.zeros((L, G), dtype=np.int64)
        gpos = np.zeros(n, dtype=np.int64)
        lslots = np.full((L, n), -1, dtype=np.int64)
        lcount = np.zeros(L, dtype=np.int64)
        lpos = np.zeros(n, dtype=np.int64)
        for s in range(n):
            lev, g = q0[s], group_of[s]
            p = group_start[g] + gcount[lev, g]
            gslots[lev, p] = s
            gpos[s] = p
            gcount[lev, g] += 1
            lslots[lev, lcount[lev]] = s
            lpos[s] = lcount[lev]
            lcount[lev] += 1
        P = 1
        while P < n:
            P *= 2
        mintree = np.full(2 * P, b + 1, dtype=np.int64)
        mintree[P:P + n] = q0
        sumtree = np.zeros(2 * P)
        sumtree[P:P + n] = np.where(q0 >= 1, rates, 0.0)
        for i in range(P - 1, 0, -1):
            mintree[i] = min(mintree[2 * i], mintree[2 * i + 1])
            sumtree[i] = sumtree[2 * i] + sumtree[2 * i + 1]
        cap = max(b - 1, 1)
        pending = np.zeros((n, cap))
        prefix_len = np.asarray(list(prefix_len) or [0], dtype=np.int64)
        idle_prefix = np.array([int((q0[:p] == 0).sum()) for p in prefix_len], dtype=np.int64)
        istate = np.zeros(7, dtype=np.int64)
        istate[I_TOTAL_Q] = q0.sum()
        istate[I_BUSY] = (q0 >= 1).sum()
        return cls(q0, rates, b, group_of, group_start, gslots, gcount, gpos, lslots, lcount,
                   lpos, mintree, sumtree, P, pending, np.zeros(n, dtype=np.int64),
                   np.arange(n, dtype=np.int64), prefix_len, idle_prefix,
                   np.zeros(1), istate)

    @property
    def clock(self) -> float:
        return float(self.fstate[0])

    @property
    def busy_rate(self) -> float:
        return float(self.sumtree[1])

    @property
    def events(self) -> int:
        return int(self.istate[I_EVENTS])

    def counters(self) -> dict:
        i = self.istate
        return {"arrivals": int(i[I_ARR]), "admitted": int(i[I_ADM]),
                "blocked": int(i[I_BLK]), "departures": int(i[I_DEP])}

    def level_members(self, level: int) -> set:
        return set(self.lslots[level, :self.lcount[level]].tolist())

    def check_invariants(self):
        """Recompute every derived structure from ``q`` and compare."""
        q, n, b = self.q, len(self.q), self.b
        if q.min() < 0 or q.max() > b:
            raise InvariantViolation("queue length out of [0, b]")
        for lev in range(b + 1):
            if self.level_members(lev) != set(np.flatnonzero(q == lev).tolist()):
                raise InvariantViolation(f"level index {lev} out of sync")
            for g in range(len(self.group_start) - 1):
                lo = self.group_start[g]
                members = set(self.gslots[lev, lo:lo + self.gcount[lev, g]].tolist())
                want = {s for s in range(lo, self.group_start[g + 1]) if q[s] == lev}
                if members != want:
                    raise InvariantViolation(f"group bucket ({lev}, {g}) out of sync")
        exact = math.fsum(self.rates[q >= 1])
        if abs(self.busy_rate - exact) > 1e-6 * max(1.0, exact):
            raise InvariantViolation("busy rate drifted")
        if self.istate[I_TOTAL_Q] != q.sum() or self.istate[I_BUSY] != (q >= 1).sum():
            raise InvariantViolation("aggregate counters out of sync")
        if self.mintree[1] != q.min():
            raise InvariantViolation("min tree out of sync")
        for p, v in zip(self.prefix_len, self.idle_prefix):
            if v != (q[:p] == 0).sum():
                raise InvariantViolation("idle prefix counter out of sync")
        del n


@dataclass(frozen=True)
class EventRecord:
    kind: str
    server: int            # 1-based
    clock: float
    blocked: bool = False
    selected_busy: bool = False
    wait: float | None = None


def _kernel_args(state: SimState, config: SystemConfig, policy: PolicySpec, rng,
                 warmup, horizon, tacc, cacc, mom, probes):
    return (state.q, state.rates, state.group_of, state.group_start, state.gslots,
            state.gcount, state.gpos, state.lslots, state.lcount, state.lpos,
            state.mintree, state.sumtree, state.P, state.pending, state.head, state.perm,
            state.prefix_len, state.idle_prefix, state.fstate, state.istate,
            policy.code, policy.d, config.arrival_rate, config.buffer_b, rng,
            warmup, horizon, tacc, cacc, *mom, *probes, state.last)


_NO_MOMENTS = (np.zeros(0, dtype=np.int64), np.zeros(0))
_NO_PROBES = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
              np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))


def step(state: SimState, config: SystemConfig, policy: PolicySpec,
         rng: np.random.Generator) -> EventRecord:
    """Advance one event. No statistics are collected."""
    policy.validate_for(config.n)
    big = np.iinfo(np.int64).max
    code = _advance(1, *_kernel_args(state, config, policy, rng, big, big,
                                     np.zeros((1, T_FIXED)), np.zeros((1, 8)),
                                     _NO_MOMENTS, _NO_PROBES))
    if code:
        raise InvariantViolation("departure drawn with no busy server")
    last = state.last
    return EventRecord(
        kind="arrival" if last[L_KIND] == 0 else "departure",
        server=int(last[L_SERVER]) + 1, clock=state.clock,
        blocked=bool(last[L_BLOCKED]), selected_busy=bool(last[L_SEL_BUSY]),
        wait=float(last[L_WAIT]) if last[L_WAIT_REC] else None)


# ---------------------------------------------------------------------------
# runs


INITIAL_STATES = ("empty", "busy", "full")


@dataclass(frozen=True)
class RunSpec:
    config: SystemConfig
    policy: PolicySpec
    horizon_events: int
    warmup_events: int | None = None
    batches: int = 32
    seed: int = 0
    probes: tuple = ()
    moments: tuple | None = None
    initial: str = "empty"

    def __post_init__(self):
        if self.warmup_events is None:
            object.__setattr__(self, "warmup_events", self.horizon_events // 5)
        if self.moments is None:
            object.__setattr__(self, "moments", default_moments(self.config))
        object.__setattr__(self, "probes", tuple(
            p if isinstance(p, ProbeSpec) else ProbeSpec.parse(p) for p in self.probes))
        object.__setattr__(self, "moments", tuple(
            m if isinstance(m, MomentSpec) else MomentSpec.parse(m) for m in self.moments))
        if not 0 <= self.warmup_events < self.horizon_events:
            raise ConfigError("need 0 <= warmup_events < horizon_events")
        if self.batches < 2:
            raise ConfigError("need at least 2 batches")
        if self.horizon_events - self.warmup_events < self.batches:
            raise ConfigError("fewer measured events than batches")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.initial not in INITIAL_STATES:
            raise ConfigError(f"initial state must be one of {INITIAL_STATES}")
        self.policy.validate_for(self.config.n)

    def with_(self, **changes) -> "RunSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return RunSpec(**d)


def make_rng(seed: int, replication: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(replication,))
    return np.random.Generator(np.random.PCG64(ss))


def _initial_q(spec: RunSpec) -> np.ndarray:
    n = spec.config.n
    fill = {"empty": 0, "busy": 1, "full": spec.config.buffer_b}[spec.initial]
    return np.full(n, fill, dtype=np.int64)


def _compile_probes(spec: RunSpec):
    config = spec.config
    terms = [probe_terms(p, config) for p in spec.probes]
    prefixes = sorted({t.prefix_a for t in terms} | {t.prefix_b for t in terms} | {0})
    where = {p: i for i, p in enumerate(prefixes)}
    arrs = (np.array([t.kind for t in terms], dtype=np.int64),
            np.array([where[t.prefix_a] for t in terms], dtype=np.int64),
            np.array([where[t.prefix_b] for t in terms], dtype=np.int64),
            np.array([t.A for t in terms], dtype=float),
            np.array([t.B for t in terms], dtype=float),
            np.array([t.thr for t in terms], dtype=float),
            np.array([t.thr2 for t in terms], dtype=float))
    return prefixes, arrs


CHUNK = 1 << 24


def run(spec: RunSpec, replication: int = 0) -> RunMetrics:
    config = spec.config
    prefixes, probe_arrs = _compile_probes(spec)
    mom = (np.array([m.r for m in spec.moments], dtype=np.int64),
           np.array([m.eta(config) for m in spec.moments], dtype=float))
    state = SimState.build(config, _initial_q(spec), prefixes)
    acc = MetricsAccumulator.empty(config.n, config.arrival_rate, spec.batches,
                                   [m.key for m in spec.moments], [p.label for p in spec.probes])
    rng = make_rng(spec.seed, replication)
    args = _kernel_args(state, config, spec.policy, rng, spec.warmup_events, spec.horizon_events,
                        acc.tacc, acc.cacc, mom, probe_arrs)
    acc.jobs[0] = state.istate[I_TOTAL_Q]
    done = 0
    while done < spec.horizon_events:
        chunk = min(CHUNK, spec.horizon_events - done)
        # split exactly at the end of warm-up to snapshot the job count
        if done < spec.warmup_events < done + chunk:
            chunk = spec.warmup_events - done
        if done == spec.warmup_events:
            acc.jobs[1] = state.istate[I_TOTAL_Q]
        if _advance(chunk, *args):
            raise InvariantViolation("departure drawn with no busy server")
        done += chunk
    acc.jobs[2] = state.istate[I_TOTAL_Q]
    i = state.istate
    acc.totals[:] = (i[I_ARR], i[I_ADM], i[I_BLK], i[I_DEP])
    return acc.finalize()


def conservation_errors(metrics: RunMetrics) -> list:
    """Exact job-count identities over the measured window and the whole run."""
    c = metrics.counts
    errs = []
    for pre in ("", "run_"):
        arr, adm, blk, dep = (c[pre + k] for k in ("arrivals", "admitted", "blocked", "departures"))
        start = c["jobs_start"] if not pre else c["jobs_initial"]
        if adm + blk != arr:
            errs.append(f"{pre}admitted + {pre}blocked != {pre}arrivals")
        if adm - dep != c["jobs_end"] - start:
            errs.append(f"{pre}admitted - {pre}departures != change in jobs")
    if c["run_departures"] > c["run_admitted"] + c["jobs_initial"]:
        errs.append("more departures than jobs ever present")
    return errs


def threads() -> int:
    env = os.environ.get("HETSIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"HETSIM_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


class ReplicationError(JfsqError):
    def __init__(self, replication: int, cause: Exception):
        super().__init__(f"replication {replication}: {cause}")
        self.replication = replication
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


def run_replications(spec: RunSpec, replications: int, pool: ThreadPoolExecutor | None = None):
    """Per-replication accumulators, in replication order."""
    if replications < 1:
        raise ConfigError("replications must be >= 1")

    def one(rep):
        try:
            return run(spec, rep).accumulator
        except EstimationError as exc:
            raise ReplicationError(rep, exc) from exc

    if pool is None and replications > 1 and threads() > 1:
        with ThreadPoolExecutor(min(threads(), replications)) as ex:
            return list(ex.map(one, range(replications)))
    if pool is not None:
        return list(pool.map(one, range(replications)))
    return [one(r) for r in range(replications)]


def merge_accumulators(accs) -> MetricsAccumulator:
    out = accs[0]
    for a in accs[1:]:
        out = out.merge(a)
    return out


def replicate(spec: RunSpec, replications: int) -> RunMetrics:
    return merge_accumulators(run_replications(spec, replications)).finalize()
