"""Grids of runs over (N, alpha, profile, policy) and log-log exponent fits."""

from __future__ import annotations

import functools
import hashlib
import itertools
import json
import math
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .engine import RunSpec, merge_accumulators, run, threads
from .errors import ConfigError, FitError, JfsqError
from .metrics import Estimate, RunMetrics
from .model import SystemConfig, check_assumptions, make_profile
from .policy import PolicySpec


@functools.lru_cache(maxsize=1)
def commit_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def config_hash(config: SystemConfig, policy: PolicySpec, extra: dict | None = None) -> str:
    doc = {"n": config.n, "alpha": config.alpha, "lambda": config.lambda_override,
           "b": config.buffer_b, "profile": config.profile.to_dict(), "policy": str(policy),
           **(extra or {})}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def point_seed(seed: int, index: int) -> int:
    """Independent 64-bit seed for sweep point ``index``."""
    ss = np.random.SeedSequence(seed, spawn_key=(1 << 20, index))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SweepSpec:
    n_grid: tuple
    alpha_grid: tuple
    profiles: tuple                 # ({"kind": ..., "params": {...}}, ...)
    policies: tuple
    buffer_b: int = 2
    horizon_events: int = 1_000_000
    warmup_events: int | None = None
    batches: int = 32
    seed: int = 0
    replications: int = 1
    probes: tuple = ()
    moments: tuple | None = None
    initial: str = "empty"
    lambda_grid: tuple = ()

    def __post_init__(self):
        if not self.n_grid:
            raise ConfigError("n_grid must not be empty")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError("n_grid must be strictly increasing")
        if not self.alpha_grid and not self.lambda_grid:
            raise ConfigError("sweep needs an alpha_grid or a lambda_grid")
        if not self.profiles or not self.policies:
            raise ConfigError("sweep needs at least one profile and one policy")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        object.__setattr__(self, "policies", tuple(
            p if isinstance(p, PolicySpec) else PolicySpec.parse(p) for p in self.policies))

    def points(self) -> list:
        loads = [("alpha", a) for a in self.alpha_grid] + [("lambda", l) for l in self.lambda_grid]
        out = []
        for i, (prof, pol, (which, load), n) in enumerate(
                itertools.product(self.profiles, self.policies, loads, self.n_grid)):
            profile = make_profile(prof["kind"], prof.get("params", {}), n)
            kw = {"alpha": load} if which == "alpha" else {"lambda_override": load}
            config = SystemConfig(n, self.buffer_b, profile, **kw)
            spec = RunSpec(config, pol, self.horizon_events,
                           None if self.warmup_events is None else self.warmup_events,
                           self.batches, point_seed(self.seed, i), self.probes, self.moments,
                           self.initial)
            out.append(SweepPoint(i, spec, self.replications))
        return out


@dataclass(frozen=True)
class SweepPoint:
    index: int
    spec: RunSpec
    replications: int

    @property
    def config(self) -> SystemConfig:
        return self.spec.config

    @property
    def series(self) -> tuple:
        c = self.config
        load = f"alpha={c.alpha:g}" if c.alpha is not None else f"lambda={c.lam:g}"
        return (c.profile.label(), str(self.spec.policy), load, c.buffer_b)

    def provenance(self) -> dict:
        s = self.spec
        return {"config_hash": config_hash(s.config, s.policy, {
                    "horizon": s.horizon_events, "warmup": s.warmup_events,
                    "batches": s.batches, "replications": self.replications}),
                "seed": s.seed, "commit": commit_id()}


@dataclass
class SweepRow:
    point: SweepPoint
    metrics: RunMetrics | None
    error: str | None = None
    flagged: bool = False
    provenance: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.metrics is not None


def run_sweep(spec: SweepSpec, max_workers: int | None = None) -> list:
    """Run every (point, replication) task on a shared pool; merge per point in
    replication order. A failing point is recorded and the sweep continues."""
    points = spec.points()
    tasks = [(p, r) for p in points for r in range(p.replications)]

    def one(task):
        p, rep = task
        try:
            return run(p.spec, rep).accumulator
        except JfsqError as exc:
            return exc

    workers = max_workers or threads()
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(min(workers, len(tasks))) as ex:
            results = list(ex.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    rows, k = [], 0
    for p in points:
        accs = results[k:k + p.replications]
        k += p.replications
        flagged = not check_assumptions(p.config).satisfied
        err = next((f"replication {i}: {a}" for i, a in enumerate(accs) if isinstance(a, Exception)), None)
        metrics = None
        if err is None:
            try:
                metrics = merge_accumulators(accs).finalize()
            except JfsqError as exc:
                err = str(exc)
        rows.append(SweepRow(p, metrics, err, flagged, p.provenance()))
    return rows


def series_of(rows) -> dict:
    out = {}
    for row in rows:
        out.setdefault(row.point.series, []).append(row)
    return out


# ---------------------------------------------------------------------------
# fits and trends


@dataclass(frozen=True)
class ScalingFit:
    metric: str
    slope: float
    intercept: float
    r_squared: float
    predicted_exponent: float | None
    points: tuple                  # N values used
    slope_stderr: float = math.nan
    flagged_points: int = 0

    def to_dict(self) -> dict:
        return {"metric": self.metric, "slope": self.slope, "intercept": self.intercept,
                "r_squared": self.r_squared, "predicted_exponent": self.predicted_exponent,
                "points": list(self.points), "slope_stderr": self.slope_stderr,
                "flagged_points": self.flagged_points}


def predicted_exponent(metric: str, alpha: float | None) -> float | None:
    """Dominant-term exponent in N, log factors ignored."""
    if alpha is None:
        return None
    if metric in ("p_wait", "mean_wait"):
        return -min(alpha, 1.0 - alpha)
    if metric.startswith("moment[r"):
        r = int(metric[len("moment[r"):].split(":")[0])
        return -r * (1.0 - alpha)
    return None


def fit_exponent(table, metric: str, alpha: float | None = None) -> ScalingFit:
    """OLS of log(metric) on log(N) over points whose estimate exceeds three
    standard errors. ``table`` holds SweepRows or (n, Estimate) pairs."""
    pts, flagged = [], 0
    for item in table:
        if isinstance(item, SweepRow):
            if not item.ok:
                continue
            n, est = item.point.config.n, item.metrics.get(metric)
            alpha = item.point.config.alpha if alpha is None else alpha
            fl = item.flagged
        else:
            n, est = item
            est = est if isinstance(est, Estimate) else Estimate(float(est), 0.0)
            fl = False
        se = 0.0 if math.isnan(est.stderr) else est.stderr
        if est.value > 0 and est.value > 3 * se:
            pts.append((n, est.value))
            flagged += fl
    if len(pts) < 3:
        raise FitError(f"{metric}: only {len(pts)} usable point(s); need 3")
    pts.sort()
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    res = stats.linregress(x, y)
    r2 = 1.0 if np.ptp(y) == 0 else float(res.rvalue ** 2)
    return ScalingFit(metric, float(res.slope), float(res.intercept), r2,
                      predicted_exponent(metric, alpha), tuple(p[0] for p in pts),
                      float(res.stderr), flagged)


@dataclass(frozen=True)
class TrendStep:
    n_from: int
    n_to: int
    drop: float
    tolerance: float
    ok: bool


def trend(table, metric: str, strict: bool = False, k: float = 3.0) -> list:
    """Consecutive-N comparisons. Non-strict: value may not rise by more than
    k combined stderr. Strict: it must fall by more than k combined stderr."""
    pts = []
    for item in table:
        if isinstance(item, SweepRow):
            if not item.ok:
                continue
            pts.append((item.point.config.n, item.metrics.get(metric)))
        else:
            pts.append(item)
    pts.sort(key=lambda p: p[0])
    out = []
    for (n0, a), (n1, b) in zip(pts, pts[1:]):
        tol = k * math.hypot(a.stderr, b.stderr)
        drop = a.value - b.value
        out.append(TrendStep(n0, n1, drop, tol, drop > tol if strict else drop >= -tol))
    return out

