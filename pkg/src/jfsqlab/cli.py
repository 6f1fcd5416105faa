"""Command-line entry point.

    jfsqlab simulate   --config run.yaml [--override run.seed=7] [--out DIR]
    jfsqlab exact      --config small.yaml
    jfsqlab sweep      --config sweep.yaml --metric p_wait --plot
    jfsqlab drift-check --config small.yaml --lemma most_n1

Exit codes: 0 ok, 2 config, 3 estimation, 4 scale, 5 fit.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import re
import sys
from pathlib import Path

import jsonschema
import yaml

from .engine import RunSpec, replicate
from .errors import ConfigError, FitError, JfsqError
from .metrics import MomentSpec, ProbeSpec
from .model import ProfileKind, SystemConfig, check_assumptions, constants, make_profile
from .oracle import (LEMMAS, RegionSpec, drift_check, exact_metrics, moment_inequality_check,
                     stationary, stein_identity_check)
from .output import (estimate, loglog_svg, metric_rows, run_document, write_csv, write_json)
from .policy import PolicyKind, PolicySpec
from .sweep import SweepSpec, commit_id, config_hash, fit_exponent, run_sweep, series_of

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION, EXIT_SCALE, EXIT_FIT = 0, 2, 3, 4, 5

_number = {"type": ["number", "string"]}
_count = {"type": ["integer", "number", "string"]}
_profile = {
    "type": "object", "additionalProperties": False, "required": ["kind"],
    "properties": {"kind": {"enum": [k.value for k in ProfileKind]},
                   "params": {"type": "object"}},
}
_policy = {
    "anyOf": [
        {"type": "string"},
        {"type": "object", "additionalProperties": False, "required": ["kind"],
         "properties": {"kind": {"enum": [k.value for k in PolicyKind]}, "d": _count}},
    ],
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["system"],
    "properties": {
        "system": {
            "type": "object", "additionalProperties": False,
            "required": ["buffer_b", "profile"],
            "properties": {"n": _count, "alpha": _number, "lambda": _number,
                           "buffer_b": _count, "profile": _profile},
            "not": {"required": ["alpha", "lambda"]},
        },
        "run": {
            "type": "object", "additionalProperties": False,
            "properties": {"horizon_events": _count, "warmup_events": _count, "batches": _count,
                           "seed": _count, "replications": _count,
                           "initial": {"enum": ["empty", "busy", "full"]},
                           "moments": {"type": "array", "items": {"type": "string"}}},
        },
        "policy": _policy,
        "probes": {"type": "array", "items": {"type": "string"}},
        "sweep": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_grid": {"type": "array", "items": _count},
                           "alpha_grid": {"type": "array", "items": _number},
                           "lambda_grid": {"type": "array", "items": _number},
                           "profiles": {"type": "array", "items": _profile},
                           "policies": {"type": "array", "items": _policy},
                           "metric": {"type": "string"}},
        },
        "drift": {
            "type": "object", "additionalProperties": False,
            "properties": {"region": {"enum": ["all", "sample"]}, "samples": _count,
                           "seed": _count, "delta": _number, "r": _count},
        },
        "exact": {
            "type": "object", "additionalProperties": False,
            "properties": {"r_values": {"type": "array", "items": _count},
                           "etas": {"type": "array", "items": _number}},
        },
    },
}

_FLOAT_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def as_int(value, name: str, minimum: int | None = None) -> int:
    """Integers may be written as 1e7 or 1_000_000."""
    if isinstance(value, bool):
        raise ConfigError(f"{name}: expected an integer")
    if isinstance(value, str):
        text = value.strip().replace("_", "")
        if re.fullmatch(r"[+-]?\d+", text):
            value = int(text)
        elif _FLOAT_RE.match(text):
            value = float(text)
        else:
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if isinstance(value, float):
        if not value.is_integer():
            raise ConfigError(f"{name}: expected an integer, got {value}")
        value = int(value)
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name}: must be >= {minimum}, got {value}")
    return int(value)


def as_float(value, name: str) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{name}: expected a number")
    if isinstance(value, str):
        if not _FLOAT_RE.match(value.strip()):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        value = float(value)
    out = float(value)
    if not math.isfinite(out):
        raise ConfigError(f"{name}: must be finite")
    return out


# ---------------------------------------------------------------------------
# configuration


def apply_override(doc: dict, text: str) -> None:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value in {text!r}: {exc}") from exc
    parts = key.strip().split(".")
    node = doc
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node = nxt
    if value is None:
        node.pop(parts[-1], None)
    else:
        node[parts[-1]] = value
    # an explicit load in one form replaces the other
    if parts[-1] in ("alpha", "lambda") and parts[:-1] == ["system"]:
        node.pop("lambda" if parts[-1] == "alpha" else "alpha", None)


def load_config(path, overrides=()) -> dict:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    doc = copy.deepcopy(doc)
    for o in overrides:
        apply_override(doc, o)
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    return doc


def _profile_doc(doc: dict) -> dict:
    p = doc["system"]["profile"]
    return {"kind": p["kind"], "params": dict(p.get("params") or {})}


def system_from(doc: dict, n: int | None = None, alpha: float | None = None,
                lam: float | None = None) -> SystemConfig:
    s = doc["system"]
    if n is None:
        if "n" not in s:
            raise ConfigError("system.n is required")
        n = as_int(s["n"], "system.n", 1)
    if alpha is None and lam is None:
        if "alpha" in s:
            alpha = as_float(s["alpha"], "system.alpha")
        elif "lambda" in s:
            lam = as_float(s["lambda"], "system.lambda")
        else:
            raise ConfigError("system needs alpha or lambda")
    prof = _profile_doc(doc)
    profile = make_profile(prof["kind"], prof["params"], n)
    return SystemConfig(n, as_int(s["buffer_b"], "system.buffer_b", 1), profile, alpha, lam)


def policy_from(value) -> PolicySpec:
    if value is None:
        return PolicySpec(PolicyKind.JFSQ)
    if isinstance(value, str):
        return PolicySpec.parse(value)
    return PolicySpec(PolicyKind(value["kind"]), as_int(value.get("d", 0), "policy.d", 0))


def run_section(doc: dict) -> dict:
    r = doc.get("run", {})
    out = {
        "horizon_events": as_int(r.get("horizon_events", 1_000_000), "run.horizon_events", 1),
        "warmup_events": None if r.get("warmup_events") is None
        else as_int(r["warmup_events"], "run.warmup_events", 0),
        "batches": as_int(r.get("batches", 32), "run.batches", 2),
        "seed": as_int(r.get("seed", 0), "run.seed", 0),
        "replications": as_int(r.get("replications", 1), "run.replications", 1),
        "initial": r.get("initial", "empty"),
        "moments": None if r.get("moments") is None else tuple(MomentSpec.parse(m) for m in r["moments"]),
    }
    if out["seed"] >= 2 ** 64:
        raise ConfigError("run.seed must fit in 64 bits")
    return out


def run_spec_from(doc: dict, config: SystemConfig | None = None) -> tuple:
    config = config or system_from(doc)
    r = run_section(doc)
    probes = tuple(ProbeSpec.parse(p) for p in doc.get("probes", []))
    spec = RunSpec(config, policy_from(doc.get("policy")), r["horizon_events"], r["warmup_events"],
                   r["batches"], r["seed"], probes, r["moments"], r["initial"])
    return spec, r["replications"]


def _out_dir(path) -> Path:
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    doc = load_config(args.config, args.override)
    spec, reps = run_spec_from(doc)
    metrics = replicate(spec, reps)
    out = _out_dir(args.out)
    config, policy = spec.config, spec.policy
    write_csv(out / "results.csv", metric_rows(config, policy, spec.seed, metrics.metric_items(), "sim"))
    prov = {"config_hash": config_hash(config, policy), "seed": spec.seed, "commit": commit_id(),
            "replications": reps, "horizon_events": spec.horizon_events,
            "warmup_events": spec.warmup_events, "batches": spec.batches}
    write_json(out / "results.json", [run_document(
        config, policy, spec.seed, metrics, "sim", provenance=prov,
        assumptions=check_assumptions(config).to_dict())])
    print(f"p_wait = {metrics.p_wait.value:.6g} +/- {metrics.p_wait.stderr:.2g}, "
          f"E[W] = {metrics.mean_wait.value:.6g} +/- {metrics.mean_wait.stderr:.2g}")
    return EXIT_OK


def _exact_checks(dist, config: SystemConfig, doc: dict) -> list:
    ex = doc.get("exact", {})
    r_values = [as_int(r, "exact.r_values", 1) for r in ex.get("r_values", [1, 2, 3])]
    etas = [as_float(e, "exact.etas") for e in ex.get("etas", [0.0, 0.5, 1.0])]
    items = []
    for r in r_values:
        grid = list(etas)
        if config.alpha is not None:
            try:
                grid.append(MomentSpec(r, config.regime.value).eta(config))
            except ConfigError:
                pass
        for eta in grid:
            items.append((f"stein_identity[r={r},eta={eta:g}]",
                          estimate(stein_identity_check(dist, config, r, eta))))
            rep = moment_inequality_check(dist, config, None, r, eta)
            tag = f"[r={r},eta={eta:g}]"
            items += [(f"moment_inequality_lhs{tag}", estimate(rep.lhs)),
                      (f"moment_inequality_rhs{tag}", estimate(rep.rhs)),
                      (f"moment_inequality_holds{tag}", estimate(1.0 if rep.holds else 0.0))]
    return items


def cmd_exact(args) -> int:
    doc = load_config(args.config, args.override)
    config = system_from(doc)
    policy = policy_from(doc.get("policy"))
    dist = stationary(config, policy)
    probes = tuple(ProbeSpec.parse(p) for p in doc.get("probes", []))
    moments = run_section(doc)["moments"]
    metrics = exact_metrics(dist, config, policy, moments, probes)
    extra = _exact_checks(dist, config, doc)
    seed = run_section(doc)["seed"]
    out = _out_dir(args.out)
    items = list(metrics.metric_items()) + extra
    write_csv(out / "results.csv", metric_rows(config, policy, seed, items, "exact"))
    write_json(out / "results.json", [run_document(
        config, policy, seed, metrics, "exact", extra,
        provenance={"config_hash": config_hash(config, policy), "commit": commit_id(),
                    "states": int(len(dist.pi)), "residual": dist.residual,
                    "solver": dist.method})])
    print(f"exact p_wait = {metrics.p_wait.value:.10g}, E[W] = {metrics.mean_wait.value:.10g} "
          f"({len(dist.pi)} states, residual {dist.residual:.1e})")
    return EXIT_OK


def sweep_spec_from(doc: dict) -> SweepSpec:
    if "sweep" not in doc:
        raise ConfigError("config has no sweep section")
    sw = doc["sweep"]
    r = run_section(doc)
    n_grid = tuple(as_int(n, "sweep.n_grid", 1) for n in sw.get("n_grid", []))
    alpha_grid = tuple(as_float(a, "sweep.alpha_grid") for a in sw.get("alpha_grid", []))
    lambda_grid = tuple(as_float(a, "sweep.lambda_grid") for a in sw.get("lambda_grid", []))
    if not alpha_grid and not lambda_grid:
        s = doc["system"]
        if "alpha" in s:
            alpha_grid = (as_float(s["alpha"], "system.alpha"),)
        elif "lambda" in s:
            lambda_grid = (as_float(s["lambda"], "system.lambda"),)
    profiles = tuple({"kind": p["kind"], "params": dict(p.get("params") or {})}
                     for p in sw.get("profiles", [])) or (_profile_doc(doc),)
    policies = tuple(policy_from(p) for p in sw.get("policies", [])) or (policy_from(doc.get("policy")),)
    return SweepSpec(n_grid, alpha_grid, profiles, policies,
                     as_int(doc["system"]["buffer_b"], "system.buffer_b", 1),
                     r["horizon_events"], r["warmup_events"], r["batches"], r["seed"],
                     r["replications"], tuple(ProbeSpec.parse(p) for p in doc.get("probes", [])),
                     r["moments"], r["initial"], lambda_grid)


def _series_label(key) -> str:
    profile, policy, load, b = key
    return f"{policy} {profile} {load} b={b}"


def cmd_sweep(args) -> int:
    doc = load_config(args.config, args.override)
    spec = sweep_spec_from(doc)
    metric = args.metric or doc["sweep"].get("metric", "p_wait")
    rows = run_sweep(spec)
    out = _out_dir(args.out)
    csv_rows, docs = [], []
    for row in rows:
        p = row.point
        if row.ok:
            csv_rows += metric_rows(p.config, p.spec.policy, p.spec.seed, row.metrics.metric_items(), "sim")
        docs.append(run_document(p.config, p.spec.policy, p.spec.seed, row.metrics, "sim",
                                 provenance=row.provenance, error=row.error,
                                 assumptions={"flagged": row.flagged}))
    write_csv(out / "sweep.csv", csv_rows)
    write_json(out / "sweep.json", docs)
    for row in rows:
        if not row.ok:
            print(f"point {row.point.index} (N={row.point.config.n}) failed: {row.error}", file=sys.stderr)
    fits, failed = [], []
    groups = series_of(rows)
    for key, members in groups.items():
        entry = {"series": _series_label(key)}
        try:
            entry.update(fit_exponent(members, metric).to_dict())
        except FitError as exc:
            entry.update({"metric": metric, "error": str(exc)})
            failed.append(str(exc))
        except KeyError:
            raise ConfigError(f"unknown metric {metric!r}")
        fits.append(entry)
    Path(out / "fits.json").write_text(json.dumps({"metric": metric, "fits": fits}, indent=2,
                                                  sort_keys=True, default=_json_default) + "\n")
    if args.plot:
        series = {}
        for key, members in groups.items():
            series[_series_label(key)] = [(m.point.config.n, m.metrics.get(metric).value)
                                          for m in members if m.ok]
        (out / "sweep.svg").write_text(loglog_svg(series, "N", metric))
    for f in fits:
        if "slope" in f:
            print(f"{f['series']}: slope {f['slope']:.3f} (predicted {f['predicted_exponent']}), "
                  f"r^2 {f['r_squared']:.3f}")
    if failed:
        for msg in failed:
            print(f"fit failed: {msg}", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


def _json_default(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    raise TypeError(type(x).__name__)


def cmd_drift_check(args) -> int:
    if args.lemma not in LEMMAS:
        raise ConfigError(f"unknown lemma {args.lemma!r}; expected one of {', '.join(LEMMAS)}")
    doc = load_config(args.config, args.override)
    config = system_from(doc)
    policy = policy_from(doc.get("policy"))
    d = doc.get("drift", {})
    region = RegionSpec(d.get("region", "all"), as_int(d.get("samples", 100_000), "drift.samples", 1),
                        as_int(d.get("seed", 0), "drift.seed", 0))
    delta = as_float(d["delta"], "drift.delta") if "delta" in d else None
    r = as_int(d.get("r", 1), "drift.r", 1)
    report = drift_check(args.lemma, config, policy, region, delta, r)
    out = _out_dir(args.out)
    body = report.to_dict()
    body["system"] = {"n": config.n, "lambda": config.lam, "alpha": config.alpha,
                      "buffer_b": config.buffer_b, "profile": config.profile.to_dict()}
    body["policy"] = str(policy)
    c = constants(config, r)
    body["constants"] = {k: getattr(c, k) for k in ("nu", "k_sub", "k_super", "c0", "c1", "n2", "r")}
    (out / f"drift_{args.lemma}.json").write_text(
        json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n")
    print(f"{args.lemma}: checked {report.checked}, violations {report.violations}, "
          f"side conditions {'hold' if report.side_conditions_hold else 'fail'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jfsqlab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. system.n=100 (repeatable)")
        p.add_argument("--out", default=".", metavar="DIR", help="output directory")

    p = sub.add_parser("simulate", help="simulate and estimate steady-state metrics")
    common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("exact", help="solve a small system exactly")
    common(p)
    p.set_defaults(func=cmd_exact)
    p = sub.add_parser("sweep", help="run a grid and fit scaling exponents")
    common(p)
    p.add_argument("--metric", help="metric to fit and plot (default p_wait)")
    p.add_argument("--plot", action="store_true", help="also write sweep.svg")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("drift-check", help="verify a Lyapunov drift bound on premise states")
    common(p)
    p.add_argument("--lemma", required=True, help=f"one of {', '.join(LEMMAS)}")
    p.set_defaults(func=cmd_drift_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except JfsqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
