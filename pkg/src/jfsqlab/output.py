"""Result emission: CSV rows, schema-checked JSON documents, SVG log-log plots."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import jsonschema

from .metrics import Estimate, RunMetrics
from .model import SystemConfig
from .policy import PolicySpec

CSV_HEADER = ("n", "alpha", "lambda", "b", "policy", "profile", "seed",
              "metric", "estimate", "stderr", "method")

_num = {"type": ["number", "null"]}
RESULTS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "runs"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": "jfsqlab.results/1"},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["system", "policy", "seed", "method", "metrics"],
                "additionalProperties": False,
                "properties": {
                    "system": {
                        "type": "object",
                        "required": ["n", "alpha", "lambda", "buffer_b", "profile"],
                        "properties": {
                            "n": {"type": "integer", "minimum": 1},
                            "alpha": _num, "lambda": {"type": "number"},
                            "buffer_b": {"type": "integer", "minimum": 1},
                            "profile": {"type": "object"},
                        },
                    },
                    "policy": {"type": "string"},
                    "seed": {"type": "integer", "minimum": 0},
                    "method": {"enum": ["sim", "exact"]},
                    "metrics": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "object", "required": ["estimate", "stderr"],
                            "properties": {"estimate": _num, "stderr": _num},
                        },
                    },
                    "counts": {"type": "object", "additionalProperties": {"type": "integer"}},
                    "assumptions": {"type": "object"},
                    "provenance": {"type": "object"},
                    "error": {"type": ["string", "null"]},
                    "extra": {"type": "object"},
                },
            },
        },
    },
}


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def _clean(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


def metric_rows(config: SystemConfig, policy: PolicySpec, seed: int, items, method: str):
    """CSV rows for (metric, Estimate) pairs."""
    head = [config.n, config.alpha, config.lam, config.buffer_b, str(policy),
            config.profile.label(), seed]
    for name, est in items:
        yield [fmt(v) for v in head] + [name, fmt(float(est.value)), fmt(float(est.stderr)), method]


def write_csv(path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def run_document(config: SystemConfig, policy: PolicySpec, seed: int, metrics: RunMetrics | None,
                 method: str, extra_items=(), **fields) -> dict:
    doc = {
        "system": {"n": config.n, "alpha": config.alpha, "lambda": config.lam,
                   "buffer_b": config.buffer_b, "profile": config.profile.to_dict()},
        "policy": str(policy), "seed": int(seed), "method": method, "metrics": {},
    }
    items = list(metrics.metric_items()) if metrics is not None else []
    for name, est in list(items) + list(extra_items):
        doc["metrics"][name] = {"estimate": _clean(float(est.value)), "stderr": _clean(float(est.stderr))}
    if metrics is not None and metrics.counts:
        doc["counts"] = {k: int(v) for k, v in metrics.counts.items()}
    doc.update({k: v for k, v in fields.items() if v is not None})
    return doc


def validate_results(doc: dict) -> None:
    jsonschema.validate(doc, RESULTS_SCHEMA)


def write_json(path, runs) -> dict:
    doc = {"schema": "jfsqlab.results/1", "runs": list(runs)}
    validate_results(doc)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return doc


# ---------------------------------------------------------------------------
# SVG

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def loglog_svg(series: dict, xlabel: str = "N", ylabel: str = "", width: int = 640,
               height: int = 420) -> str:
    """``series`` maps label -> [(x, y), ...]; non-positive points are dropped."""
    clean = {k: sorted((x, y) for x, y in pts if x > 0 and y > 0 and math.isfinite(y))
             for k, pts in series.items()}
    allpts = [p for pts in clean.values() for p in pts]
    left, right, top, bottom = 70, 170, 20, 50
    pw, ph = width - left - right, height - top - bottom
    if allpts:
        xs = [math.log10(p[0]) for p in allpts]
        ys = [math.log10(p[1]) for p in allpts]
        x0, x1 = math.floor(min(xs)), math.ceil(max(xs))
        y0, y1 = math.floor(min(ys)), math.ceil(max(ys))
    else:
        x0, x1, y0, y1 = 0, 1, 0, 1
    x1, y1 = max(x1, x0 + 1), max(y1, y0 + 1)

    def sx(x):
        return left + (math.log10(x) - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (math.log10(y) - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>']
    for e in range(x0, x1 + 1):
        x = sx(10.0 ** e)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 5}" stroke="#000"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 18}" text-anchor="middle">1e{e}</text>')
    for e in range(y0, y1 + 1):
        y = sy(10.0 ** e)
        out.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="#000"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">1e{e}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{top + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2:.2f})">{escape(ylabel)}</text>')
    for i, (label, pts) in enumerate(clean.items()):
        colour = _COLOURS[i % len(_COLOURS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline class="series" fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{colour}"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def estimate(value, stderr=0.0) -> Estimate:
    return Estimate(float(value), float(stderr))
