"""Estimand reports: construction, rendering and JSON round-trips."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .design import Structure

__all__ = ["Scale", "EstimateRow", "EstimandReport", "make_row", "render", "Z95", "SCHEMA"]

Z95 = 1.959963984540054
SCHEMA = "swedge-report/1"


class Scale(str, Enum):
    DIFFERENCE = "difference"
    RISK_RATIO = "rr"
    ODDS_RATIO = "or"

    @classmethod
    def parse(cls, value) -> "Scale":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("_", "-")
        aliases = {"diff": "difference", "risk-ratio": "rr", "riskratio": "rr",
                   "odds-ratio": "or", "oddsratio": "or"}
        try:
            return cls(aliases.get(v, v))
        except ValueError:
            raise ValueError(f"unknown scale {value!r}") from None

    @property
    def is_ratio(self) -> bool:
        return self is not Scale.DIFFERENCE

    @property
    def symbol(self) -> str:
        return "Δ" if self is Scale.DIFFERENCE else "Φ"


@dataclass
class EstimateRow:
    """One estimate with its standard errors and 95% interval.

    On ratio scales ``estimate`` and the interval are on the ratio scale,
    ``log_se`` is the standard error of the log ratio, and ``se_robust``
    is its delta-method counterpart on the ratio scale.
    """

    label: str
    estimate: float
    se_robust: float
    se_model: float | None
    ci_lo: float
    ci_hi: float
    log_se: float | None = None
    weights: list | None = None

    def covers(self, value: float) -> bool:
        return self.ci_lo <= value <= self.ci_hi


def make_row(label, estimate, se_robust, se_model, scale, weights=None) -> EstimateRow:
    """Build a row; on ratio scales ``estimate`` and SEs are log-scale."""
    scale = Scale.parse(scale)
    est = float(estimate)
    se = float(se_robust)
    sm = None if se_model is None or not np.isfinite(se_model) else float(se_model)
    w = None if weights is None else [float(v) for v in np.asarray(weights).ravel()]
    if scale.is_ratio:
        r = math.exp(est)
        return EstimateRow(label, r, r * se, None if sm is None else r * sm,
                           math.exp(est - Z95 * se), math.exp(est + Z95 * se), se, w)
    return EstimateRow(label, est, se, sm, est - Z95 * se, est + Z95 * se, None, w)


@dataclass
class EstimandReport:
    structure: Structure
    scale: Scale
    components: list
    summaries: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    tests: list = field(default_factory=list)

    def rows(self) -> list:
        return list(self.components) + list(self.summaries)

    def __getitem__(self, label: str) -> EstimateRow:
        for row in self.rows():
            if row.label == label:
                return row
        raise KeyError(label)

    def labels(self) -> list:
        return [r.label for r in self.rows()]

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "structure": self.structure.value, "scale": self.scale.value,
                "components": [asdict(r) for r in self.components],
                "summaries": [asdict(r) for r in self.summaries],
                "provenance": self.provenance, "tests": self.tests}

    @classmethod
    def from_dict(cls, d: dict) -> "EstimandReport":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(structure=Structure.parse(d["structure"]), scale=Scale.parse(d["scale"]),
                   components=[EstimateRow(**r) for r in d["components"]],
                   summaries=[EstimateRow(**r) for r in d["summaries"]],
                   provenance=d.get("provenance", {}), tests=d.get("tests", []))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False, default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "EstimandReport":
        return cls.from_dict(json.loads(text))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Enum):
        return obj.value
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _fmt(v, digits=3):
    return "" if v is None else f"{v:.{digits}f}"


def render(report: EstimandReport, fmt: str = "table") -> str:
    """Render as an aligned text table, JSON or CSV."""
    if fmt == "json":
        return report.to_json() + "\n"
    header = ["label", "estimate", "se_robust", "se_model", "ci_lo", "ci_hi"]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind"] + header)
        for kind, rows in (("component", report.components), ("summary", report.summaries)):
            for r in rows:
                w.writerow([kind, r.label, repr(r.estimate), repr(r.se_robust),
                            "" if r.se_model is None else repr(r.se_model),
                            repr(r.ci_lo), repr(r.ci_hi)])
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [f"structure: {report.structure.value}   scale: {report.scale.value}"]
    prov = report.provenance
    if prov:
        keys = ("estimator", "correlation", "link", "n_clusters", "n_records")
        lines.append("   ".join(f"{k}: {prov[k]}" for k in keys if k in prov))
    body = [[r.label, _fmt(r.estimate), _fmt(r.se_robust), _fmt(r.se_model),
             _fmt(r.ci_lo), _fmt(r.ci_hi)] for r in report.rows()]
    widths = [max(len(h), *(len(b[k]) for b in body)) if body else len(h)
              for k, h in enumerate(header)]
    lines.append("  ".join(h.ljust(widths[k]) for k, h in enumerate(header)))
    for n, b in enumerate(body):
        if n == len(report.components) and report.summaries:
            lines.append("  ".join("-" * wd for wd in widths))
        lines.append("  ".join(v.ljust(widths[k]) for k, v in enumerate(b)))
    for t in report.tests:
        lines.append(f"LRT {t['restricted']} vs {t['general']}: statistic={t['statistic']:.3f} "
                     f"df={t['df']} p={t['p_value']:.4f} (periods 1..{t['periods_used']})")
    return "\n".join(lines) + "\n"
