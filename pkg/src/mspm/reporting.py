"""Strategy comparison tables, plot-data series and the JSON run report."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .metrics import MetricBundle, drawdown_series
from .sam import Ledger

SCHEMA_VERSION = 1
TABLE_METRICS = ("DRR (%)", "ARR (%)", "MD (%)", "SR")

# Published full-scale figure for the signal-agent ablation; kept only as
# context because it depends on subscription data and full-length training.
REFERENCE_ABLATION_GAP = "at least 1341.8%"


class ReportError(RuntimeError):
    pass


@dataclass
class Comparison:
    strategies: list[str]
    dates: np.ndarray
    table: dict[str, dict[str, float | None]]  # metric -> strategy -> value (full precision)
    best: dict[str, list[str]]  # metric -> winning strategies
    values: dict[str, np.ndarray]  # strategy -> p_t per ledger date
    underwater: dict[str, np.ndarray]  # strategy -> drawdown % per ledger date


def _table_row(bundle: MetricBundle) -> dict[str, float | None]:
    return {"DRR (%)": bundle.drr_pct, "ARR (%)": bundle.arr_pct, "MD (%)": bundle.max_drawdown_pct,
            "SR": bundle.sortino}


def compare(ledgers: dict[str, Ledger]) -> Comparison:
    """Table of DRR/ARR/MD/SR per strategy with the best cell(s) per metric."""
    if not ledgers:
        raise ReportError("nothing to compare")
    names = list(ledgers)
    ref = ledgers[names[0]]
    for name in names[1:]:
        if not np.array_equal(ledgers[name].dates, ref.dates):
            raise ReportError(f"ledger dates of {name} do not match {names[0]}")
    rows = {name: _table_row(led.metrics()) for name, led in ledgers.items()}
    table = {m: {name: rows[name][m] for name in names} for m in TABLE_METRICS}
    best = {}
    for m, cells in table.items():
        vals = {k: v for k, v in cells.items() if v is not None}
        if not vals:
            best[m] = []
            continue
        # larger is better for all four: MD is <= 0, so its best is the least negative
        top = max(vals.values())
        best[m] = [k for k, v in vals.items() if v == top]
    values = {name: led.values.copy() for name, led in ledgers.items()}
    underwater = {name: drawdown_series(led.value_series())[1:] for name, led in ledgers.items()}
    return Comparison(names, ref.dates.copy(), table, best, values, underwater)


def write_comparison(cmp: Comparison, directory: Path, stem: str) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    table = directory / f"{stem}.table.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric"] + cmp.strategies + ["best"])
        for m in TABLE_METRICS:
            cells = ["" if cmp.table[m][s] is None else repr(float(cmp.table[m][s])) for s in cmp.strategies]
            w.writerow([m] + cells + [";".join(cmp.best[m])])
    out = [table]
    for kind, series in (("values", cmp.values), ("underwater", cmp.underwater)):
        path = directory / f"{stem}.{kind}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date"] + cmp.strategies)
            for i, d in enumerate(cmp.dates):
                w.writerow([str(d)] + [repr(float(series[s][i])) for s in cmp.strategies])
        out.append(path)
    return out


def comparison_json(cmp: Comparison) -> dict:
    return {"strategies": cmp.strategies, "table": cmp.table, "best": cmp.best,
            "first_date": str(cmp.dates[0]), "last_date": str(cmp.dates[-1]), "days": int(len(cmp.dates))}


# --- JSON report ------------------------------------------------------------

_NUM = {"type": ["number", "null"]}
_BUNDLE = {
    "type": "object",
    "required": ["drr_pct", "arr_pct", "sortino", "max_drawdown_pct", "raw_mean_gross", "raw_value_ratio"],
    "properties": {k: _NUM for k in ("drr_pct", "arr_pct", "sortino", "max_drawdown_pct", "raw_mean_gross",
                                     "raw_value_ratio", "final_value")},
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "engine_version", "status", "missing_stages", "config_digest", "config",
                 "eam", "portfolios", "digest"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "engine_version": {"type": "string"},
        "status": {"enum": ["complete", "incomplete"]},
        "missing_stages": {"type": "array", "items": {"type": "string"}},
        "config_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "config": {"type": "object"},
        "eam": {
            "type": "object",
            "properties": {
                "training_runs": {"type": "array", "items": {"type": "string"}},
                "foundational": {"type": ["string", "null"]},
                "positions": {"type": "object"},
            },
        },
        "portfolios": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {
                    "symbols": {"type": "array", "items": {"type": "string"}},
                    "metrics": {"type": "object", "additionalProperties": _BUNDLE},
                    "validation": _BUNDLE,
                    "comparison": {"type": "object"},
                    "stats": {"type": "object"},
                    "ablation": {
                        "type": "object",
                        "required": ["enabled", "disabled", "arr_gap_pct", "enabled_exceeds_disabled",
                                     "reference_gap"],
                        "properties": {"enabled": _BUNDLE, "disabled": _BUNDLE,
                                       "arr_gap_pct": {"type": "number"},
                                       "enabled_exceeds_disabled": {"type": "boolean"}},
                    },
                },
                "required": ["symbols"],
            },
        },
        "digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
    },
}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def report_digest(report: dict) -> str:
    body = {k: v for k, v in report.items() if k != "digest"}
    return hashlib.sha256(canonical_json(body)).hexdigest()


def finalize_report(report: dict) -> dict:
    """Stamp the digest and validate against the schema."""
    report = dict(report)
    report["digest"] = report_digest(report)
    validate_report(report)
    return report


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ReportError(f"report does not match schema: {exc.message}") from None
    if report["digest"] != report_digest(report):
        raise ReportError("report digest does not match its content")


def write_report(report: dict, path: Path) -> None:
    path.write_text(json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n")


def read_report(path: Path) -> dict:
    report = json.loads(Path(path).read_text())
    validate_report(report)
    return report
