"""Result tables: normalized ratios, best-placement summary, correlations.

All tables exist in two serializations that round trip losslessly:
CSV (one header line, repr-shortest floats) and JSON ({"rows": [...],
"meta": {...}}). The CSV schemas are part of the tool's interface and
are frozen as module constants below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Callable, Iterable, Sequence

from . import stats
from .bench import IterationResult, RunSeries
from .errors import ConfigError
from .gclog import fmt_num
from .topology import HardwareConfig, parse_config_name

NORMALIZED_HEADER = "comparison,benchmark,metric,ratio,bucket"
BEST_HEADER = "benchmark,comparison,best_ratio"
CORRELATION_HEADER = "metric_a,metric_b,r,class"
RSD_HEADER = "benchmark,config,rsd,flagged"
LATENCY_HEADER = "config,q1,q3,mean,iqr,p999,outliers"

BUCKET_LOW = 0.5
BUCKET_HIGH = 2.0
RSD_FLAG_PCT = 5.0


@dataclass(frozen=True)
class ComparisonName:
    """A placement pair written numerator/denominator, e.g. 8E/4P."""

    numerator: HardwareConfig
    denominator: HardwareConfig

    @property
    def text(self) -> str:
        return f"{self.numerator.name}/{self.denominator.name}"

    @classmethod
    def parse(cls, text: str, mutator_pcore_count: int = 4) -> "ComparisonName":
        parts = text.split("/")
        if len(parts) != 2:
            raise ConfigError(f"comparison {text!r} must be <config>/<config>")
        return cls(
            parse_config_name(parts[0], mutator_pcore_count),
            parse_config_name(parts[1], mutator_pcore_count),
        )


def bucket(ratio: float) -> float:
    """Clamp a ratio into [0.5, 2.0] for plotting on a bounded axis."""
    return min(max(ratio, BUCKET_LOW), BUCKET_HIGH)


# --- metric extraction ------------------------------------------------------


def _metric_field(name: str) -> Callable[[IterationResult], float | None]:
    def get(it: IterationResult) -> float | None:
        if name == "exec_ms":
            return it.exec_ms
        if name.startswith("energy_"):
            return it.energy_j.get(name[len("energy_") : -2])  # strip _j suffix
        if it.metrics is None:
            return None
        return getattr(it.metrics, name, None)

    return get


METRIC_NAMES = (
    "exec_ms",
    "energy_pkg_j",
    "energy_pp0_j",
    "num_cycles",
    "num_minor",
    "num_major",
    "gc_time_ms",
    "mark_time_ms",
    "relocate_time_ms",
    "gc_activity",
    "avg_workers",
    "heap_per_worker_mb",
    "stall_count",
    "latency_p999_ms",
)


def invocation_values(series: RunSeries, metric: str) -> list[float]:
    """One value per invocation: mean across its measured iterations.

    latency_p999_ms pools all measured-iteration samples of the invocation
    before taking the percentile, because tail quantiles of per-iteration
    subsamples do not average into the invocation quantile.
    """
    if metric not in METRIC_NAMES:
        raise ConfigError(f"unknown metric {metric!r}")
    out: list[float] = []
    for inv in series.invocations:
        measured = [it for it in inv.iterations if it.measured]
        if metric == "latency_p999_ms":
            pooled = [v for it in measured for v in it.latency_ms]
            if pooled:
                out.append(stats.percentile(pooled, 99.9))
            continue
        getter = _metric_field(metric)
        vals = [v for it in measured if (v := getter(it)) is not None]
        if vals:
            out.append(fmean(vals))
    return out


def ratio_of(numerator: RunSeries, denominator: RunSeries, metric: str) -> float:
    num = invocation_values(numerator, metric)
    den = invocation_values(denominator, metric)
    if not num or not den:
        raise ConfigError(f"metric {metric!r} has no values to compare")
    dm = fmean(den)
    if dm == 0:
        raise ConfigError(f"metric {metric!r} baseline mean is zero")
    return fmean(num) / dm


# --- tables -----------------------------------------------------------------


@dataclass(frozen=True)
class NormalizedRow:
    comparison: str
    benchmark: str
    metric: str
    ratio: float

    @property
    def bucket(self) -> float:
        return bucket(self.ratio)


def normalized_rows(
    benchmark: str,
    series_by_config: dict[str, RunSeries],
    baseline: str,
    metrics: Sequence[str] = METRIC_NAMES,
) -> list[NormalizedRow]:
    if baseline not in series_by_config:
        raise ConfigError(f"baseline config {baseline!r} has no series")
    base = series_by_config[baseline]
    rows = []
    for config, series in series_by_config.items():
        if config == baseline:
            continue
        for metric in metrics:
            try:
                r = ratio_of(series, base, metric)
            except ConfigError:
                continue  # metric absent on one side, e.g. no energy backend
            rows.append(NormalizedRow(f"{config}/{baseline}", benchmark, metric, r))
    return rows


@dataclass(frozen=True)
class BestRow:
    benchmark: str
    comparison: str
    best_ratio: float


@dataclass
class MaxReductionTable:
    """Per benchmark the winning comparison(s); ties produce one row each
    and credit every tied comparison's win count."""

    rows: list[BestRow]
    win_counts: dict[str, int]
    geomean_best: float


def max_reduction_table(ratios: dict[str, dict[str, float]]) -> MaxReductionTable:
    rows: list[BestRow] = []
    win_counts: dict[str, int] = {}
    best_values: list[float] = []
    for benchmark, by_comparison in ratios.items():
        if not by_comparison:
            raise ConfigError(f"benchmark {benchmark!r} has no comparisons")
        for comparison in by_comparison:
            win_counts.setdefault(comparison, 0)
        best = min(by_comparison.values())
        best_values.append(best)
        for comparison, value in by_comparison.items():
            if value == best:
                rows.append(BestRow(benchmark, comparison, value))
                win_counts[comparison] += 1
    return MaxReductionTable(rows, win_counts, stats.geomean(best_values))


@dataclass(frozen=True)
class CorrelationRow:
    metric_a: str
    metric_b: str
    r: float

    @property
    def band(self) -> str:
        return stats.classify_corr(self.r)


@dataclass
class CorrelationTable:
    rows: list[CorrelationRow]
    excluded: list[str] = field(default_factory=list)  # constant metrics


def correlation_table(metrics: dict[str, Sequence[float]]) -> CorrelationTable:
    """All unordered metric pairs; constant series are excluded, not errors."""
    names = []
    excluded = []
    for name, values in metrics.items():
        values = list(values)
        if len(values) < 2:
            raise ConfigError(f"metric {name!r} needs at least 2 values")
        if all(v == values[0] for v in values):
            excluded.append(name)
        else:
            names.append(name)
    lengths = {len(metrics[n]) for n in names}
    if len(lengths) > 1:
        raise ConfigError("metric series differ in length")
    rows = [
        CorrelationRow(a, b, stats.pearson(metrics[a], metrics[b]))
        for i, a in enumerate(names)
        for b in names[i + 1 :]
    ]
    return CorrelationTable(rows, excluded)


@dataclass(frozen=True)
class RsdRow:
    benchmark: str
    config: str
    rsd: float

    @property
    def flagged(self) -> bool:
        return self.rsd > RSD_FLAG_PCT


def rsd_table(values: dict[str, dict[str, Sequence[float]]]) -> list[RsdRow]:
    return [
        RsdRow(benchmark, config, stats.rsd(list(xs)))
        for benchmark, by_config in values.items()
        for config, xs in by_config.items()
    ]


@dataclass(frozen=True)
class LatencyRow:
    config: str
    box: stats.BoxplotStats
    p999: float


def latency_table(latencies: dict[str, Sequence[float]]) -> list[LatencyRow]:
    return [
        LatencyRow(config, stats.boxplot_stats(list(xs)), stats.percentile(list(xs), 99.9))
        for config, xs in latencies.items()
    ]


# --- serialization ----------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt_num(v)
    return str(v)


def normalized_csv(rows: Sequence[NormalizedRow]) -> str:
    lines = [NORMALIZED_HEADER]
    lines += [
        ",".join(_cell(v) for v in (r.comparison, r.benchmark, r.metric, r.ratio, r.bucket))
        for r in rows
    ]
    return "\n".join(lines) + "\n"


def best_csv(table: MaxReductionTable) -> str:
    lines = [BEST_HEADER]
    lines += [
        ",".join(_cell(v) for v in (r.benchmark, r.comparison, r.best_ratio))
        for r in table.rows
    ]
    return "\n".join(lines) + "\n"


def correlation_csv(table: CorrelationTable) -> str:
    lines = [CORRELATION_HEADER]
    lines += [
        ",".join(_cell(v) for v in (r.metric_a, r.metric_b, r.r, r.band))
        for r in table.rows
    ]
    return "\n".join(lines) + "\n"


def rsd_csv(rows: Sequence[RsdRow]) -> str:
    lines = [RSD_HEADER]
    lines += [
        ",".join(_cell(v) for v in (r.benchmark, r.config, r.rsd, r.flagged))
        for r in rows
    ]
    return "\n".join(lines) + "\n"


def latency_csv(rows: Sequence[LatencyRow]) -> str:
    lines = [LATENCY_HEADER]
    for r in rows:
        outliers = ";".join(fmt_num(v) for v in r.box.outliers)
        lines.append(
            ",".join(
                _cell(v)
                for v in (r.config, r.box.q1, r.box.q3, r.box.mean, r.box.iqr, r.p999)
            )
            + f",{outliers}"
        )
    return "\n".join(lines) + "\n"


def normalized_json(rows: Sequence[NormalizedRow], meta: dict | None = None) -> str:
    doc = {
        "rows": [
            {
                "comparison": r.comparison,
                "benchmark": r.benchmark,
                "metric": r.metric,
                "ratio": r.ratio,
                "bucket": r.bucket,
            }
            for r in rows
        ],
        "meta": dict(meta or {}),
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def best_json(table: MaxReductionTable, meta: dict | None = None) -> str:
    doc = {
        "rows": [
            {"benchmark": r.benchmark, "comparison": r.comparison, "best_ratio": r.best_ratio}
            for r in table.rows
        ],
        "meta": {
            **(meta or {}),
            "win_counts": table.win_counts,
            "geomean_best": table.geomean_best,
        },
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def correlation_json(table: CorrelationTable, meta: dict | None = None) -> str:
    doc = {
        "rows": [
            {"metric_a": r.metric_a, "metric_b": r.metric_b, "r": r.r, "class": r.band}
            for r in table.rows
        ],
        "meta": {**(meta or {}), "excluded_constant": table.excluded},
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def rsd_json(rows: Sequence[RsdRow], meta: dict | None = None) -> str:
    doc = {
        "rows": [
            {
                "benchmark": r.benchmark,
                "config": r.config,
                "rsd": r.rsd,
                "flagged": r.flagged,
            }
            for r in rows
        ],
        "meta": {**(meta or {}), "flag_threshold_pct": RSD_FLAG_PCT},
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def latency_json(rows: Sequence[LatencyRow], meta: dict | None = None) -> str:
    doc = {
        "rows": [
            {
                "config": r.config,
                "q1": r.box.q1,
                "q3": r.box.q3,
                "mean": r.box.mean,
                "iqr": r.box.iqr,
                "whisker_low": r.box.whisker_low,
                "whisker_high": r.box.whisker_high,
                "p999": r.p999,
                "outliers": list(r.box.outliers),
            }
            for r in rows
        ],
        "meta": dict(meta or {}),
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def parse_csv(text: str) -> tuple[list[str], list[list[str]]]:
    """Split a report CSV into header names and row cells.

    Only the latency table has a list-valued column and it is
    semicolon-joined, so a plain comma split is exact.
    """
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        raise ConfigError("empty CSV")
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def write_report(
    out_dir: str | Path,
    normalized: Sequence[NormalizedRow] | None = None,
    best: MaxReductionTable | None = None,
    correlation: CorrelationTable | None = None,
    rsd_rows: Sequence[RsdRow] | None = None,
    latency: Sequence[LatencyRow] | None = None,
    meta: dict | None = None,
) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    pairs: list[tuple[str, str, str]] = []
    if normalized is not None:
        pairs.append(("normalized", normalized_csv(normalized), normalized_json(normalized, meta)))
    if best is not None:
        pairs.append(("best", best_csv(best), best_json(best, meta)))
    if correlation is not None:
        pairs.append(
            ("correlation", correlation_csv(correlation), correlation_json(correlation, meta))
        )
    if rsd_rows is not None:
        pairs.append(("rsd", rsd_csv(rsd_rows), rsd_json(rsd_rows, meta)))
    if latency is not None:
        pairs.append(("latency", latency_csv(latency), latency_json(latency, meta)))
    for name, csv_text, json_text in pairs:
        csv_path = out / f"{name}.csv"
        json_path = out / f"{name}.json"
        csv_path.write_text(csv_text)
        json_path.write_text(json_text)
        written += [csv_path, json_path]
    return written
