import json
import math

import pytest

from ampgc import report, stats
from ampgc.bench import InvocationResult, IterationResult, RunPlan, RunSeries
from ampgc.errors import ConfigError
from ampgc.gclog import RunMetrics
from ampgc.report import (
    BEST_HEADER,
    CORRELATION_HEADER,
    LATENCY_HEADER,
    NORMALIZED_HEADER,
    RSD_HEADER,
    ComparisonName,
    bucket,
    correlation_table,
    invocation_values,
    latency_table,
    max_reduction_table,
    normalized_rows,
    parse_csv,
    ratio_of,
    rsd_table,
    write_report,
)

COMPARISONS = ("2P/4P", "4E/4P", "6E/4P", "8E/4P", "6E/2P", "8E/2P")

# Energy ratio survey over a 17-benchmark suite: per benchmark the best
# (lowest) normalized energy and the comparison(s) that achieved it.
# Ties are real: several placements often land on the same ratio.
BEST_BY_BENCHMARK = {
    "hazelcast_20": (0.83, {"4E/4P"}),
    "hazelcast_100": (0.87, {"4E/4P", "6E/4P"}),
    "luindex_def": (0.96, {"8E/4P"}),
    "lusearch_large_t4": (0.98, {"8E/4P", "8E/2P"}),
    "tomcat_def_t2": (0.96, {"4E/4P"}),
    "tomcat_large_t4": (0.98, {"4E/4P", "6E/4P", "8E/4P"}),
    "tomcat_def_t4": (0.98, {"6E/4P", "8E/4P", "6E/2P", "8E/2P"}),
    "lusearch_def_t4": (0.97, {"8E/4P", "8E/2P"}),
    "luindex_large": (0.98, {"4E/4P", "6E/4P"}),
    "lusearch_def_t2": (0.97, {"6E/4P", "8E/4P"}),
    "lusearch_large_t2": (0.99, {"4E/4P", "6E/2P", "8E/2P"}),
    "spring_def_t2": (0.96, {"6E/2P", "8E/2P"}),
    "biojava_large": (0.98, {"8E/2P"}),
    "tomcat_large_t2": (0.97, {"6E/2P", "8E/2P"}),
    "spring_large_t2": (0.95, {"8E/2P"}),
    "biojava_def": (0.94, {"8E/2P"}),
    "fop_def": (0.82, {"8E/2P"}),
}

EXPECTED_WINS = {"2P/4P": 0, "4E/4P": 6, "6E/4P": 5, "8E/4P": 6, "6E/2P": 4, "8E/2P": 10}


def survey_ratios() -> dict[str, dict[str, float]]:
    """Full benchmark x comparison matrix with the tie structure above."""
    table = {}
    for benchmark, (best, winners) in BEST_BY_BENCHMARK.items():
        row = {}
        filler = 1
        for comparison in COMPARISONS:
            if comparison in winners:
                row[comparison] = best
            else:
                row[comparison] = round(best + 0.011 * filler, 6)
                filler += 1
        table[benchmark] = row
    return table


def make_series(
    exec_values,
    energy_pkg=None,
    latency=None,
    config="4P",
    benchmark="bm",
) -> RunSeries:
    """Series with one measured iteration per listed value, one invocation
    per outer list element."""
    plan = RunPlan(
        benchmark=benchmark,
        config_name=config,
        target=("true",),
        heap_mb=64.0,
        invocations=len(exec_values),
        iterations=max(len(v) for v in exec_values),
        measured_tail=1,
    )
    series = RunSeries(plan=plan)
    for i, values in enumerate(exec_values):
        inv = InvocationResult(
            index=i, clean=True, oom=False, stall_count=0,
            steady_index=0, steady_reached=True,
        )
        for j, exec_ms in enumerate(values):
            it = IterationResult(index=j + 1, exec_ms=exec_ms, measured=True)
            if energy_pkg is not None:
                it.energy_j = {"pkg": energy_pkg[i][j]}
            if latency is not None:
                it.latency_ms = list(latency[i][j])
            it.metrics = RunMetrics(
                num_cycles=2, num_minor=1, num_major=1, gc_time_ms=30.0,
                mark_time_ms=20.0, relocate_time_ms=6.0, gc_activity=0.3,
                avg_workers=2.0, heap_per_worker_mb=32.0, stall_count=0,
                oom=False, wall_ms=exec_ms, heap_mb=64.0, activity_overflow=False,
            )
            inv.iterations.append(it)
        series.invocations.append(inv)
    return series


class TestComparisonName:
    def test_text_round_trips(self):
        c = ComparisonName.parse("8E/4P")
        assert c.text == "8E/4P"
        assert c.numerator.gc_core_count == 8
        assert c.numerator.gc_core_type.value == "E"

    @pytest.mark.parametrize("bad", ["8E", "8E/4P/2P", "XX/4P", "8E/0P"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(ConfigError):
            ComparisonName.parse(bad)


class TestBucket:
    def test_clamps_to_plot_range(self):
        assert bucket(0.3) == 0.5
        assert bucket(2.5) == 2.0
        assert bucket(0.93) == 0.93


class TestInvocationValues:
    def test_means_over_measured_iterations(self):
        s = make_series([[100.0, 104.0], [110.0, 112.0]])
        assert invocation_values(s, "exec_ms") == [102.0, 111.0]

    def test_unmeasured_iterations_ignored(self):
        s = make_series([[100.0, 104.0]])
        s.invocations[0].iterations[0].measured = False
        assert invocation_values(s, "exec_ms") == [104.0]

    def test_metric_from_gc_metrics(self):
        s = make_series([[100.0]])
        assert invocation_values(s, "mark_time_ms") == [20.0]
        assert invocation_values(s, "num_cycles") == [2.0]

    def test_energy_key_mapping(self):
        s = make_series([[100.0]], energy_pkg=[[7.5]])
        assert invocation_values(s, "energy_pkg_j") == [7.5]
        assert invocation_values(s, "energy_pp0_j") == []

    def test_latency_pools_before_percentile(self):
        lat = [[[1.0, 2.0], [3.0, 50.0]]]
        s = make_series([[100.0, 100.0]], latency=lat)
        pooled = [1.0, 2.0, 3.0, 50.0]
        assert invocation_values(s, "latency_p999_ms") == [
            stats.percentile(pooled, 99.9)
        ]

    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            invocation_values(make_series([[1.0]]), "wattage")


class TestRatioOf:
    def test_ratio_of_means(self):
        num = make_series([[90.0], [110.0]])  # mean 100
        den = make_series([[200.0], [200.0]])  # mean 200
        assert ratio_of(num, den, "exec_ms") == 0.5

    def test_missing_metric_raises(self):
        num = make_series([[90.0]])
        den = make_series([[200.0]])
        with pytest.raises(ConfigError):
            ratio_of(num, den, "energy_pkg_j")


class TestNormalizedRows:
    def test_rows_per_config_and_metric(self):
        by_config = {
            "4P": make_series([[200.0]], energy_pkg=[[10.0]], config="4P"),
            "8E": make_series([[100.0]], energy_pkg=[[8.0]], config="8E"),
        }
        rows = normalized_rows("bm", by_config, baseline="4P",
                               metrics=("exec_ms", "energy_pkg_j"))
        by_metric = {r.metric: r for r in rows}
        assert set(by_metric) == {"exec_ms", "energy_pkg_j"}
        assert by_metric["exec_ms"].comparison == "8E/4P"
        assert by_metric["exec_ms"].ratio == 0.5
        assert by_metric["energy_pkg_j"].ratio == 0.8

    def test_absent_metric_skipped_not_fatal(self):
        by_config = {
            "4P": make_series([[200.0]], config="4P"),  # no energy readings
            "8E": make_series([[100.0]], config="8E"),
        }
        rows = normalized_rows("bm", by_config, baseline="4P",
                               metrics=("exec_ms", "energy_pkg_j"))
        assert [r.metric for r in rows] == ["exec_ms"]

    def test_missing_baseline(self):
        with pytest.raises(ConfigError):
            normalized_rows("bm", {"8E": make_series([[1.0]])}, baseline="4P")


class TestMaxReduction:
    def test_survey_win_counts_and_geomean(self):
        table = max_reduction_table(survey_ratios())
        assert table.win_counts == EXPECTED_WINS
        # ties credit every winner, so counts exceed the benchmark count
        assert sum(table.win_counts.values()) == 31
        assert len(table.rows) == 31
        assert table.geomean_best == pytest.approx(0.9449764983919561, rel=1e-12)
        assert abs(table.geomean_best - 0.945) < 0.001

    def test_tie_produces_row_per_winner(self):
        table = max_reduction_table(survey_ratios())
        rows = [r for r in table.rows if r.benchmark == "tomcat_def_t4"]
        assert {r.comparison for r in rows} == {"6E/4P", "8E/4P", "6E/2P", "8E/2P"}
        assert all(r.best_ratio == 0.98 for r in rows)

    def test_all_comparisons_seeded_in_counts(self):
        table = max_reduction_table({"bm": {"a": 0.9, "b": 1.1}})
        assert table.win_counts == {"a": 1, "b": 0}

    def test_empty_benchmark_rejected(self):
        with pytest.raises(ConfigError):
            max_reduction_table({"bm": {}})


class TestCorrelationTable:
    def test_all_unordered_pairs(self):
        table = correlation_table(
            {
                "a": [1.0, 2.0, 3.0, 4.0],
                "b": [2.0, 4.1, 5.9, 8.2],
                "c": [9.0, 1.0, 7.0, 2.0],
            }
        )
        names = [(r.metric_a, r.metric_b) for r in table.rows]
        assert names == [("a", "b"), ("a", "c"), ("b", "c")]
        ab = table.rows[0]
        assert ab.r == stats.pearson([1.0, 2.0, 3.0, 4.0], [2.0, 4.1, 5.9, 8.2])
        assert ab.band == "High"
        assert table.excluded == []

    def test_constant_series_excluded(self):
        table = correlation_table(
            {"a": [1.0, 2.0, 3.0], "k": [5.0, 5.0, 5.0], "b": [3.0, 1.0, 2.0]}
        )
        assert table.excluded == ["k"]
        assert [(r.metric_a, r.metric_b) for r in table.rows] == [("a", "b")]

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            correlation_table({"a": [1.0, 2.0], "b": [1.0, 2.0, 3.0]})

    def test_too_short(self):
        with pytest.raises(ConfigError):
            correlation_table({"a": [1.0]})


class TestRsdTable:
    def test_values_and_flags(self):
        rows = rsd_table(
            {
                "bm1": {"4P": [100.0, 101.0, 99.0]},
                "bm2": {"8E": [100.0, 120.0, 80.0]},
            }
        )
        by_bm = {r.benchmark: r for r in rows}
        assert by_bm["bm1"].rsd == stats.rsd([100.0, 101.0, 99.0])
        assert not by_bm["bm1"].flagged
        assert by_bm["bm2"].flagged

    def test_flag_threshold_is_strict(self):
        assert report.RsdRow("b", "c", 6.36).flagged
        assert not report.RsdRow("b", "c", 4.95).flagged
        assert not report.RsdRow("b", "c", 5.0).flagged


class TestLatencyTable:
    def test_box_and_tail(self):
        samples = [10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0, 600.0]
        rows = latency_table({"4E": samples})
        (row,) = rows
        box = stats.boxplot_stats(samples)
        assert row.config == "4E"
        assert row.box == box
        assert row.p999 == stats.percentile(samples, 99.9)
        assert 600.0 in row.box.outliers


AWKWARD = [0.1 + 0.2, 1 / 3, 1e-7, 123456.789012345]


class TestSerialization:
    def test_normalized_csv_round_trip(self):
        rows = [
            report.NormalizedRow("8E/4P", "bm", "exec_ms", v) for v in AWKWARD
        ]
        header, cells = parse_csv(report.normalized_csv(rows))
        assert ",".join(header) == NORMALIZED_HEADER
        assert [float(c[3]) for c in cells] == AWKWARD
        assert [float(c[4]) for c in cells] == [bucket(v) for v in AWKWARD]

    def test_best_csv_and_json(self):
        table = max_reduction_table(survey_ratios())
        header, cells = parse_csv(report.best_csv(table))
        assert ",".join(header) == BEST_HEADER
        assert len(cells) == 31
        doc = json.loads(report.best_json(table, meta={"source": "unit"}))
        assert doc["meta"]["win_counts"] == EXPECTED_WINS
        assert doc["meta"]["geomean_best"] == table.geomean_best
        assert doc["meta"]["source"] == "unit"
        assert {row["benchmark"] for row in doc["rows"]} == set(BEST_BY_BENCHMARK)

    def test_correlation_csv_and_json(self):
        table = correlation_table(
            {"a": [1.0, 2.0, 3.0], "k": [5.0, 5.0, 5.0], "b": [2.0, 4.0, 6.5]}
        )
        header, cells = parse_csv(report.correlation_csv(table))
        assert ",".join(header) == CORRELATION_HEADER
        assert float(cells[0][2]) == table.rows[0].r
        assert cells[0][3] == table.rows[0].band
        doc = json.loads(report.correlation_json(table))
        assert doc["meta"]["excluded_constant"] == ["k"]
        assert doc["rows"][0]["r"] == table.rows[0].r

    def test_rsd_csv_and_json(self):
        rows = [report.RsdRow("bm", "4P", 6.36), report.RsdRow("bm", "8E", 4.95)]
        header, cells = parse_csv(report.rsd_csv(rows))
        assert ",".join(header) == RSD_HEADER
        assert cells[0][3] == "true"
        assert cells[1][3] == "false"
        doc = json.loads(report.rsd_json(rows))
        assert doc["meta"]["flag_threshold_pct"] == 5.0
        assert doc["rows"][0]["flagged"] is True

    def test_latency_csv_and_json(self):
        samples = [1.0, 2.0, 3.0, 4.0, 100.0]
        rows = latency_table({"4E": samples})
        header, cells = parse_csv(report.latency_csv(rows))
        assert ",".join(header) == LATENCY_HEADER
        assert float(cells[0][1]) == rows[0].box.q1
        assert float(cells[0][5]) == rows[0].p999
        outliers = [float(v) for v in cells[0][6].split(";") if v]
        assert outliers == list(rows[0].box.outliers)
        doc = json.loads(report.latency_json(rows))
        assert doc["rows"][0]["whisker_high"] == rows[0].box.whisker_high
        assert doc["rows"][0]["outliers"] == [100.0]

    def test_parse_csv_rejects_empty(self):
        with pytest.raises(ConfigError):
            parse_csv("")


class TestWriteReport:
    def test_writes_requested_tables(self, tmp_path):
        table = max_reduction_table(survey_ratios())
        paths = write_report(tmp_path, best=table, meta={"baseline": "4P"})
        assert sorted(p.name for p in paths) == ["best.csv", "best.json"]
        assert not (tmp_path / "normalized.csv").exists()

    def test_writes_all_five(self, tmp_path):
        rows = [report.NormalizedRow("8E/4P", "bm", "exec_ms", 0.9)]
        table = max_reduction_table({"bm": {"8E/4P": 0.9}})
        corr = correlation_table({"a": [1.0, 2.0, 3.0], "b": [3.0, 2.5, 1.0]})
        rsd_rows = [report.RsdRow("bm", "4P", 1.0)]
        lat = latency_table({"4P": [1.0, 2.0, 3.0]})
        paths = write_report(
            tmp_path, normalized=rows, best=table, correlation=corr,
            rsd_rows=rsd_rows, latency=lat,
        )
        names = sorted(p.name for p in paths)
        assert names == [
            "best.csv", "best.json", "correlation.csv", "correlation.json",
            "latency.csv", "latency.json", "normalized.csv", "normalized.json",
            "rsd.csv", "rsd.json",
        ]
        for p in paths:
            assert p.read_text().strip()
