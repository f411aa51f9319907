"""Command line driver.

Subcommands map one-to-one onto the workflow: inspect the machine
(topo), run a placement experiment (run), find the minimal stall-free
heap (heapsize), compare two persisted series (compare), correlate
metrics (corr), drive the built-in collector simulation as a benchmark
target (simulate), and render result tables (report).

Exit codes: 0 success, 2 configuration problem, 3 missing permissions,
4 target process failure, 5 no stall-free heap within the cap.
The environment variable AMPGC_BACKEND={os|mock|fixture} overrides the
configured pinning/energy backends, so CI can exercise the full paths
without affinity rights or hardware counters.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import random
import sys
from pathlib import Path
from statistics import fmean

from . import bench, gclog, rapl, report, stats
from .config import ExperimentConfig, load_config
from .errors import AmpgcError, ConfigError, PermissionDenied
from .simgc import SimParams, Simulator
from .topology import (
    detect_topology,
    dump_topology_text,
    i9_12900k,
    load_topology_file,
)

# Iteration shaping for the simulate target: early iterations run slower
# (cold-code analog) and every iteration carries a sliver of seeded noise
# so steady-state detection has real variance to chew on.
WARMUP_FACTOR = 0.3
WARMUP_DECAY = 0.5
JITTER_AMPLITUDE = 0.002
_EXEC_RNG_SALT = 0x9E3779B9


def shaped_exec_ms(raw_ms: float, iteration: int, rng: random.Random) -> float:
    warm = 1.0 + WARMUP_FACTOR * WARMUP_DECAY**iteration
    jitter = 1.0 + JITTER_AMPLITUDE * (2.0 * rng.random() - 1.0)
    return raw_ms * warm * jitter


def apply_env_backend(plan: bench.RunPlan) -> bench.RunPlan:
    env = os.environ.get("AMPGC_BACKEND")
    if env is None or env == "":
        return plan
    if env == "os":
        return dataclasses.replace(plan, pin_backend="os")
    if env == "mock":
        return dataclasses.replace(plan, pin_backend="mock", rapl_backend="synthetic")
    if env == "fixture":
        if not plan.rapl_fixture:
            raise ConfigError("AMPGC_BACKEND=fixture needs rapl.fixture in the config")
        return dataclasses.replace(plan, pin_backend="mock", rapl_backend="fixture")
    raise ConfigError(f"AMPGC_BACKEND must be os, mock or fixture, got {env!r}")


# --- subcommands -----------------------------------------------------------


def cmd_topo(args) -> int:
    if args.fixture:
        topo = load_topology_file(args.fixture)
    elif args.builtin:
        topo = i9_12900k()
    else:
        topo = detect_topology(args.sysfs)
    sys.stdout.write(dump_topology_text(topo))
    p = len(topo.p_cores)
    e = len(topo.e_cores)
    print(f"# {p} p-cores, {e} e-cores, {len(topo.cpu_ids)} logical cpus")
    return 0


def _load_for_run(args) -> tuple[ExperimentConfig, bench.RunPlan]:
    cfg = load_config(args.config)
    plan = cfg.run_plan(args.placement)
    return cfg, apply_env_backend(plan)


def cmd_run(args) -> int:
    cfg, plan = _load_for_run(args)
    topo = cfg.topology()
    cfg.check_realizable(topo)
    out_dir = Path(args.out) if args.out else Path(cfg.out_dir) / plan.benchmark / plan.config_name
    series = bench.run_experiment(plan, topo, rules=cfg.rules, out_dir=out_dir)
    clean = sum(1 for inv in series.invocations if inv.clean)
    steady = sum(1 for inv in series.invocations if inv.steady_reached)
    execs = report.invocation_values(series, "exec_ms")
    print(f"benchmark={plan.benchmark} config={plan.config_name}")
    print(f"invocations={len(series.invocations)} clean={clean} steady={steady}")
    if execs:
        print(f"exec_ms_mean={gclog.fmt_num(fmean(execs))}")
    energy = report.invocation_values(series, "energy_pkg_j")
    if energy:
        print(f"energy_pkg_j_mean={gclog.fmt_num(fmean(energy))}")
    print(f"wrote {out_dir / 'series.json'}")
    return 0


def cmd_heapsize(args) -> int:
    cfg, plan = _load_for_run(args)
    topo = cfg.topology()
    cfg.check_realizable(topo)

    def clean_at(heap_mb: float) -> bool:
        ok = bench.probe_clean(plan, topo, heap_mb, rules=cfg.rules)
        print(f"# probe heap_mb={gclog.fmt_num(heap_mb)} clean={str(ok).lower()}")
        return ok

    size = bench.heap_search(
        clean_at,
        base_mb=cfg.heap_base_mb,
        growth=cfg.heap_growth,
        required_clean=cfg.heap_required_clean,
        cap_mb=cfg.heap_cap_mb,
    )
    print(f"minimal_clean_heap_mb={gclog.fmt_num(size)}")
    return 0


def cmd_compare(args) -> int:
    series_a = bench.load_series(args.a)
    series_b = bench.load_series(args.b)
    va = report.invocation_values(series_a, args.metric)
    vb = report.invocation_values(series_b, args.metric)
    if len(va) < 2 or len(vb) < 2:
        raise ConfigError(
            f"metric {args.metric!r}: need >= 2 invocation values per side, "
            f"got {len(va)} and {len(vb)}"
        )
    res = stats.compare(va, vb, alpha=args.alpha, trim=args.trim)
    print(f"metric={args.metric} n_a={res.n_a} n_b={res.n_b}")
    print(
        f"method={res.method} trim={gclog.fmt_num(res.trim)} "
        f"outliers_a={res.outlier_a if res.outlier_a is not None else '-'} "
        f"outliers_b={res.outlier_b if res.outlier_b is not None else '-'}"
    )
    print(f"p={gclog.fmt_num(res.p)}")
    print(f"ci=({gclog.fmt_num(res.ci_low)}, {gclog.fmt_num(res.ci_high)})")
    print(f"improvement={stats.format_improvement(res.improvement, res.half_width)}")
    print(f"significant={str(res.significant).lower()}")
    return 0


def _collect_series(root: str | Path) -> list[bench.RunSeries]:
    root = Path(root)
    if root.is_file():
        paths = [root]
    else:
        paths = sorted(root.glob("**/series.json"))
    if not paths:
        raise ConfigError(f"no series.json under {root}")
    return [bench.load_series(p) for p in paths]


def _pooled_metrics(all_series: list[bench.RunSeries]) -> dict[str, list[float]]:
    """Metric -> per-invocation values across every series, keeping only
    metrics present for every invocation (ragged metrics can't line up
    against each other pairwise)."""
    total = sum(len(s.invocations) for s in all_series)
    out: dict[str, list[float]] = {}
    for metric in report.METRIC_NAMES:
        values: list[float] = []
        for s in all_series:
            values.extend(report.invocation_values(s, metric))
        if len(values) == total and total >= 2:
            out[metric] = values
    return out


def cmd_corr(args) -> int:
    all_series = _collect_series(args.series)
    metrics = _pooled_metrics(all_series)
    if len(metrics) < 2:
        raise ConfigError("need at least 2 complete metrics to correlate")
    table = report.correlation_table(metrics)
    sys.stdout.write(report.correlation_csv(table))
    for name in table.excluded:
        print(f"# excluded constant metric: {name}", file=sys.stderr)
    if args.out:
        written = report.write_report(args.out, correlation=table)
        for path in written:
            print(f"wrote {path}", file=sys.stderr)
    return 0


def _sim_params(args) -> SimParams:
    kwargs: dict[str, object] = {
        "heap_mb": args.heap_mb,
        "seed": args.seed,
        "run_seconds": args.run_seconds,
        "live_mb": args.live_mb,
        "alloc_rate_mb_s": args.alloc_rate,
        "gc_core_count": args.gc_cores,
        "gc_core_type": args.gc_core_type,
        "gc_core_speed": args.gc_speed,
        "gc_hwt_per_core": args.gc_hwt,
        "collect_latency": not args.no_latency,
    }
    if args.fixed_workers is not None:
        kwargs["fixed_workers"] = args.fixed_workers
    field_types = {f.name: f for f in dataclasses.fields(SimParams)}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key = key.strip()
        if key not in field_types:
            raise ConfigError(f"unknown simulation parameter {key!r}")
        default = getattr(SimParams, key, None)
        try:
            if key == "fixed_workers":
                kwargs[key] = None if value == "none" else int(value)
            elif isinstance(default, bool):
                kwargs[key] = value == "true"
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    try:
        return SimParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_simulate(args) -> int:
    params = _sim_params(args)
    sim = Simulator(params)
    exec_rng = random.Random(params.seed ^ _EXEC_RNG_SALT)
    for i in range(args.iterations):
        print(f"ITER {i} BEGIN")
        segment = sim.run_for(params.run_seconds)
        for entry in segment.entries:
            print(gclog.emit_entry(entry))
        for value in segment.latency_ms:
            print(f"LATENCY {gclog.fmt_num(value)}")
        exec_ms = shaped_exec_ms(segment.exec_ms, i, exec_rng)
        print(f"ITER {i} END exec_ms={gclog.fmt_num(exec_ms)}")
    end = sim.finish()
    print(gclog.emit_entry(end))
    if args.energy_out:
        Path(args.energy_out).write_text(rapl.dump_fixture_csv(sim.energy_samples))
    return 0


def cmd_report(args) -> int:
    all_series = _collect_series(args.series)
    by_benchmark: dict[str, dict[str, bench.RunSeries]] = {}
    for s in all_series:
        key = (s.plan.benchmark, s.plan.config_name)
        configs = by_benchmark.setdefault(s.plan.benchmark, {})
        if s.plan.config_name in configs:
            raise ConfigError(f"duplicate series for {key[0]}/{key[1]}")
        configs[s.plan.config_name] = s

    normalized: list[report.NormalizedRow] = []
    ratios: dict[str, dict[str, float]] = {}
    for benchmark, configs in sorted(by_benchmark.items()):
        if args.baseline not in configs:
            print(
                f"# {benchmark}: baseline {args.baseline} missing, skipped",
                file=sys.stderr,
            )
            continue
        rows = report.normalized_rows(benchmark, configs, args.baseline)
        normalized.extend(rows)
        for row in rows:
            if row.metric == args.best_metric:
                ratios.setdefault(benchmark, {})[row.comparison] = row.ratio

    best = report.max_reduction_table(ratios) if ratios else None

    correlation = None
    metrics = _pooled_metrics(all_series)
    metrics = {k: v for k, v in metrics.items() if len(v) >= 2}
    if len(metrics) >= 2:
        correlation = report.correlation_table(metrics)

    rsd_values: dict[str, dict[str, list[float]]] = {}
    for benchmark, configs in sorted(by_benchmark.items()):
        for config, s in sorted(configs.items()):
            vals = report.invocation_values(s, "exec_ms")
            if len(vals) >= 2:
                rsd_values.setdefault(benchmark, {})[config] = vals
    rsd_rows = report.rsd_table(rsd_values) if rsd_values else None

    latencies: dict[str, list[float]] = {}
    for s in all_series:
        pooled = [
            v
            for inv in s.invocations
            for it in inv.iterations
            if it.measured
            for v in it.latency_ms
        ]
        if pooled:
            latencies.setdefault(s.plan.config_name, []).extend(pooled)
    latency_rows = report.latency_table(latencies) if latencies else None

    meta = {
        "baseline": args.baseline,
        "best_metric": args.best_metric,
        "rsd_flag_pct": report.RSD_FLAG_PCT,
        "bucket_low": report.BUCKET_LOW,
        "bucket_high": report.BUCKET_HIGH,
        "benchmarks": sorted(by_benchmark),
        "series_count": len(all_series),
    }
    written = report.write_report(
        args.out,
        normalized=normalized or None,
        best=best,
        correlation=correlation,
        rsd_rows=rsd_rows,
        latency=latency_rows,
        meta=meta,
    )
    if not written:
        raise ConfigError("no tables could be built from the given series")
    for path in written:
        print(f"wrote {path}")
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ampgc",
        description="GC-thread placement experiments on asymmetric multicore CPUs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("topo", help="print the machine topology")
    p.add_argument("--fixture", help="read topology from a fixture file")
    p.add_argument("--builtin", action="store_true", help="print the canned 8P+8E model")
    p.add_argument("--sysfs", default="/sys", help="sysfs root for detection")
    p.set_defaults(func=cmd_topo)

    p = sub.add_parser("run", help="run one placement experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--placement", help="config name, e.g. 8E (default from file)")
    p.add_argument("--out", help="output directory (default out_dir/benchmark/placement)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("heapsize", help="search the minimal stall-free heap")
    p.add_argument("--config", required=True)
    p.add_argument("--placement")
    p.set_defaults(func=cmd_heapsize)

    p = sub.add_parser("compare", help="compare a metric between two series")
    p.add_argument("--a", required=True, help="candidate series.json or its directory")
    p.add_argument("--b", required=True, help="baseline series.json or its directory")
    p.add_argument("--metric", default="exec_ms", choices=report.METRIC_NAMES)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--trim", type=float, default=0.2)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("corr", help="correlate metrics across series")
    p.add_argument("--series", required=True, help="directory searched for series.json")
    p.add_argument("--out", help="also write correlation.csv/.json here")
    p.set_defaults(func=cmd_corr)

    p = sub.add_parser("simulate", help="run the collector simulation as a target")
    p.add_argument("--heap-mb", type=float, default=128.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--run-seconds", type=float, default=10.0)
    p.add_argument("--live-mb", type=float, default=24.0)
    p.add_argument("--alloc-rate", type=float, default=200.0)
    p.add_argument("--gc-cores", type=int, default=2)
    p.add_argument("--gc-core-type", choices=("P", "E"), default="E")
    p.add_argument("--gc-speed", type=float, default=1.0)
    p.add_argument("--gc-hwt", type=int, default=1)
    p.add_argument("--fixed-workers", type=int)
    p.add_argument("--no-latency", action="store_true")
    p.add_argument("--energy-out", help="write energy counter fixture CSV here")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any simulation parameter by field name",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render all result tables")
    p.add_argument("--series", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", default="4P")
    p.add_argument("--best-metric", default="energy_pkg_j", choices=report.METRIC_NAMES)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except PermissionDenied as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(
            "hint: thread pinning and energy counters need elevated rights; "
            "retry as root, grant CAP_SYS_NICE, or set AMPGC_BACKEND=mock",
            file=sys.stderr,
        )
        return exc.exit_code
    except AmpgcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
