"""Benchmark protocol: invocations, iterations, steady state, heap sizing.

A *run* is `invocations` fresh launches of the target process. Within one
invocation the target executes `iterations` workload repetitions and
announces each on stdout:

    ITER <n> BEGIN
    ITER <n> END exec_ms=<real>
    LATENCY <ms>                 (zero or more, inside an iteration)
    ... GC log lines ...         (grammar in gclog; or a side log file)
    RUNEND wall=<ms> heap=<mb>   (last line)

The harness reads energy counters at iteration boundaries, derives GC
metrics per iteration from the interleaved log lines, thrashes the last
level cache between iterations, and marks the trailing `measured_tail`
iterations as the measurement set. Steady state is diagnosed (not
enforced): the first window of `cv_window` consecutive execution times
whose coefficient of variation drops under `cv_threshold`.

Cache flushing runs in the harness, concurrent with the target's next
iteration start; an in-process flush hook would need target cooperation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean, stdev
from typing import Callable, Sequence

from . import gclog, pinctl, rapl, stats
from .errors import ConfigError, HeapSearchError, TargetError
from .gclog import ParsedLog, RunMetrics
from .topology import CoreTopology, build_affinity_plan, parse_config_name

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_ITER_BEGIN_RE = re.compile(r"^ITER (\d+) BEGIN$")
_ITER_END_RE = re.compile(r"^ITER (\d+) END exec_ms=([0-9.eE+-]+)$")
_LATENCY_RE = re.compile(r"^LATENCY ([0-9.eE+-]+)$")


def detect_steady(
    times: Sequence[float], window: int = 5, threshold: float = 0.05
) -> int | None:
    """Index of the first iteration that closes a steady window, else None.

    A window is steady when sample-stddev/mean over the `window` most recent
    times falls below `threshold`. The returned index is the window's last
    element, so a constant series and window 5 yield 4.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    for i in range(window - 1, len(times)):
        chunk = times[i - window + 1 : i + 1]
        m = fmean(chunk)
        if m == 0:
            continue
        if stdev(chunk) / m < threshold:
            return i
    return None


# --- cache flushing --------------------------------------------------------


class BufferFlush:
    """Streams a buffer at least twice the L3 size to evict cached lines."""

    method = "buffer"

    def __init__(self, l3_kb: int):
        if l3_kb <= 0:
            raise ValueError("l3_kb must be positive")
        self.size_bytes = 2 * l3_kb * 1024
        self._buf = bytearray(self.size_bytes)
        self._pattern = bytes(range(256)) * 4096  # 1 MiB

    def flush(self) -> None:
        mv = memoryview(self._buf)
        chunk = len(self._pattern)
        for off in range(0, self.size_bytes, chunk):
            end = min(off + chunk, self.size_bytes)
            mv[off:end] = self._pattern[: end - off]
        # Read one byte per cache line; the strided copy touches them all.
        _checksum = sum(bytes(mv[::64]))


class MockFlush:
    method = "mock"

    def __init__(self):
        self.calls = 0

    def flush(self) -> None:
        self.calls += 1


class NoFlush:
    method = "none"

    def flush(self) -> None:
        pass


def make_flush_backend(name: str, l3_kb: int):
    if name == "buffer":
        return BufferFlush(l3_kb)
    if name == "mock":
        return MockFlush()
    if name == "none":
        return NoFlush()
    raise ConfigError(f"unknown flush backend {name!r}")


def flush_caches(backend) -> dict:
    t0 = time.monotonic_ns()
    backend.flush()
    return {"method": backend.method, "duration_ms": (time.monotonic_ns() - t0) / 1e6}


# --- plans and results -----------------------------------------------------


@dataclass(frozen=True)
class RunPlan:
    """Everything needed to reproduce one benchmark x placement run."""

    benchmark: str
    config_name: str
    target: tuple[str, ...]  # argv template: {heap_mb} {iterations} {seed}
    heap_mb: float
    invocations: int = 10
    iterations: int = 10
    measured_tail: int = 5
    cv_window: int = 5
    cv_threshold: float = 0.05
    seed: int = 1
    flush: str = "buffer"
    pin_backend: str = "os"
    rapl_backend: str = "none"
    rapl_fixture: str | None = None
    domains: tuple[str, ...] = ("pkg", "pp0")
    poll_period_ms: float = 10.0
    timeout_s: float = 600.0
    gc_log_path: str | None = None
    mutator_pcore_count: int = 4

    def __post_init__(self):
        if self.invocations < 1 or self.iterations < 1:
            raise ConfigError("invocations and iterations must be >= 1")
        if not 1 <= self.measured_tail <= self.iterations:
            raise ConfigError("measured_tail must be in [1, iterations]")
        if self.heap_mb <= 0:
            raise ConfigError("heap_mb must be positive")
        if not self.target:
            raise ConfigError("target command is empty")


@dataclass
class IterationResult:
    index: int
    exec_ms: float
    measured: bool
    energy_j: dict[str, float] = field(default_factory=dict)
    metrics: RunMetrics | None = None
    latency_ms: list[float] = field(default_factory=list)


@dataclass
class InvocationResult:
    index: int
    clean: bool
    oom: bool
    stall_count: int
    steady_index: int | None
    steady_reached: bool
    iterations: list[IterationResult] = field(default_factory=list)
    wall_ms: float = 0.0
    heap_mb: float = 0.0
    failed: bool = False


@dataclass
class RunSeries:
    plan: RunPlan
    invocations: list[InvocationResult] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def exec_times(self, invocation: int) -> list[float]:
        return [it.exec_ms for it in self.invocations[invocation].iterations]


class _FormatDict(dict):
    def __missing__(self, key):  # leave unknown placeholders intact
        return "{" + key + "}"


def _render_argv(plan: RunPlan, invocation: int) -> list[str]:
    mapping = _FormatDict(
        heap_mb=repr(plan.heap_mb),
        iterations=str(plan.iterations),
        seed=str(plan.seed + invocation),
        invocation=str(invocation),
    )
    return [part.format_map(mapping) for part in plan.target]


def _make_pin_backend(plan: RunPlan, pid: int):
    if plan.pin_backend == "os":
        return pinctl.OsThreadBackend()
    if plan.pin_backend == "mock":
        return pinctl.MockThreadBackend([(pid, "target")])
    raise ConfigError(f"unknown pin backend {plan.pin_backend!r}")


def _make_energy_meter(plan: RunPlan) -> rapl.EnergyMeter | None:
    domains = tuple(rapl.EnergyDomain(d) for d in plan.domains)
    if plan.rapl_backend == "none":
        return None
    if plan.rapl_backend == "powercap":
        return rapl.EnergyMeter(rapl.PowercapBackend(), domains)
    if plan.rapl_backend == "msr":
        return rapl.EnergyMeter(rapl.MsrBackend(), domains)
    if plan.rapl_backend == "synthetic":
        return rapl.EnergyMeter(rapl.SyntheticBackend(), domains)
    if plan.rapl_backend == "fixture":
        if not plan.rapl_fixture:
            raise ConfigError("rapl_backend=fixture requires rapl_fixture path")
        return rapl.EnergyMeter(rapl.FixtureBackend(plan.rapl_fixture), domains)
    raise ConfigError(f"unknown rapl backend {plan.rapl_backend!r}")


def _run_invocation(
    plan: RunPlan,
    invocation: int,
    topo: CoreTopology,
    rules,
    flush_backend,
    events: list[dict],
    tolerate_failure: bool,
) -> InvocationResult:
    argv = _render_argv(plan, invocation)
    meter = _make_energy_meter(plan)
    config = parse_config_name(plan.config_name, plan.mutator_pcore_count)
    affinity = build_affinity_plan(config, topo)
    try:
        proc = subprocess.Popen(
            argv, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True
        )
    except OSError as exc:
        raise TargetError(f"cannot launch target {argv!r}: {exc}") from exc
    watcher = pinctl.apply_plan(
        proc.pid,
        affinity,
        rules=rules,
        backend=_make_pin_backend(plan, proc.pid),
        poll_period_ms=plan.poll_period_ms,
    )
    result = InvocationResult(
        index=invocation,
        clean=True,
        oom=False,
        stall_count=0,
        steady_index=None,
        steady_reached=False,
        heap_mb=plan.heap_mb,
    )
    all_entries: list = []
    current: IterationResult | None = None
    current_entries: list = []
    begin_samples: dict | None = None
    start_ns = time.monotonic_ns()
    try:
        assert proc.stdout is not None
        for line_no, raw in enumerate(proc.stdout, 1):
            line = raw.rstrip("\n")
            m = _ITER_BEGIN_RE.match(line)
            if m:
                current = IterationResult(index=int(m.group(1)), exec_ms=0.0, measured=False)
                current_entries = []
                if meter is not None:
                    begin_samples = meter.read_boundary()
                continue
            m = _ITER_END_RE.match(line)
            if m:
                if current is None or int(m.group(1)) != current.index:
                    raise TargetError(f"line {line_no}: ITER END without matching BEGIN")
                current.exec_ms = float(m.group(2))
                if current.exec_ms <= 0:
                    raise TargetError(f"line {line_no}: non-positive exec_ms")
                if meter is not None and begin_samples is not None:
                    end_samples = meter.read_boundary()
                    current.energy_j = meter.interval_joules(begin_samples, end_samples)
                parsed_slice = ParsedLog(entries=current_entries)
                current.metrics = gclog.derive_metrics(
                    parsed_slice.cycles,
                    parsed_slice.stalls,
                    wall_ms=current.exec_ms,
                    heap_mb=plan.heap_mb,
                )
                result.iterations.append(current)
                current = None
                events.append(
                    {"event": "flush", "invocation": invocation, **flush_caches(flush_backend)}
                )
                continue
            m = _LATENCY_RE.match(line)
            if m:
                if current is not None:
                    current.latency_ms.append(float(m.group(1)))
                continue
            entry = gclog.parse_line(line, line_no)
            if entry is None:
                continue
            all_entries.append(entry)
            if current is not None:
                current_entries.append(entry)
        rc = proc.wait(timeout=plan.timeout_s)
    except subprocess.TimeoutExpired as exc:
        proc.kill()
        proc.wait()
        raise TargetError(f"target exceeded {plan.timeout_s}s") from exc
    finally:
        watcher.release()
        events.extend(
            {
                "event": "pin",
                "invocation": invocation,
                "tid": r.tid,
                "name": r.name,
                "role": r.role.value,
                "cpus": sorted(r.cpus),
                "timestamp_ns": r.timestamp_ns,
                "unpinned_window_ns": r.unpinned_window_ns,
            }
            for r in watcher.records
        )
    events.append(
        {
            "event": "target",
            "invocation": invocation,
            "pid": proc.pid,
            "returncode": rc,
            "duration_ms": (time.monotonic_ns() - start_ns) / 1e6,
        }
    )
    if rc != 0:
        if not tolerate_failure:
            raise TargetError(f"target exited with status {rc}")
        result.failed = True
        result.clean = False
    if plan.gc_log_path:
        # Side-file mode: entries are attributed to the invocation only.
        side = gclog.parse_log(Path(plan.gc_log_path).read_text().splitlines())
        all_entries.extend(side.entries)
    whole = ParsedLog(entries=all_entries)
    result.stall_count = len(whole.stalls)
    result.oom = any(s.kind is gclog.StallKind.OOM for s in whole.stalls)
    result.clean = result.clean and gclog.is_clean_run(whole)
    run_end = whole.run_end
    if run_end is not None:
        result.wall_ms = run_end.wall_ms
        result.heap_mb = run_end.heap_mb
    else:
        result.wall_ms = sum(it.exec_ms for it in result.iterations)
        log.warning("invocation %d: target emitted no RUNEND line", invocation)
    times = [it.exec_ms for it in result.iterations]
    result.steady_index = detect_steady(times, plan.cv_window, plan.cv_threshold)
    result.steady_reached = result.steady_index is not None
    for it in result.iterations[-plan.measured_tail :]:
        it.measured = True
    if len(result.iterations) != plan.iterations and not result.failed:
        raise TargetError(
            f"target announced {len(result.iterations)} iterations, "
            f"plan expected {plan.iterations}"
        )
    return result


def run_experiment(
    plan: RunPlan,
    topo: CoreTopology,
    rules=pinctl.DEFAULT_RULES,
    out_dir: str | Path | None = None,
    tolerate_failure: bool = False,
) -> RunSeries:
    """Run the full protocol: `invocations` sequential launches of the target.

    Invocations never overlap; they share the machine being measured.
    """
    flush_backend = make_flush_backend(plan.flush, topo.l3_kb)
    events: list[dict] = []
    series = RunSeries(plan=plan)
    series.meta = {
        "schema": SCHEMA_VERSION,
        "benchmark": plan.benchmark,
        "config": plan.config_name,
        "seed": plan.seed,
        "cv_window": plan.cv_window,
        "cv_threshold": plan.cv_threshold,
        "measured_tail": plan.measured_tail,
        "flush": plan.flush,
        "pin_backend": plan.pin_backend,
        "rapl_backend": plan.rapl_backend,
        "domains": list(plan.domains),
    }
    for invocation in range(plan.invocations):
        result = _run_invocation(
            plan, invocation, topo, rules, flush_backend, events, tolerate_failure
        )
        series.invocations.append(result)
        if not result.steady_reached:
            log.warning(
                "%s/%s invocation %d never reached steady state",
                plan.benchmark,
                plan.config_name,
                invocation,
            )
    if out_dir is not None:
        persist_series(series, out_dir, events)
    return series


# --- persistence -----------------------------------------------------------


def _metrics_dict(m: RunMetrics | None) -> dict | None:
    if m is None:
        return None
    return dataclasses.asdict(m)


def series_document(series: RunSeries) -> dict:
    """Deterministic JSON document: no pids, no wall-clock timestamps."""
    return {
        "schema": SCHEMA_VERSION,
        "plan": dataclasses.asdict(series.plan),
        "meta": series.meta,
        "invocations": [
            {
                "index": inv.index,
                "clean": inv.clean,
                "oom": inv.oom,
                "stall_count": inv.stall_count,
                "steady_index": inv.steady_index,
                "steady_reached": inv.steady_reached,
                "wall_ms": inv.wall_ms,
                "heap_mb": inv.heap_mb,
                "failed": inv.failed,
                "iterations": [
                    {
                        "index": it.index,
                        "exec_ms": it.exec_ms,
                        "measured": it.measured,
                        "energy_j": it.energy_j,
                        "metrics": _metrics_dict(it.metrics),
                        "latency_ms": it.latency_ms,
                    }
                    for it in inv.iterations
                ],
            }
            for inv in series.invocations
        ],
    }


MEASURED_CSV_COLUMNS = (
    "benchmark,config,invocation,iteration,exec_ms,energy_pkg_j,energy_pp0_j,"
    "num_cycles,num_minor,num_major,gc_time_ms,mark_time_ms,relocate_time_ms,"
    "gc_activity,avg_workers,heap_per_worker_mb,latency_p999_ms"
)


def _measured_rows(series: RunSeries) -> list[str]:
    rows = [MEASURED_CSV_COLUMNS]
    for inv in series.invocations:
        for it in inv.iterations:
            if not it.measured:
                continue
            m = it.metrics
            p999 = stats.percentile(it.latency_ms, 99.9) if it.latency_ms else ""
            cells = [
                series.plan.benchmark,
                series.plan.config_name,
                inv.index,
                it.index,
                it.exec_ms,
                it.energy_j.get("pkg", ""),
                it.energy_j.get("pp0", ""),
                m.num_cycles if m else "",
                m.num_minor if m else "",
                m.num_major if m else "",
                m.gc_time_ms if m else "",
                m.mark_time_ms if m else "",
                m.relocate_time_ms if m else "",
                m.gc_activity if m else "",
                (m.avg_workers if m.avg_workers is not None else "") if m else "",
                (m.heap_per_worker_mb if m.heap_per_worker_mb is not None else "") if m else "",
                p999,
            ]
            rows.append(",".join(str(c) for c in cells))
    return rows


def persist_series(
    series: RunSeries, out_dir: str | Path, events: list[dict] | None = None
) -> Path:
    """Write series.json (deterministic), measured.csv, events.jsonl."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = series_document(series)
    (out / "series.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    (out / "measured.csv").write_text("\n".join(_measured_rows(series)) + "\n")
    if events is not None:
        with (out / "events.jsonl").open("w") as f:
            for event in events:
                f.write(json.dumps(event, sort_keys=True) + "\n")
    return out / "series.json"


def load_series(path: str | Path) -> RunSeries:
    path = Path(path)
    if path.is_dir():
        path = path / "series.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read series {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"series {path} is not valid JSON: {exc}") from exc
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"series {path} has schema {doc.get('schema')}, expected {SCHEMA_VERSION}")
    plan_dict = dict(doc["plan"])
    plan_dict["target"] = tuple(plan_dict["target"])
    plan_dict["domains"] = tuple(plan_dict["domains"])
    plan = RunPlan(**plan_dict)
    series = RunSeries(plan=plan, meta=doc.get("meta", {}))
    for inv_doc in doc["invocations"]:
        inv = InvocationResult(
            index=inv_doc["index"],
            clean=inv_doc["clean"],
            oom=inv_doc["oom"],
            stall_count=inv_doc["stall_count"],
            steady_index=inv_doc["steady_index"],
            steady_reached=inv_doc["steady_reached"],
            wall_ms=inv_doc["wall_ms"],
            heap_mb=inv_doc["heap_mb"],
            failed=inv_doc.get("failed", False),
        )
        for it_doc in inv_doc["iterations"]:
            metrics = None
            if it_doc["metrics"] is not None:
                metrics = RunMetrics(**it_doc["metrics"])
            inv.iterations.append(
                IterationResult(
                    index=it_doc["index"],
                    exec_ms=it_doc["exec_ms"],
                    measured=it_doc["measured"],
                    energy_j=dict(it_doc["energy_j"]),
                    metrics=metrics,
                    latency_ms=list(it_doc["latency_ms"]),
                )
            )
        series.invocations.append(inv)
    return series


# --- heap sizing -----------------------------------------------------------


def heap_search(
    clean_at: Callable[[float], bool],
    base_mb: float = 16.0,
    growth: float = 1.10,
    required_clean: int = 5,
    cap_mb: float = 65536.0,
) -> float:
    """Smallest grid heap size passing `required_clean` consecutive clean runs.

    The grid is base_mb * growth**k; any unclean run advances to the next
    size immediately. `clean_at` performs one fresh run at the given size.
    """
    if base_mb <= 0 or growth <= 1.0:
        raise ConfigError("need base_mb > 0 and growth > 1")
    if required_clean < 1:
        raise ConfigError("required_clean must be >= 1")
    k = 0
    while True:
        size = base_mb * growth**k
        if size > cap_mb:
            raise HeapSearchError(
                f"no stall-free heap within cap {cap_mb} MB "
                f"(last tried {base_mb * growth ** (k - 1):.2f} MB)" if k else
                f"no stall-free heap within cap {cap_mb} MB (base exceeds cap)"
            )
        if all(clean_at(size) for _ in range(required_clean)):
            return size
        k += 1


def probe_clean(
    plan: RunPlan,
    topo: CoreTopology,
    heap_mb: float,
    rules=pinctl.DEFAULT_RULES,
) -> bool:
    """One tolerant invocation at the given heap size; True when clean."""
    probe_plan = dataclasses.replace(plan, heap_mb=heap_mb, invocations=1)
    series = run_experiment(probe_plan, topo, rules=rules, tolerate_failure=True)
    inv = series.invocations[0]
    return inv.clean and not inv.failed
