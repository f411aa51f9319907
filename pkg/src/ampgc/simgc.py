"""Deterministic concurrent-collector simulator.

A small discrete-time model of an application allocating into a fixed-size
heap while a concurrent collector marks and relocates. It exists to give
the harness a fully deterministic target: same parameters and seed produce
byte-identical output, so end-to-end pipelines can be tested without a JVM.

Model, in one paragraph: the application holds a constant live set
(`live_mb`) and turns allocation into garbage at `alloc_rate_mb_s`, with
seeded bursts. A cycle marks the live set and relocates a share of it at an
aggregate rate proportional to `workers * gc_core_speed`; on completion it
reclaims the garbage that existed when the cycle started (snapshot
semantics), so garbage allocated mid-cycle waits for the next cycle. The
collector's heuristics mirror a concurrent GC: an EWMA-smoothed allocation
rate and a learned per-MB cost predict the next cycle's duration, a cycle
starts when the projected time to heap exhaustion falls below the predicted
duration times a headroom factor (or after a long idle period), and the
worker count is the smallest that fits the deadline. Mutators hitting an
exhausted heap stall (allocation or relocation flavor by phase) rather than
fail, unless nothing is reclaimable, which is an out-of-memory condition.

Durations are computed as (work * unit_cost / workers) / speed in exactly
that association so that two runs differing only in speed produce
bit-identical `base / speed` divisions.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field, replace

from . import rapl
from .gclog import (
    GcCycleRecord,
    GcKind,
    ParsedLog,
    RunEnd,
    StallEvent,
    StallKind,
    emit,
)

_STALL_RECORD_CAP = 10_000


@dataclass(frozen=True)
class SimParams:
    heap_mb: float = 128.0
    seed: int = 1
    run_seconds: float = 10.0
    tick_ms: float = 1.0
    # Application behavior.
    alloc_rate_mb_s: float = 200.0
    burst_prob: float = 0.05
    burst_factor: float = 8.0
    live_mb: float = 24.0
    # Collector cost model.
    relocate_share: float = 0.25
    gc_core_count: int = 2
    gc_hwt_per_core: int = 1
    gc_core_speed: float = 1.0
    gc_core_type: str = "E"
    gc_unit_cost_ms_per_mb: float = 10.0
    fixed_workers: int | None = None
    minor_per_major: int = 4
    # Heuristics.
    headroom: float = 1.2
    ewma_alpha: float = 0.3
    history_depth: int = 8
    cold_start_ms_per_mb: float = 10.0
    idle_trigger_s: float = 300.0
    rate_window_ms: float = 100.0
    # Latency sampling.
    collect_latency: bool = True
    latency_period_ms: float = 10.0
    latency_base_ms: float = 1.0
    latency_spike_ms: float = 25.0
    # Synthetic energy model (constants are arbitrary but ordered:
    # an active P core outdraws an active E core).
    energy_sample_ms: float = 100.0
    pcore_active_w: float = 12.0
    ecore_active_w: float = 3.5
    uncore_idle_w: float = 10.0
    mutator_cores: int = 4
    max_range_uj: int = rapl.DEFAULT_MAX_RANGE_UJ
    stall_exec_penalty_ms: float = 50.0
    check_conservation: bool = True

    def __post_init__(self):
        if self.heap_mb <= 0 or self.live_mb <= 0:
            raise ValueError("heap_mb and live_mb must be positive")
        if self.gc_core_count < 1 or self.gc_hwt_per_core < 1:
            raise ValueError("GC core counts must be >= 1")
        if self.gc_core_speed <= 0:
            raise ValueError("gc_core_speed must be positive")
        if self.gc_core_type not in ("P", "E"):
            raise ValueError("gc_core_type must be 'P' or 'E'")
        if not 0.0 <= self.burst_prob <= 1.0:
            raise ValueError("burst_prob outside [0, 1]")
        if self.fixed_workers is not None and self.fixed_workers < 1:
            raise ValueError("fixed_workers must be >= 1 when set")
        if self.minor_per_major < 0:
            raise ValueError("minor_per_major must be >= 0")

    @property
    def worker_capacity(self) -> int:
        return self.gc_core_count * self.gc_hwt_per_core


@dataclass
class HeuristicState:
    """What the collector has learned so far."""

    smoothed_alloc_mb_s: float
    unit_cost_ms_per_mb: float
    history: deque = field(default_factory=lambda: deque(maxlen=8))

    @classmethod
    def cold(cls, params: SimParams) -> "HeuristicState":
        return cls(
            smoothed_alloc_mb_s=params.alloc_rate_mb_s,
            unit_cost_ms_per_mb=params.cold_start_ms_per_mb,
            history=deque(maxlen=params.history_depth),
        )

    def observe_rate(self, rate_mb_s: float, alpha: float) -> None:
        self.smoothed_alloc_mb_s = alpha * rate_mb_s + (1 - alpha) * self.smoothed_alloc_mb_s

    def record_cycle(
        self, workers: int, duration_ms: float, work_mb: float, speed: float, alpha: float
    ) -> None:
        observed = duration_ms * workers * speed / work_mb
        self.unit_cost_ms_per_mb = alpha * observed + (1 - alpha) * self.unit_cost_ms_per_mb
        self.history.append((workers, duration_ms, work_mb))


def predict_cycle_duration(
    work_mb: float, workers: int, speed: float, state: HeuristicState
) -> float:
    """Predicted wall duration in ms for a cycle of `work_mb` at `workers`."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return (work_mb * state.unit_cost_ms_per_mb / workers) / speed


def should_start_cycle(
    free_mb: float,
    idle_s: float,
    work_mb: float,
    state: HeuristicState,
    params: SimParams,
) -> bool:
    """Start when projected time-to-exhaustion dips under the padded
    single-worker prediction (laziest viable start), or after a long idle."""
    if free_mb <= 0:
        return True
    if idle_s >= params.idle_trigger_s:
        return True
    if state.smoothed_alloc_mb_s <= 0:
        return False
    tto_ms = free_mb / state.smoothed_alloc_mb_s * 1000.0
    predicted_ms = predict_cycle_duration(work_mb, 1, params.gc_core_speed, state)
    return tto_ms <= predicted_ms * params.headroom


def choose_workers(
    free_mb: float, work_mb: float, state: HeuristicState, params: SimParams
) -> int:
    """Smallest worker count whose predicted duration fits the deadline.

    The deadline is time-to-exhaustion shrunk by the headroom factor; when
    no count fits, the full capacity is thrown at the cycle.
    """
    capacity = params.worker_capacity
    if state.smoothed_alloc_mb_s <= 0:
        return 1
    budget_ms = (free_mb / state.smoothed_alloc_mb_s * 1000.0) / params.headroom
    for w in range(1, capacity + 1):
        if predict_cycle_duration(work_mb, w, params.gc_core_speed, state) <= budget_ms:
            return w
    return capacity


@dataclass
class _ActiveCycle:
    cycle_id: int
    kind: GcKind
    start_ms: float
    mark_ms: float
    relocate_ms: float
    workers: int
    garbage_snapshot_mb: float

    @property
    def end_ms(self) -> float:
        return self.start_ms + self.mark_ms + self.relocate_ms

    def phase(self, now_ms: float) -> str:
        return "mark" if now_ms < self.start_ms + self.mark_ms else "relocate"


@dataclass
class Segment:
    """Per-slice view of a simulation (one benchmark iteration)."""

    sim_ms: float
    exec_ms: float
    entries: list = field(default_factory=list)
    latency_ms: list[float] = field(default_factory=list)
    stall_count: int = 0
    oom: bool = False


@dataclass
class SimOutput:
    params: SimParams
    clean: bool
    oom: bool
    stall_count: int
    exec_ms: float
    wall_ms: float
    parsed: ParsedLog
    latency_ms: list[float]
    energy_samples: list[rapl.EnergySample]
    energy_j: dict[str, float]
    allocated_mb: float
    reclaimed_mb: float

    @property
    def gc_lines(self) -> list[str]:
        return emit(self.parsed)

    @property
    def energy_csv(self) -> str:
        return rapl.dump_fixture_csv(self.energy_samples)


class ConservationError(AssertionError):
    """Allocated mass stopped matching reclaimed + retained mass."""


class Simulator:
    """Tick-stepped simulator; call run_for() repeatedly, then finish()."""

    def __init__(self, params: SimParams):
        self.p = params
        self.state = HeuristicState.cold(params)
        self._alloc_rng = random.Random(params.seed)
        self._lat_rng = random.Random(params.seed ^ 0x5DEECE66D)
        self.garbage_mb = 0.0
        self.allocated_mb = 0.0
        self.reclaimed_mb = 0.0
        self.tick_index = 0
        self.cycle_counter = 0
        self.stall_count = 0
        self.oom = False
        self.dead = False
        self.active: _ActiveCycle | None = None
        self.last_cycle_end_ms = 0.0
        self.entries: list = []  # full-run log entries, in order
        self.energy_samples: list[rapl.EnergySample] = []
        self._acc_uj = {"pkg": 0.0, "pp0": 0.0}
        self._window_alloc_mb = 0.0
        self._rate_window_ticks = max(1, round(params.rate_window_ms / params.tick_ms))
        self._energy_ticks = max(1, round(params.energy_sample_ms / params.tick_ms))
        self._latency_ticks = max(1, round(params.latency_period_ms / params.tick_ms))
        self._spike_units = 0
        self._work_mb = params.live_mb * (1.0 + params.relocate_share)
        self._emit_energy_sample()  # t=0 anchor so totals cover the full run
        if params.heap_mb < params.live_mb:
            self._record_oom(0.0, None)
            self.dead = True

    # -- plumbing -----------------------------------------------------------

    @property
    def now_ms(self) -> float:
        return self.tick_index * self.p.tick_ms

    @property
    def free_mb(self) -> float:
        return self.p.heap_mb - self.p.live_mb - self.garbage_mb

    def _record(self, entry, segment: Segment | None) -> None:
        self.entries.append(entry)
        if segment is not None:
            segment.entries.append(entry)

    def _record_stall(self, kind: StallKind, at_ms: float, segment: Segment | None) -> None:
        self.stall_count += 1
        if segment is not None:
            segment.stall_count += 1
        if self.stall_count <= _STALL_RECORD_CAP:
            self._record(StallEvent(kind=kind, at_ms=at_ms), segment)
        self._spike_units += 4

    def _record_oom(self, at_ms: float, segment: Segment | None) -> None:
        self.oom = True
        if segment is not None:
            segment.oom = True
        self.stall_count += 1
        if segment is not None:
            segment.stall_count += 1
        self._record(StallEvent(kind=StallKind.OOM, at_ms=at_ms), segment)

    def _emit_energy_sample(self) -> None:
        ts_ns = int(self.now_ms * 1e6)
        for domain, key in ((rapl.EnergyDomain.PKG, "pkg"), (rapl.EnergyDomain.PP0, "pp0")):
            counter = int(self._acc_uj[key]) % self.p.max_range_uj
            self.energy_samples.append(rapl.EnergySample(domain, ts_ns, counter))

    def _tick_power_w(self) -> float:
        """Package power this tick under the synthetic model."""
        p = self.p
        gc_w = 0.0
        if self.active is not None:
            cores_used = math.ceil(self.active.workers / p.gc_hwt_per_core)
            cores_used = min(cores_used, p.gc_core_count)
            if p.gc_core_type == "E":
                # A partially used E module still powers the whole module.
                modules = math.ceil(cores_used / 4)
                gc_w = modules * 4 * p.ecore_active_w
            else:
                gc_w = cores_used * p.pcore_active_w
        return p.uncore_idle_w + p.mutator_cores * p.pcore_active_w + gc_w

    # -- the tick loop -------------------------------------------------------

    def run_for(self, seconds: float, segment: Segment | None = None) -> Segment:
        p = self.p
        if segment is None:
            segment = Segment(sim_ms=0.0, exec_ms=0.0)
        ticks = round(seconds * 1000.0 / p.tick_ms)
        start_stalls = self.stall_count
        if self.dead:
            # The application died; time passes, nothing happens.
            self.tick_index += ticks
            segment.sim_ms += ticks * p.tick_ms
            segment.exec_ms = segment.sim_ms
            return segment
        ticks_done = 0
        for _ in range(ticks):
            ticks_done += 1
            self.tick_index += 1
            now = self.now_ms
            # 1. Mutators allocate; a draw happens every tick so the
            # allocation stream is identical across GC parameter changes.
            u = self._alloc_rng.random()
            raw = p.alloc_rate_mb_s * (p.tick_ms / 1000.0)
            if u < p.burst_prob:
                raw *= p.burst_factor
            effective = min(raw, max(self.free_mb, 0.0))
            if effective < raw:
                # Heap exhausted mid-tick: the mutator stalls (or the world
                # truly has nothing left to reclaim).
                if self.active is not None:
                    kind = (
                        StallKind.ALLOCATION
                        if self.active.phase(now) == "mark"
                        else StallKind.RELOCATION
                    )
                    self._record_stall(kind, now, segment)
                elif self.garbage_mb <= 0.0:
                    self._record_oom(now, segment)
                    self.dead = True
                    break
                else:
                    self._record_stall(StallKind.ALLOCATION, now, segment)
            self.garbage_mb += effective
            self.allocated_mb += effective
            self._window_alloc_mb += effective
            # 2. Allocation-rate EWMA on a fixed window.
            if self.tick_index % self._rate_window_ticks == 0:
                window_s = self._rate_window_ticks * p.tick_ms / 1000.0
                self.state.observe_rate(self._window_alloc_mb / window_s, p.ewma_alpha)
                self._window_alloc_mb = 0.0
            # 3. Complete a cycle whose end time falls inside this tick.
            if self.active is not None:
                prev_phase = self.active.phase(now - p.tick_ms)
                if now >= self.active.end_ms:
                    self._complete_cycle(segment)
                elif prev_phase == "mark" and self.active.phase(now) == "relocate":
                    self._spike_units += 1
            # 4. Maybe start a cycle.
            if self.active is None:
                idle_s = (now - self.last_cycle_end_ms) / 1000.0
                if should_start_cycle(self.free_mb, idle_s, self._work_mb, self.state, p):
                    self._start_cycle(now)
            # 5. Synthetic energy.
            pkg_w = self._tick_power_w()
            tick_s = p.tick_ms / 1000.0
            self._acc_uj["pkg"] += pkg_w * tick_s * 1e6
            self._acc_uj["pp0"] += (pkg_w - p.uncore_idle_w) * tick_s * 1e6
            if self.tick_index % self._energy_ticks == 0:
                self._emit_energy_sample()
            # 6. Latency sampling.
            if p.collect_latency and self.tick_index % self._latency_ticks == 0:
                base = p.latency_base_ms * (1.0 + 0.2 * self._lat_rng.random())
                segment.latency_ms.append(base + p.latency_spike_ms * self._spike_units)
                self._spike_units = 0
            # 7. Conservation: everything allocated is either garbage still
            # in the heap or has been reclaimed.
            if p.check_conservation:
                drift = abs(self.allocated_mb - self.reclaimed_mb - self.garbage_mb)
                if drift > 1e-6 * max(1.0, self.allocated_mb):
                    raise ConservationError(
                        f"tick {self.tick_index}: allocated {self.allocated_mb} != "
                        f"reclaimed {self.reclaimed_mb} + garbage {self.garbage_mb}"
                    )
        if self.dead and ticks_done < ticks:
            # Fast-forward the clock over the remainder of a dead segment.
            self.tick_index += ticks - ticks_done
        segment.sim_ms += ticks * p.tick_ms
        segment_stalls = self.stall_count - start_stalls
        segment.exec_ms = segment.sim_ms + p.stall_exec_penalty_ms * segment_stalls
        return segment

    def _start_cycle(self, now: float) -> None:
        p = self.p
        if p.fixed_workers is not None:
            workers = min(p.fixed_workers, p.worker_capacity)
        else:
            workers = choose_workers(self.free_mb, self._work_mb, self.state, p)
        mark_work = p.live_mb
        reloc_work = p.relocate_share * p.live_mb
        # Association fixed as (work * unit / workers) / speed, see module doc.
        mark_ms = (mark_work * p.gc_unit_cost_ms_per_mb / workers) / p.gc_core_speed
        reloc_ms = (reloc_work * p.gc_unit_cost_ms_per_mb / workers) / p.gc_core_speed
        self.cycle_counter += 1
        kind = (
            GcKind.MAJOR
            if p.minor_per_major and self.cycle_counter % (p.minor_per_major + 1) == 0
            else GcKind.MINOR
        )
        if p.minor_per_major == 0:
            kind = GcKind.MAJOR
        self.active = _ActiveCycle(
            cycle_id=self.cycle_counter,
            kind=kind,
            start_ms=now,
            mark_ms=mark_ms,
            relocate_ms=reloc_ms,
            workers=workers,
            garbage_snapshot_mb=self.garbage_mb,
        )
        self._spike_units += 1

    def _complete_cycle(self, segment: Segment | None) -> None:
        p = self.p
        cycle = self.active
        assert cycle is not None
        self.garbage_mb -= cycle.garbage_snapshot_mb
        self.reclaimed_mb += cycle.garbage_snapshot_mb
        duration = cycle.mark_ms + cycle.relocate_ms
        self.state.record_cycle(
            cycle.workers, duration, self._work_mb, p.gc_core_speed, p.ewma_alpha
        )
        self._record(
            GcCycleRecord(
                cycle_id=cycle.cycle_id,
                kind=cycle.kind,
                start_ms=cycle.start_ms,
                end_ms=cycle.end_ms,
                mark_ms=cycle.mark_ms,
                relocate_ms=cycle.relocate_ms,
                workers=cycle.workers,
                heap_after_mb=p.live_mb + self.garbage_mb,
            ),
            segment,
        )
        self.last_cycle_end_ms = cycle.end_ms
        self.active = None
        self._spike_units += 1

    def finish(self) -> RunEnd:
        end = RunEnd(wall_ms=self.now_ms, heap_mb=self.p.heap_mb)
        self.entries.append(end)
        if self.tick_index % self._energy_ticks != 0:
            self._emit_energy_sample()
        return end

    @property
    def clean(self) -> bool:
        return self.stall_count == 0 and not self.oom


def simulate(params: SimParams) -> SimOutput:
    """One continuous run of `params.run_seconds`, fully deterministic."""
    sim = Simulator(params)
    segment = sim.run_for(params.run_seconds)
    sim.finish()
    return SimOutput(
        params=params,
        clean=sim.clean,
        oom=sim.oom,
        stall_count=sim.stall_count,
        exec_ms=segment.exec_ms,
        wall_ms=sim.now_ms,
        parsed=ParsedLog(entries=list(sim.entries)),
        latency_ms=list(segment.latency_ms),
        energy_samples=list(sim.energy_samples),
        energy_j={k: v / 1e6 for k, v in sim._acc_uj.items()},
        allocated_mb=sim.allocated_mb,
        reclaimed_mb=sim.reclaimed_mb,
    )


def min_clean_heap(
    params: SimParams, lo_mb: float = 1.0, hi_mb: float = 4096.0, tol_mb: float = 0.01
) -> float:
    """Bisect the deterministic stall threshold: smallest heap (within tol)
    for which the run under `params` is clean. Test oracle, not heuristics."""

    def clean_at(heap: float) -> bool:
        return simulate(replace(params, heap_mb=heap)).clean

    if not clean_at(hi_mb):
        raise ValueError(f"no clean heap up to {hi_mb} MB")
    lo, hi = lo_mb, hi_mb
    while hi - lo > tol_mb:
        mid = (lo + hi) / 2.0
        if clean_at(mid):
            hi = mid
        else:
            lo = mid
    return hi
