"""Canonical line-oriented GC log grammar: parsing, emission, run metrics.

Three tags, all key=value after the tag word:

    GCCYCLE id=<int> kind=<minor|major> start=<ms> end=<ms> mark=<ms>
            reloc=<ms> workers=<int> heap_after=<mb>
    STALL kind=<allocation|relocation|oom> t=<ms>
    RUNEND wall=<ms> heap=<mb>

Lines with any other leading word are not part of the grammar and are
skipped (counted, not errored): real collector logs interleave noise.
A malformed line that *does* carry a known tag is an error, reported with
its line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .errors import LogParseError


class GcKind(Enum):
    MINOR = "minor"
    MAJOR = "major"


class StallKind(Enum):
    ALLOCATION = "allocation"
    RELOCATION = "relocation"
    OOM = "oom"


@dataclass(frozen=True)
class GcCycleRecord:
    cycle_id: int
    kind: GcKind
    start_ms: float
    end_ms: float
    mark_ms: float
    relocate_ms: float
    workers: int
    heap_after_mb: float

    def __post_init__(self):
        if self.end_ms < self.start_ms:
            raise LogParseError(f"cycle {self.cycle_id}: end precedes start")
        if self.mark_ms <= 0 or self.relocate_ms <= 0:
            raise LogParseError(f"cycle {self.cycle_id}: phase durations must be > 0")
        if self.workers < 1:
            raise LogParseError(f"cycle {self.cycle_id}: workers must be >= 1")


@dataclass(frozen=True)
class StallEvent:
    kind: StallKind
    at_ms: float


@dataclass(frozen=True)
class RunEnd:
    wall_ms: float
    heap_mb: float


@dataclass
class ParsedLog:
    """Parsed log preserving the original interleaving of entries."""

    entries: list[GcCycleRecord | StallEvent | RunEnd] = field(default_factory=list)
    skipped: int = 0

    @property
    def cycles(self) -> list[GcCycleRecord]:
        return [e for e in self.entries if isinstance(e, GcCycleRecord)]

    @property
    def stalls(self) -> list[StallEvent]:
        return [e for e in self.entries if isinstance(e, StallEvent)]

    @property
    def run_end(self) -> RunEnd | None:
        for e in reversed(self.entries):
            if isinstance(e, RunEnd):
                return e
        return None


def fmt_num(x: float | int) -> str:
    """Shortest exact decimal form, the grammar's canonical number format."""
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def _fields(parts: list[str], line_no: int | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for part in parts:
        if "=" not in part:
            raise LogParseError(f"expected key=value, got {part!r}", line_no)
        key, value = part.split("=", 1)
        if key in out:
            raise LogParseError(f"duplicate field {key!r}", line_no)
        out[key] = value
    return out


def _take(fields: dict[str, str], key: str, conv, line_no: int | None):
    try:
        raw = fields.pop(key)
    except KeyError:
        raise LogParseError(f"missing field {key!r}", line_no) from None
    try:
        return conv(raw)
    except (ValueError, KeyError) as exc:
        raise LogParseError(f"field {key}={raw!r}: {exc}", line_no) from None


def parse_line(line: str, line_no: int | None = None):
    """Parse one line. Returns a record, or None for lines outside the grammar."""
    parts = line.split()
    if not parts:
        return None
    tag = parts[0]
    if tag == "GCCYCLE":
        f = _fields(parts[1:], line_no)
        rec = GcCycleRecord(
            cycle_id=_take(f, "id", int, line_no),
            kind=_take(f, "kind", GcKind, line_no),
            start_ms=_take(f, "start", float, line_no),
            end_ms=_take(f, "end", float, line_no),
            mark_ms=_take(f, "mark", float, line_no),
            relocate_ms=_take(f, "reloc", float, line_no),
            workers=_take(f, "workers", int, line_no),
            heap_after_mb=_take(f, "heap_after", float, line_no),
        )
    elif tag == "STALL":
        f = _fields(parts[1:], line_no)
        rec = StallEvent(
            kind=_take(f, "kind", StallKind, line_no),
            at_ms=_take(f, "t", float, line_no),
        )
    elif tag == "RUNEND":
        f = _fields(parts[1:], line_no)
        rec = RunEnd(
            wall_ms=_take(f, "wall", float, line_no),
            heap_mb=_take(f, "heap", float, line_no),
        )
    else:
        return None
    if f:
        raise LogParseError(f"unknown fields {sorted(f)}", line_no)
    return rec


def parse_log(lines: Iterable[str]) -> ParsedLog:
    log = ParsedLog()
    for line_no, line in enumerate(lines, 1):
        rec = parse_line(line, line_no)
        if rec is None:
            if line.strip():
                log.skipped += 1
            continue
        log.entries.append(rec)
    return log


def emit_entry(entry: GcCycleRecord | StallEvent | RunEnd) -> str:
    if isinstance(entry, GcCycleRecord):
        return (
            f"GCCYCLE id={entry.cycle_id} kind={entry.kind.value}"
            f" start={fmt_num(entry.start_ms)} end={fmt_num(entry.end_ms)}"
            f" mark={fmt_num(entry.mark_ms)} reloc={fmt_num(entry.relocate_ms)}"
            f" workers={entry.workers} heap_after={fmt_num(entry.heap_after_mb)}"
        )
    if isinstance(entry, StallEvent):
        return f"STALL kind={entry.kind.value} t={fmt_num(entry.at_ms)}"
    if isinstance(entry, RunEnd):
        return f"RUNEND wall={fmt_num(entry.wall_ms)} heap={fmt_num(entry.heap_mb)}"
    raise TypeError(f"not a log entry: {entry!r}")


def emit(log: ParsedLog) -> list[str]:
    """Inverse of parse_log on canonical logs: emit(parse_log(L)) == L."""
    return [emit_entry(e) for e in log.entries]


@dataclass(frozen=True)
class RunMetrics:
    """Aggregates over one run (or one iteration slice of a run)."""

    num_cycles: int
    num_minor: int
    num_major: int
    gc_time_ms: float
    mark_time_ms: float
    relocate_time_ms: float
    gc_activity: float
    avg_workers: float | None
    heap_per_worker_mb: float | None
    stall_count: int
    oom: bool
    wall_ms: float
    heap_mb: float
    activity_overflow: bool

    @property
    def clean(self) -> bool:
        return self.stall_count == 0 and not self.oom


def derive_metrics(
    cycles: Iterable[GcCycleRecord],
    stalls: Iterable[StallEvent],
    wall_ms: float,
    heap_mb: float,
) -> RunMetrics:
    """Fold cycle records and stall events into run-level metrics.

    GC time is the sum of mark and relocate phase durations, so concurrent
    cycles can push gc_activity above 1.0; the value is reported unclamped
    with `activity_overflow` set instead of silently losing information.
    """
    cycles = list(cycles)
    stalls = list(stalls)
    if wall_ms <= 0:
        raise ValueError("wall_ms must be positive")
    mark = sum(c.mark_ms for c in cycles)
    reloc = sum(c.relocate_ms for c in cycles)
    gc_time = mark + reloc
    activity = gc_time / wall_ms
    avg_workers = None
    heap_per_worker = None
    if cycles:
        avg_workers = sum(c.workers for c in cycles) / len(cycles)
        heap_per_worker = heap_mb / avg_workers
    return RunMetrics(
        num_cycles=len(cycles),
        num_minor=sum(1 for c in cycles if c.kind is GcKind.MINOR),
        num_major=sum(1 for c in cycles if c.kind is GcKind.MAJOR),
        gc_time_ms=gc_time,
        mark_time_ms=mark,
        relocate_time_ms=reloc,
        gc_activity=activity,
        avg_workers=avg_workers,
        heap_per_worker_mb=heap_per_worker,
        stall_count=len(stalls),
        oom=any(s.kind is StallKind.OOM for s in stalls),
        wall_ms=wall_ms,
        heap_mb=heap_mb,
        activity_overflow=activity > 1.0,
    )


def is_clean_run(log: ParsedLog) -> bool:
    """A clean run saw no stall events of any kind and no OOM."""
    return not log.stalls
