"""Thread discovery, role classification, and CPU pinning.

The target process is observed from outside: its thread list is polled (a
/proc-style tree for real processes, a scripted mock in tests), each new
thread is classified by name against ordered rules, and pinned exactly once
to the CPU set its role maps to. Threads appearing between polls run
unpinned for at most one polling period; that bound is recorded on every
pin so downstream analysis can reason about it.

Later name changes never repin: pin-once is what makes runs reproducible.
"""

from __future__ import annotations

import fnmatch
import logging
import os
import queue
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import PermissionDenied, TopologyError
from .topology import AffinityPlan

log = logging.getLogger(__name__)


class ThreadRole(Enum):
    GC_WORKER = "GcWorker"
    JIT_COMPILER = "JitCompiler"
    VM_SERVICE = "VmService"
    MUTATOR = "Mutator"
    UNCLASSIFIED = "Unclassified"


@dataclass(frozen=True)
class RoleRule:
    """Name pattern -> role. Globs allowed; a bare prefix matches prefix."""

    pattern: str
    role: ThreadRole
    priority: int = 0

    def matches(self, name: str) -> bool:
        if any(ch in self.pattern for ch in "*?["):
            return fnmatch.fnmatchcase(name, self.pattern)
        return name.startswith(self.pattern)


# Default rules for HotSpot-style thread names ("ZWorkerYoung#3",
# "C2 CompilerThread0", "VM Periodic Task Thread", ...).
DEFAULT_RULES: tuple[RoleRule, ...] = (
    RoleRule("ZWorker", ThreadRole.GC_WORKER, 100),
    RoleRule("ZDriver", ThreadRole.GC_WORKER, 100),
    RoleRule("GC", ThreadRole.GC_WORKER, 90),
    RoleRule("C1 ", ThreadRole.JIT_COMPILER, 80),
    RoleRule("C2 ", ThreadRole.JIT_COMPILER, 80),
    RoleRule("Compiler", ThreadRole.JIT_COMPILER, 70),
    RoleRule("VM ", ThreadRole.VM_SERVICE, 60),
)


def classify_thread(name: str, rules: tuple[RoleRule, ...] = DEFAULT_RULES) -> ThreadRole:
    """Highest-priority matching rule wins; ties break by rule order.

    No match classifies as UNCLASSIFIED, which shares the mutator CPU set:
    an unknown thread must never land on the GC cores by accident.
    """
    best: RoleRule | None = None
    for rule in rules:
        if rule.matches(name) and (best is None or rule.priority > best.priority):
            best = rule
    return best.role if best else ThreadRole.UNCLASSIFIED


def cpus_for_role(plan: AffinityPlan, role: ThreadRole) -> frozenset[int]:
    if role is ThreadRole.GC_WORKER:
        return plan.gc_cpus
    return plan.mutator_cpus


@dataclass(frozen=True)
class PinRecord:
    tid: int
    name: str
    role: ThreadRole
    cpus: frozenset[int]
    timestamp_ns: int
    # Worst-case time the thread ran before we saw and pinned it.
    unpinned_window_ns: int


class OsThreadBackend:
    """Real processes: thread list from a /proc-style tree, affinity via OS."""

    def __init__(self, proc_root: str | Path = "/proc"):
        self.proc_root = Path(proc_root)

    def list_threads(self, pid: int) -> list[tuple[int, str]]:
        task_dir = self.proc_root / str(pid) / "task"
        threads: list[tuple[int, str]] = []
        try:
            tid_dirs = sorted(
                (p for p in task_dir.iterdir() if re.fullmatch(r"\d+", p.name)),
                key=lambda p: int(p.name),
            )
        except FileNotFoundError:
            return []  # process already gone
        except PermissionError as exc:
            raise PermissionDenied(f"cannot list {task_dir}: {exc}") from exc
        for tid_dir in tid_dirs:
            try:
                name = (tid_dir / "comm").read_text().rstrip("\n")
            except OSError:
                continue  # raced with thread exit
            threads.append((int(tid_dir.name), name))
        return threads

    def set_affinity(self, tid: int, cpus: frozenset[int]) -> bool:
        """Pin one thread. False when the thread vanished, error on refusal."""
        try:
            os.sched_setaffinity(tid, cpus)
            return True
        except ProcessLookupError:
            return False
        except PermissionError as exc:
            raise PermissionDenied(f"sched_setaffinity(tid={tid}): {exc}") from exc


class MockThreadBackend:
    """Scripted thread list for tests; records every affinity call."""

    def __init__(self, threads: list[tuple[int, str]] | None = None):
        self.threads: list[tuple[int, str]] = list(threads or [])
        self.affinity_calls: list[tuple[int, frozenset[int]]] = []
        self.affinities: dict[int, frozenset[int]] = {}
        self.missing_tids: set[int] = set()
        self.deny_permission = False

    def add_thread(self, tid: int, name: str) -> None:
        self.threads.append((tid, name))

    def rename_thread(self, tid: int, name: str) -> None:
        self.threads = [(t, name if t == tid else n) for t, n in self.threads]

    def list_threads(self, pid: int) -> list[tuple[int, str]]:
        return list(self.threads)

    def set_affinity(self, tid: int, cpus: frozenset[int]) -> bool:
        if self.deny_permission:
            raise PermissionDenied(f"mock denied affinity for tid {tid}")
        if tid in self.missing_tids:
            return False
        self.affinity_calls.append((tid, cpus))
        self.affinities[tid] = cpus
        return True


class PinWatcher:
    """Polls a process's threads and pins each new one exactly once."""

    def __init__(
        self,
        pid: int,
        plan: AffinityPlan,
        rules: tuple[RoleRule, ...] = DEFAULT_RULES,
        backend=None,
        poll_period_ms: float = 10.0,
    ):
        if poll_period_ms <= 0:
            raise ValueError("poll_period_ms must be positive")
        self.pid = pid
        self.plan = plan
        self.rules = tuple(rules)
        self.backend = backend if backend is not None else OsThreadBackend()
        self.poll_period_ms = poll_period_ms
        self.pinned: dict[int, PinRecord] = {}
        self.records: list[PinRecord] = []
        self.record_queue: queue.Queue[PinRecord] = queue.Queue()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._error: Exception | None = None
        self._lock = threading.Lock()

    def scan_once(self) -> list[PinRecord]:
        """One poll: classify and pin threads not seen before."""
        new_records: list[PinRecord] = []
        window_ns = int(self.poll_period_ms * 1e6)
        for tid, name in self.backend.list_threads(self.pid):
            with self._lock:
                if tid in self.pinned:
                    continue
            role = classify_thread(name, self.rules)
            cpus = cpus_for_role(self.plan, role)
            if not self.backend.set_affinity(tid, cpus):
                continue  # vanished between list and pin; not marked pinned
            record = PinRecord(
                tid=tid,
                name=name,
                role=role,
                cpus=cpus,
                timestamp_ns=time.monotonic_ns(),
                unpinned_window_ns=window_ns,
            )
            with self._lock:
                self.pinned[tid] = record
                self.records.append(record)
            self.record_queue.put(record)
            new_records.append(record)
        return new_records

    def _loop(self) -> None:
        period_s = self.poll_period_ms / 1000.0
        while not self._stop.is_set():
            try:
                self.scan_once()
            except Exception as exc:  # surfaced on join/release
                self._error = exc
                return
            self._stop.wait(period_s)

    def start(self) -> "PinWatcher":
        if self._thread is not None:
            return self
        self._thread = threading.Thread(target=self._loop, name="pin-watcher", daemon=True)
        self._thread.start()
        return self

    def release(self) -> None:
        """Stop polling, leave affinities in place. Safe to call twice."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
        if self._error is not None:
            err, self._error = self._error, None
            raise err

    # context manager sugar
    def __enter__(self) -> "PinWatcher":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.release()


def apply_plan(
    pid: int,
    plan: AffinityPlan,
    rules: tuple[RoleRule, ...] = DEFAULT_RULES,
    backend=None,
    poll_period_ms: float = 10.0,
    autostart: bool = True,
) -> PinWatcher:
    """Attach a pin watcher to a process. Empty CPU sets are rejected by the
    plan itself at construction; this only wires up the polling."""
    if not plan.gc_cpus or not plan.mutator_cpus:
        raise TopologyError("affinity plan has an empty CPU set")
    watcher = PinWatcher(pid, plan, rules, backend, poll_period_ms)
    if autostart:
        watcher.start()
    return watcher
