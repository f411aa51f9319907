"""CPU topology model for asymmetric multicore processors.

Covers hybrid parts with performance (P) and efficiency (E) cores, such as
Alder Lake: P cores carry two hardware threads and private L2, E cores carry
one hardware thread and sit in modules of up to four sharing one L2 slice.

A hardware placement for an experiment is named `<count><P|E>`, meaning the
collector's worker threads run on that many cores of that type while the
application threads stay on a fixed block of P cores.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import ConfigError, TopologyError


class CoreType(Enum):
    P = "P"
    E = "E"


@dataclass(frozen=True)
class Core:
    """One physical core: its hardware threads (logical CPU ids) and caches.

    E cores belonging to the same module share an L2 slice; `l2_kb` then
    records the size of that shared slice, not a per-core share.
    """

    id: int
    type: CoreType
    hw_thread_ids: tuple[int, ...]
    l2_kb: int
    module_id: int | None = None


@dataclass(frozen=True)
class CoreTopology:
    cores: tuple[Core, ...]
    l3_kb: int
    epb: int | None = None  # energy-performance bias hint, 0..15

    def __post_init__(self):
        core_ids = [c.id for c in self.cores]
        if len(set(core_ids)) != len(core_ids):
            raise TopologyError("duplicate core ids")
        cpus: list[int] = []
        for c in self.cores:
            if not c.hw_thread_ids:
                raise TopologyError(f"core {c.id} has no hardware threads")
            cpus.extend(c.hw_thread_ids)
        if len(set(cpus)) != len(cpus):
            raise TopologyError("a logical CPU appears on two cores")
        if self.l3_kb <= 0:
            raise TopologyError("l3_kb must be positive")
        if self.epb is not None and not 0 <= self.epb <= 15:
            raise TopologyError(f"epb {self.epb} outside [0, 15]")
        by_module: dict[int, list[Core]] = {}
        for c in self.cores:
            if c.type is CoreType.E:
                if c.module_id is None:
                    raise TopologyError(f"E core {c.id} lacks a module id")
                by_module.setdefault(c.module_id, []).append(c)
            elif c.module_id is not None:
                raise TopologyError(f"P core {c.id} must not carry a module id")
        for mod, members in by_module.items():
            if len(members) > 4:
                raise TopologyError(f"module {mod} has {len(members)} cores, max 4")
            if len({c.l2_kb for c in members}) != 1:
                raise TopologyError(f"module {mod} members disagree on shared L2 size")

    @property
    def cpu_ids(self) -> tuple[int, ...]:
        return tuple(sorted(cpu for c in self.cores for cpu in c.hw_thread_ids))

    def cores_of(self, core_type: CoreType) -> tuple[Core, ...]:
        return tuple(c for c in self.cores if c.type is core_type)

    @property
    def p_cores(self) -> tuple[Core, ...]:
        return self.cores_of(CoreType.P)

    @property
    def e_cores(self) -> tuple[Core, ...]:
        return self.cores_of(CoreType.E)


@dataclass(frozen=True)
class HardwareConfig:
    """GC placement request: how many cores of which type run GC workers.

    Application (mutator) threads always occupy `mutator_pcore_count` P cores
    disjoint from the GC set.
    """

    gc_core_count: int
    gc_core_type: CoreType
    mutator_pcore_count: int = 4

    def __post_init__(self):
        if self.gc_core_count < 1:
            raise ConfigError("gc_core_count must be at least 1")
        if self.mutator_pcore_count < 1:
            raise ConfigError("mutator_pcore_count must be at least 1")

    @property
    def name(self) -> str:
        return f"{self.gc_core_count}{self.gc_core_type.value}"


_CONFIG_NAME_RE = re.compile(r"^([0-9]+)([PE])$")


def parse_config_name(text: str, mutator_pcore_count: int = 4) -> HardwareConfig:
    """Parse a placement name like "8E" or "2P".

    The count must be a positive decimal integer; the suffix selects the core
    type. Anything else, including "0E" and lowercase suffixes, is rejected.
    """
    m = _CONFIG_NAME_RE.match(text.strip())
    if not m:
        raise ConfigError(f"bad placement name {text!r}, expected <count><P|E>")
    count = int(m.group(1))
    if count < 1:
        raise ConfigError(f"bad placement name {text!r}: count must be >= 1")
    return HardwareConfig(count, CoreType(m.group(2)), mutator_pcore_count)


@dataclass(frozen=True)
class AffinityPlan:
    """Disjoint CPU sets for GC workers and for everything else."""

    config: HardwareConfig
    gc_cpus: frozenset[int] = field(default_factory=frozenset)
    mutator_cpus: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.gc_cpus or not self.mutator_cpus:
            raise TopologyError("affinity plan has an empty CPU set")
        if self.gc_cpus & self.mutator_cpus:
            raise TopologyError("GC and mutator CPU sets overlap")


def _select_gc_cores(config: HardwareConfig, topo: CoreTopology) -> tuple[Core, ...]:
    if config.gc_core_type is CoreType.E:
        # Fill whole E modules before touching the next one, so a partial
        # request powers as few shared-L2 modules as possible.
        pool = sorted(topo.e_cores, key=lambda c: (c.module_id, c.id))
    else:
        mutators = sorted(topo.p_cores, key=lambda c: c.id)[: config.mutator_pcore_count]
        taken = {c.id for c in mutators}
        pool = [c for c in sorted(topo.p_cores, key=lambda c: c.id) if c.id not in taken]
    if len(pool) < config.gc_core_count:
        raise TopologyError(
            f"placement {config.name} needs {config.gc_core_count} free "
            f"{config.gc_core_type.value} cores, topology offers {len(pool)}"
        )
    return tuple(pool[: config.gc_core_count])


def build_affinity_plan(config: HardwareConfig, topo: CoreTopology) -> AffinityPlan:
    """Map a placement onto concrete logical CPUs.

    Mutators take the lowest-numbered P cores; GC-on-P takes the next block of
    P cores after them; GC-on-E fills E modules in id order. Deterministic for
    a given (config, topology) pair.
    """
    mutator_cores = sorted(topo.p_cores, key=lambda c: c.id)[: config.mutator_pcore_count]
    if len(mutator_cores) < config.mutator_pcore_count:
        raise TopologyError(
            f"topology has {len(topo.p_cores)} P cores, "
            f"{config.mutator_pcore_count} needed for mutators"
        )
    gc_cores = _select_gc_cores(config, topo)
    gc_cpus = frozenset(cpu for c in gc_cores for cpu in c.hw_thread_ids)
    mut_cpus = frozenset(cpu for c in mutator_cores for cpu in c.hw_thread_ids)
    return AffinityPlan(config=config, gc_cpus=gc_cpus, mutator_cpus=mut_cpus)


def hwt_count(config: HardwareConfig, topo: CoreTopology) -> int:
    """Hardware threads the GC set provides under this topology."""
    return sum(len(c.hw_thread_ids) for c in _select_gc_cores(config, topo))


def hwt_ratio(
    a: HardwareConfig, b: HardwareConfig, topo: CoreTopology
) -> tuple[int, int]:
    """Reduced ratio of hardware-thread counts, in argument order.

    hwt_ratio(a, b) == (x, y) implies (x * g, y * g) == (hwt_count(a),
    hwt_count(b)) for g = gcd of the two counts. Callers that print a
    baseline-first table swap the arguments, not the result.
    """
    ca, cb = hwt_count(a, topo), hwt_count(b, topo)
    g = math.gcd(ca, cb)
    return ca // g, cb // g


def i9_12900k() -> CoreTopology:
    """Built-in reference topology: 8 P cores (2 HWT, 1.25 MB L2 each) plus
    8 E cores in two modules of four sharing 2 MB L2 each, 30 MB L3."""
    cores = []
    for i in range(8):
        cores.append(Core(i, CoreType.P, (2 * i, 2 * i + 1), 1280))
    for i in range(8):
        cores.append(Core(8 + i, CoreType.E, (16 + i,), 2048, module_id=i // 4))
    return CoreTopology(cores=tuple(cores), l3_kb=30720, epb=15)


# --- fixture file format -------------------------------------------------
#
# Flat "key = value" lines:
#   cpu.<id>.core  = <core id>
#   core.<id>.type = P|E
#   core.<id>.module = <module id>      (E cores only)
#   core.<id>.l2_kb  = <int>
#   l3_kb = <int>
#   epb   = <int>                        (optional)


def parse_topology_text(text: str) -> CoreTopology:
    cpu_to_core: dict[int, int] = {}
    core_attrs: dict[int, dict[str, str]] = {}
    l3_kb: int | None = None
    epb: int | None = None
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TopologyError(f"line {line_no}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        parts = key.split(".")
        try:
            if parts[0] == "cpu" and len(parts) == 3 and parts[2] == "core":
                cpu_to_core[int(parts[1])] = int(value)
            elif parts[0] == "core" and len(parts) == 3:
                core_attrs.setdefault(int(parts[1]), {})[parts[2]] = value
            elif key == "l3_kb":
                l3_kb = int(value)
            elif key == "epb":
                epb = int(value)
            else:
                raise TopologyError(f"line {line_no}: unknown key {key!r}")
        except ValueError as exc:
            raise TopologyError(f"line {line_no}: {exc}") from exc
    if l3_kb is None:
        raise TopologyError("fixture lacks l3_kb")
    cores = []
    for core_id in sorted(core_attrs):
        attrs = core_attrs[core_id]
        threads = tuple(sorted(cpu for cpu, c in cpu_to_core.items() if c == core_id))
        try:
            ctype = CoreType(attrs["type"])
            l2_kb = int(attrs["l2_kb"])
        except KeyError as exc:
            raise TopologyError(f"core {core_id} lacks attribute {exc}") from exc
        module = int(attrs["module"]) if "module" in attrs else None
        cores.append(Core(core_id, ctype, threads, l2_kb, module))
    return CoreTopology(cores=tuple(cores), l3_kb=l3_kb, epb=epb)


def dump_topology_text(topo: CoreTopology) -> str:
    lines = []
    for core in sorted(topo.cores, key=lambda c: c.id):
        for cpu in core.hw_thread_ids:
            lines.append(f"cpu.{cpu}.core = {core.id}")
    for core in sorted(topo.cores, key=lambda c: c.id):
        lines.append(f"core.{core.id}.type = {core.type.value}")
        if core.module_id is not None:
            lines.append(f"core.{core.id}.module = {core.module_id}")
        lines.append(f"core.{core.id}.l2_kb = {core.l2_kb}")
    lines.append(f"l3_kb = {topo.l3_kb}")
    if topo.epb is not None:
        lines.append(f"epb = {topo.epb}")
    return "\n".join(lines) + "\n"


def load_topology_file(path: str | Path) -> CoreTopology:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise TopologyError(f"cannot read topology fixture {path}: {exc}") from exc
    return parse_topology_text(text)


# --- live detection ------------------------------------------------------


def _read(path: Path) -> str:
    return path.read_text().strip()


def _parse_cpu_list(text: str) -> set[int]:
    """Parse a sysfs cpu list like "0-15,22" into a set of ids."""
    cpus: set[int] = set()
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "-" in chunk:
            lo, hi = chunk.split("-", 1)
            cpus.update(range(int(lo), int(hi) + 1))
        else:
            cpus.add(int(chunk))
    return cpus


def _parse_cache_size(text: str) -> int:
    text = text.strip()
    if text.endswith("K"):
        return int(text[:-1])
    if text.endswith("M"):
        return int(float(text[:-1]) * 1024)
    return int(text)


def detect_topology(sysfs_root: str | Path = "/sys") -> CoreTopology:
    """Build a topology from the OS interface under `sysfs_root`.

    Hybrid parts advertise their core types via devices/cpu_core/cpus and
    devices/cpu_atom/cpus; machines without those files are treated as
    homogeneous all-P. Raises TopologyError when the tree is unreadable,
    it never falls back to a fixture on its own.
    """
    root = Path(sysfs_root)
    cpu_dir = root / "devices" / "system" / "cpu"
    try:
        cpu_ids = sorted(
            int(p.name[3:])
            for p in cpu_dir.iterdir()
            if re.fullmatch(r"cpu\d+", p.name)
        )
    except OSError as exc:
        raise TopologyError(f"cannot enumerate CPUs under {cpu_dir}: {exc}") from exc
    if not cpu_ids:
        raise TopologyError(f"no cpu directories under {cpu_dir}")

    try:
        p_cpus = _parse_cpu_list(_read(root / "devices" / "cpu_core" / "cpus"))
        e_cpus = _parse_cpu_list(_read(root / "devices" / "cpu_atom" / "cpus"))
    except OSError:
        p_cpus, e_cpus = set(cpu_ids), set()

    threads_by_core: dict[tuple[str, int], list[int]] = {}
    cluster_of: dict[tuple[str, int], int | None] = {}
    l2_of: dict[tuple[str, int], int] = {}
    l3_kb = 0
    for cpu in cpu_ids:
        base = cpu_dir / f"cpu{cpu}"
        try:
            core_id = int(_read(base / "topology" / "core_id"))
        except OSError as exc:
            raise TopologyError(f"cpu{cpu}: cannot read core_id: {exc}") from exc
        kind = "E" if cpu in e_cpus else "P"
        key = (kind, core_id)
        threads_by_core.setdefault(key, []).append(cpu)
        try:
            cluster_of[key] = int(_read(base / "topology" / "cluster_id"))
        except (OSError, ValueError):
            cluster_of.setdefault(key, None)
        try:
            l2_of[key] = _parse_cache_size(_read(base / "cache" / "index2" / "size"))
        except (OSError, ValueError):
            l2_of.setdefault(key, 0)
        try:
            l3_kb = max(l3_kb, _parse_cache_size(_read(base / "cache" / "index3" / "size")))
        except (OSError, ValueError):
            pass
    if l3_kb <= 0:
        raise TopologyError("no readable L3 size in the CPU tree")

    epb: int | None = None
    try:
        epb = int(_read(cpu_dir / "cpu0" / "power" / "energy_perf_bias"))
    except (OSError, ValueError):
        pass

    # sysfs core_id values can collide between the P and E domains, so
    # re-number cores sequentially: P cores first, then E cores.
    cores: list[Core] = []
    next_id = 0
    e_clusters: dict[int, int] = {}
    for kind in ("P", "E"):
        keys = sorted(k for k in threads_by_core if k[0] == kind)
        for key in keys:
            threads = tuple(sorted(threads_by_core[key]))
            module = None
            if kind == "E":
                cluster = cluster_of.get(key)
                if cluster is None:
                    # No cluster ids exposed: group E cores by fours in order.
                    cluster = -(len([c for c in cores if c.type is CoreType.E]) // 4) - 1
                module = e_clusters.setdefault(cluster, len(e_clusters))
            cores.append(Core(next_id, CoreType(kind), threads, l2_of.get(key, 0), module))
            next_id += 1
    return CoreTopology(cores=tuple(cores), l3_kb=l3_kb, epb=epb)
