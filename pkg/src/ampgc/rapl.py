"""Energy counter access and accounting.

Counters are cumulative microjoule registers that wrap at a per-domain
maximum; deltas are therefore computed modulo that range. The sampling
cadence (default 100 ms plus reads at iteration boundaries) keeps any
realistic package power far below one wrap per interval, which is the
assumption the modular correction rests on. A delta implying more than
2 kW is rejected as a mis-specified range rather than reported.

Backends:
  * PowercapBackend - /sys/class/powercap file tree (root configurable).
  * MsrBackend      - raw MSR reads via /dev/cpu/*/msr, optional.
  * FixtureBackend  - CSV replay (timestamp_ns,domain,counter_uj).
  * SyntheticBackend- deterministic constant-power ramp, for dry runs.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import AmpgcError, ConfigError, PermissionDenied


class EnergyDomain(Enum):
    PKG = "pkg"
    PP0 = "pp0"
    PP1 = "pp1"
    DRAM = "dram"


@dataclass(frozen=True)
class EnergySample:
    domain: EnergyDomain
    timestamp_ns: int
    counter_uj: int

    def __post_init__(self):
        if self.counter_uj < 0:
            raise ValueError("counter_uj must be non-negative")


@dataclass(frozen=True)
class EnergyDelta:
    domain: EnergyDomain
    joules: float
    duration_ns: int


# Typical package counter range; fixtures default to it.
DEFAULT_MAX_RANGE_UJ = 262_144_000_000
POWER_SANITY_W = 2000.0


class EnergyRangeError(AmpgcError):
    """A delta implied an impossible power draw, max_range_uj is suspect."""


class FixtureExhausted(AmpgcError):
    """The replay fixture ran out of rows for a domain."""


def delta(s1: EnergySample, s2: EnergySample, max_range_uj: int) -> EnergyDelta:
    """Energy between two samples of one domain, wrap-corrected.

    Assumes at most one counter wrap between the reads; the sampling period
    makes more than one physically implausible.
    """
    if s1.domain is not s2.domain:
        raise ValueError(f"domain mismatch: {s1.domain.value} vs {s2.domain.value}")
    if max_range_uj <= 0:
        raise ValueError("max_range_uj must be positive")
    if s2.timestamp_ns < s1.timestamp_ns:
        raise ValueError("samples out of order")
    raw = (s2.counter_uj - s1.counter_uj) % max_range_uj
    joules = raw / 1e6
    duration_ns = s2.timestamp_ns - s1.timestamp_ns
    if duration_ns > 0:
        watts = joules / (duration_ns / 1e9)
        if watts > POWER_SANITY_W:
            raise EnergyRangeError(
                f"{s1.domain.value}: {watts:.0f} W over {duration_ns} ns "
                f"exceeds {POWER_SANITY_W:.0f} W; check max_range_uj"
            )
    return EnergyDelta(domain=s1.domain, joules=joules, duration_ns=duration_ns)


def total_energy(samples: Sequence[EnergySample], max_range_uj: int) -> EnergyDelta:
    """Total energy across an ordered sample series, telescoping deltas.

    Summing adjacent deltas (rather than last-minus-first) keeps every
    intermediate wrap visible to the correction.
    """
    if len(samples) < 2:
        raise ValueError("total_energy needs at least 2 samples (no interval otherwise)")
    joules = 0.0
    for s1, s2 in zip(samples, samples[1:]):
        joules += delta(s1, s2, max_range_uj).joules
    return EnergyDelta(
        domain=samples[0].domain,
        joules=joules,
        duration_ns=samples[-1].timestamp_ns - samples[0].timestamp_ns,
    )


# --- fixture CSV -----------------------------------------------------------

FIXTURE_HEADER = "timestamp_ns,domain,counter_uj"


def parse_fixture_csv(text: str) -> list[EnergySample]:
    samples: list[EnergySample] = []
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line == FIXTURE_HEADER:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ConfigError(f"energy fixture line {line_no}: expected 3 fields")
        try:
            samples.append(
                EnergySample(
                    domain=EnergyDomain(parts[1].strip()),
                    timestamp_ns=int(parts[0]),
                    counter_uj=int(parts[2]),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"energy fixture line {line_no}: {exc}") from exc
    return samples


def dump_fixture_csv(samples: Iterable[EnergySample]) -> str:
    lines = [FIXTURE_HEADER]
    for s in samples:
        lines.append(f"{s.timestamp_ns},{s.domain.value},{s.counter_uj}")
    return "\n".join(lines) + "\n"


# --- backends --------------------------------------------------------------


class PowercapBackend:
    """Reads intel-rapl zones from a powercap-style file tree."""

    _NAME_TO_DOMAIN = {
        "package": EnergyDomain.PKG,
        "core": EnergyDomain.PP0,
        "uncore": EnergyDomain.PP1,
        "dram": EnergyDomain.DRAM,
    }

    def __init__(self, root: str | Path = "/sys/class/powercap"):
        self.root = Path(root)
        self._zones: dict[EnergyDomain, Path] = {}
        self._ranges: dict[EnergyDomain, int] = {}
        self._scan()

    def _scan(self) -> None:
        try:
            zone_dirs = sorted(
                p for p in self.root.iterdir() if p.name.startswith("intel-rapl")
            )
        except OSError as exc:
            raise ConfigError(f"cannot read powercap tree {self.root}: {exc}") from exc
        stack = list(zone_dirs)
        while stack:
            zone = stack.pop()
            name_file = zone / "name"
            if not name_file.is_file():
                continue
            name = name_file.read_text().strip()
            key = name.split("-")[0]
            domain = self._NAME_TO_DOMAIN.get(key)
            if domain is not None and domain not in self._zones:
                self._zones[domain] = zone
                try:
                    self._ranges[domain] = int(
                        (zone / "max_energy_range_uj").read_text()
                    )
                except (OSError, ValueError):
                    self._ranges[domain] = DEFAULT_MAX_RANGE_UJ
            stack.extend(p for p in zone.iterdir() if p.is_dir() and p.name.startswith("intel-rapl"))
        if not self._zones:
            raise ConfigError(f"no intel-rapl zones under {self.root}")

    def available_domains(self) -> frozenset[EnergyDomain]:
        return frozenset(self._zones)

    def max_range_uj(self, domain: EnergyDomain) -> int:
        return self._ranges[domain]

    def read_counter(self, domain: EnergyDomain) -> EnergySample:
        zone = self._zones.get(domain)
        if zone is None:
            raise ConfigError(f"domain {domain.value} not exposed by {self.root}")
        try:
            counter = int((zone / "energy_uj").read_text())
        except PermissionError as exc:
            raise PermissionDenied(
                f"reading {zone / 'energy_uj'} requires elevated privileges"
            ) from exc
        except (OSError, ValueError) as exc:
            raise AmpgcError(f"cannot read {zone / 'energy_uj'}: {exc}") from exc
        return EnergySample(domain, time.monotonic_ns(), counter)


class MsrBackend:
    """Raw MSR energy-status reads; needs the msr module and privileges."""

    _MSR_RAPL_POWER_UNIT = 0x606
    _COUNTER_MSR = {
        EnergyDomain.PKG: 0x611,
        EnergyDomain.PP0: 0x639,
        EnergyDomain.PP1: 0x641,
        EnergyDomain.DRAM: 0x619,
    }

    def __init__(self, dev_path: str | Path = "/dev/cpu/0/msr"):
        self.dev_path = Path(dev_path)
        unit_reg = self._read_msr(self._MSR_RAPL_POWER_UNIT)
        # Energy status unit: bits 12:8, counter LSB = 1/2^unit joules.
        self._unit_j = 0.5 ** ((unit_reg >> 8) & 0x1F)

    def _read_msr(self, offset: int) -> int:
        try:
            with open(self.dev_path, "rb") as f:
                f.seek(offset)
                return struct.unpack("<Q", f.read(8))[0]
        except PermissionError as exc:
            raise PermissionDenied(f"cannot read {self.dev_path}: {exc}") from exc
        except OSError as exc:
            raise AmpgcError(f"cannot read {self.dev_path}: {exc}") from exc

    def available_domains(self) -> frozenset[EnergyDomain]:
        return frozenset(self._COUNTER_MSR)

    def max_range_uj(self, domain: EnergyDomain) -> int:
        # 32-bit raw counter scaled by the unit register.
        return int((1 << 32) * self._unit_j * 1e6)

    def read_counter(self, domain: EnergyDomain) -> EnergySample:
        raw = self._read_msr(self._COUNTER_MSR[domain]) & 0xFFFFFFFF
        uj = int(raw * self._unit_j * 1e6)
        return EnergySample(domain, time.monotonic_ns(), uj)


class FixtureBackend:
    """Replays a recorded counter series; each read pops the next row."""

    def __init__(
        self,
        source: str | Path | Sequence[EnergySample],
        max_range_uj: int = DEFAULT_MAX_RANGE_UJ,
    ):
        if isinstance(source, (str, Path)):
            try:
                samples = parse_fixture_csv(Path(source).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read energy fixture {source}: {exc}") from exc
        else:
            samples = list(source)
        self._queues: dict[EnergyDomain, list[EnergySample]] = {}
        for s in samples:
            self._queues.setdefault(s.domain, []).append(s)
        self._max_range = max_range_uj

    def available_domains(self) -> frozenset[EnergyDomain]:
        return frozenset(self._queues)

    def max_range_uj(self, domain: EnergyDomain) -> int:
        return self._max_range

    def read_counter(self, domain: EnergyDomain) -> EnergySample:
        queue = self._queues.get(domain)
        if not queue:
            raise FixtureExhausted(f"fixture has no more {domain.value} rows")
        return queue.pop(0)


class SyntheticBackend:
    """Deterministic ramp: a fixed wattage per domain, clocked by reads.

    Each read advances a virtual clock by a fixed period, so runs that make
    the same sequence of reads observe identical samples.
    """

    def __init__(
        self,
        watts: dict[EnergyDomain, float] | None = None,
        period_ns: int = 100_000_000,
        max_range_uj: int = DEFAULT_MAX_RANGE_UJ,
    ):
        self._watts = watts or {EnergyDomain.PKG: 50.0, EnergyDomain.PP0: 35.0}
        self._period_ns = period_ns
        self._max_range = max_range_uj
        self._now_ns = 0

    def available_domains(self) -> frozenset[EnergyDomain]:
        return frozenset(self._watts)

    def max_range_uj(self, domain: EnergyDomain) -> int:
        return self._max_range

    def read_counter(self, domain: EnergyDomain) -> EnergySample:
        if domain not in self._watts:
            raise ConfigError(f"synthetic backend lacks domain {domain.value}")
        self._now_ns += self._period_ns
        uj = int(self._watts[domain] * self._now_ns / 1e3) % self._max_range
        return EnergySample(domain, self._now_ns, uj)


@dataclass
class EnergySeries:
    domain: EnergyDomain
    samples: list[EnergySample] = field(default_factory=list)
    truncated: bool = False

    def total(self, max_range_uj: int) -> EnergyDelta:
        return total_energy(self.samples, max_range_uj)


class EnergyMeter:
    """Collects boundary samples for a set of domains from one backend."""

    def __init__(self, backend, domains: Sequence[EnergyDomain]):
        missing = set(domains) - set(backend.available_domains())
        if missing:
            raise ConfigError(
                "backend lacks domains: " + ", ".join(sorted(d.value for d in missing))
            )
        self.backend = backend
        self.domains = tuple(domains)
        self.series: dict[EnergyDomain, EnergySeries] = {
            d: EnergySeries(d) for d in self.domains
        }

    def read_boundary(self) -> dict[EnergyDomain, EnergySample]:
        """One sample per domain; a failing backend marks the series truncated."""
        out: dict[EnergyDomain, EnergySample] = {}
        for d in self.domains:
            try:
                sample = self.backend.read_counter(d)
            except AmpgcError:
                self.series[d].truncated = True
                raise
            self.series[d].samples.append(sample)
            out[d] = sample
        return out

    def interval_joules(self, a: dict, b: dict) -> dict[str, float]:
        """Energy between two boundary reads, keyed by domain value."""
        return {
            d.value: delta(a[d], b[d], self.backend.max_range_uj(d)).joules
            for d in self.domains
        }
