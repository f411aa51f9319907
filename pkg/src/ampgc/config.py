"""Experiment configuration: a flat key = value file with dotted keys.

Lines are `key = value`; blank lines and lines starting with # are
skipped. Every key must be known (a typo fails loudly, it never falls
back to a default) and appear at most once. Defaults mirror the
measurement protocol: 10 invocations, measured tail 5, CV threshold
0.05 over a window of 5, heap grid 16 MB x 1.10, alpha 0.05.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from pathlib import Path

from . import pinctl
from .bench import RunPlan
from .errors import ConfigError
from .pinctl import RoleRule, ThreadRole
from .topology import (
    CoreTopology,
    build_affinity_plan,
    detect_topology,
    i9_12900k,
    load_topology_file,
    parse_config_name,
)


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str = "bench"
    placement: str = "4P"
    target: tuple[str, ...] = ()
    heap_mb: float = 128.0
    invocations: int = 10
    iterations: int = 10
    measured_tail: int = 5
    cv_window: int = 5
    cv_threshold: float = 0.05
    seed: int = 1
    flush: str = "buffer"
    timeout_s: float = 600.0
    poll_period_ms: float = 10.0
    gc_log_path: str | None = None
    pin_backend: str = "os"
    rapl_backend: str = "none"
    rapl_fixture: str | None = None
    domains: tuple[str, ...] = ("pkg", "pp0")
    topology_source: str = "detect"
    topology_path: str | None = None
    sysfs_root: str = "/sys"
    alpha: float = 0.05
    out_dir: str = "results"
    mutator_pcores: int = 4
    comparisons: tuple[str, ...] = ()
    heap_base_mb: float = 16.0
    heap_growth: float = 1.10
    heap_required_clean: int = 5
    heap_cap_mb: float = 65536.0
    rules: tuple[RoleRule, ...] = field(default=pinctl.DEFAULT_RULES)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha={self.alpha} outside (0, 1)")
        parse_config_name(self.placement, self.mutator_pcores)
        for comp in self.comparisons:
            parts = comp.split("/")
            if len(parts) != 2:
                raise ConfigError(f"comparison {comp!r} must be <config>/<config>")
            for part in parts:
                parse_config_name(part, self.mutator_pcores)
        if self.topology_source not in ("detect", "fixture", "builtin"):
            raise ConfigError(
                f"topology.source must be detect, fixture or builtin, "
                f"got {self.topology_source!r}"
            )
        if self.topology_source == "fixture" and not self.topology_path:
            raise ConfigError("topology.source = fixture requires topology.path")

    def topology(self) -> CoreTopology:
        if self.topology_source == "builtin":
            return i9_12900k()
        if self.topology_source == "fixture":
            return load_topology_file(self.topology_path)
        return detect_topology(self.sysfs_root)

    def run_plan(self, placement: str | None = None) -> RunPlan:
        return RunPlan(
            benchmark=self.benchmark,
            config_name=placement or self.placement,
            target=self.target,
            heap_mb=self.heap_mb,
            invocations=self.invocations,
            iterations=self.iterations,
            measured_tail=self.measured_tail,
            cv_window=self.cv_window,
            cv_threshold=self.cv_threshold,
            seed=self.seed,
            flush=self.flush,
            pin_backend=self.pin_backend,
            rapl_backend=self.rapl_backend,
            rapl_fixture=self.rapl_fixture,
            domains=self.domains,
            poll_period_ms=self.poll_period_ms,
            timeout_s=self.timeout_s,
            gc_log_path=self.gc_log_path,
            mutator_pcore_count=self.mutator_pcores,
        )

    def check_realizable(self, topo: CoreTopology) -> None:
        names = {self.placement}
        for comp in self.comparisons:
            names.update(comp.split("/"))
        for name in sorted(names):
            build_affinity_plan(parse_config_name(name, self.mutator_pcores), topo)


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {no}: expected key = value, got {line!r}")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {no}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _bool(s: str) -> bool:
    if s in ("true", "false"):
        return s == "true"
    raise ConfigError(f"expected true or false, got {s!r}")


def _words(s: str) -> tuple[str, ...]:
    return tuple(w.strip() for w in s.split(",") if w.strip())


def _argv(s: str) -> tuple[str, ...]:
    return tuple(shlex.split(s))


def _optional_str(s: str) -> str | None:
    return s or None


# Config key -> (ExperimentConfig field, coercer). rule.* keys are handled
# separately because their index is part of the key.
_KEYS = {
    "benchmark": ("benchmark", str),
    "placement": ("placement", str),
    "target": ("target", _argv),
    "heap_mb": ("heap_mb", float),
    "run.invocations": ("invocations", int),
    "run.iterations": ("iterations", int),
    "run.measured_tail": ("measured_tail", int),
    "run.cv_window": ("cv_window", int),
    "run.cv_threshold": ("cv_threshold", float),
    "run.seed": ("seed", int),
    "run.flush": ("flush", str),
    "run.timeout_s": ("timeout_s", float),
    "run.poll_period_ms": ("poll_period_ms", float),
    "run.gc_log": ("gc_log_path", _optional_str),
    "pin.backend": ("pin_backend", str),
    "rapl.backend": ("rapl_backend", str),
    "rapl.fixture": ("rapl_fixture", _optional_str),
    "rapl.domains": ("domains", _words),
    "topology.source": ("topology_source", str),
    "topology.path": ("topology_path", _optional_str),
    "topology.sysfs": ("sysfs_root", str),
    "alpha": ("alpha", float),
    "out_dir": ("out_dir", str),
    "mutator_pcores": ("mutator_pcores", int),
    "comparisons": ("comparisons", _words),
    "heapsize.base_mb": ("heap_base_mb", float),
    "heapsize.growth": ("heap_growth", float),
    "heapsize.required_clean": ("heap_required_clean", int),
    "heapsize.cap_mb": ("heap_cap_mb", float),
}

_ROLE_BY_NAME = {role.value: role for role in ThreadRole}


def _parse_rules(rule_kv: dict[str, str]) -> tuple[RoleRule, ...]:
    groups: dict[int, dict[str, str]] = {}
    for key, value in rule_kv.items():
        parts = key.split(".")
        if len(parts) != 3 or not parts[1].isdigit() or parts[2] not in (
            "pattern",
            "role",
            "priority",
        ):
            raise ConfigError(f"unknown config key {key!r}")
        groups.setdefault(int(parts[1]), {})[parts[2]] = value
    rules = []
    for index in sorted(groups):
        g = groups[index]
        missing = {"pattern", "role", "priority"} - set(g)
        if missing:
            raise ConfigError(
                f"rule.{index} is missing {', '.join(sorted(missing))}"
            )
        role = _ROLE_BY_NAME.get(g["role"])
        if role is None:
            raise ConfigError(
                f"rule.{index}.role must be one of "
                f"{', '.join(sorted(_ROLE_BY_NAME))}, got {g['role']!r}"
            )
        try:
            priority = int(g["priority"])
        except ValueError:
            raise ConfigError(f"rule.{index}.priority must be an integer") from None
        rules.append(RoleRule(g["pattern"], role, priority))
    return tuple(rules)


def config_from_mapping(kv: dict[str, str]) -> ExperimentConfig:
    values: dict[str, object] = {}
    rule_kv: dict[str, str] = {}
    for key, raw in kv.items():
        if key.startswith("rule."):
            rule_kv[key] = raw
            continue
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        name, coerce = _KEYS[key]
        try:
            values[name] = coerce(raw)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    if rule_kv:
        values["rules"] = _parse_rules(rule_kv)
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_mapping(parse_kv_text(text))


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of load for provenance: emits every non-rule key."""
    default = ExperimentConfig()
    lines = []
    for key, (name, _) in _KEYS.items():
        value = getattr(cfg, name)
        if value is None:
            continue
        if isinstance(value, tuple):
            if name == "target":
                rendered = " ".join(shlex.quote(p) for p in value)
            else:
                rendered = ",".join(value)
            if not rendered:
                continue
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    if cfg.rules != default.rules:
        for i, rule in enumerate(cfg.rules):
            lines.append(f"rule.{i}.pattern = {rule.pattern}")
            lines.append(f"rule.{i}.role = {rule.role.value}")
            lines.append(f"rule.{i}.priority = {rule.priority}")
    return "\n".join(lines) + "\n"


__all__ = [
    "ExperimentConfig",
    "parse_kv_text",
    "config_from_mapping",
    "load_config",
    "dump_config",
]
