"""Energy experiments for garbage-collector thread placement on
asymmetric multicore CPUs: topology modeling, thread pinning, RAPL
energy metering, a benchmark protocol, a statistics pipeline, and a
deterministic collector simulation to test it all against.
"""

from .errors import (
    AmpgcError,
    ConfigError,
    HeapSearchError,
    LogParseError,
    PermissionDenied,
    TargetError,
    TopologyError,
)
from .topology import (
    AffinityPlan,
    Core,
    CoreTopology,
    CoreType,
    HardwareConfig,
    build_affinity_plan,
    detect_topology,
    hwt_count,
    hwt_ratio,
    i9_12900k,
    load_topology_file,
    parse_config_name,
)

__version__ = "0.1.0"

__all__ = [
    "AmpgcError",
    "ConfigError",
    "HeapSearchError",
    "LogParseError",
    "PermissionDenied",
    "TargetError",
    "TopologyError",
    "AffinityPlan",
    "Core",
    "CoreTopology",
    "CoreType",
    "HardwareConfig",
    "build_affinity_plan",
    "detect_topology",
    "hwt_count",
    "hwt_ratio",
    "i9_12900k",
    "load_topology_file",
    "parse_config_name",
    "__version__",
]
