"""Exception hierarchy shared across the package.

Each error class carries the process exit code the CLI maps it to.
"""


class AmpgcError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(AmpgcError):
    """Invalid user input: config files, names, malformed arguments."""

    exit_code = 2


class TopologyError(ConfigError):
    """Topology cannot be detected, parsed, or does not fit a request."""


class PermissionDenied(AmpgcError):
    """The OS refused a privileged operation (affinity, RAPL access)."""

    exit_code = 3


class TargetError(AmpgcError):
    """The measured target failed: bad exit status, broken output contract."""

    exit_code = 4


class LogParseError(TargetError):
    """A GC log line with a known tag could not be parsed."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class HeapSearchError(AmpgcError):
    """No stall-free heap size exists within the search cap."""

    exit_code = 5
