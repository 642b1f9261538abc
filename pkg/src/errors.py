"""
Exception hierarchy shared by the library and the command-line surface
"""

from typing import List, Optional, Sequence


class SentinelError(Exception):
    """Base class for every error raised on purpose by this package"""


class ShapeError(SentinelError, ValueError):
    """Operand shapes do not agree for an op or a model component"""

    def __init__(self, op: str, dims: Sequence, message: Optional[str] = None):
        self.op = op
        self.dims = tuple(dims)
        super().__init__(message or f"{op}: incompatible shapes {self.dims}")


class GraphError(SentinelError, RuntimeError):
    """Misuse of the differentiation graph (order of calls, non-scalar loss, NaN)"""


class FeatureFileError(SentinelError, ValueError):
    """A feature file could not be decoded"""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class ManifestError(SentinelError, ValueError):
    """A manifest references missing files or inconsistent dimensions"""

    def __init__(self, message: str, offenders: Optional[List[str]] = None):
        self.offenders = list(offenders or [])
        detail = f" ({', '.join(self.offenders)})" if self.offenders else ""
        super().__init__(f"{message}{detail}")


class ConfigError(SentinelError, ValueError):
    """Invalid or unknown configuration key"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class NonFiniteLossError(SentinelError, FloatingPointError):
    """Training produced NaN/Inf; `component` names the first offending loss term"""

    def __init__(self, component: str, iteration: int):
        self.component = component
        self.iteration = iteration
        super().__init__(f"non-finite value in {component} at iteration {iteration}")


class RunLockedError(SentinelError, RuntimeError):
    """Another command already owns the run directory"""
