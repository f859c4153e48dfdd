"""
Exception hierarchy shared by the services. Every error raised on purpose
derives from `PointProcessError`, so the command-line boundary can map it to
an exit code; `ConfigError` is the one treated as a usage error.
"""

from typing import Optional


class PointProcessError(Exception):
    """Base class for all toolkit errors"""


class SequenceValidationError(PointProcessError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"{message} at line {line}" if line is not None else message)


class SequenceParseError(PointProcessError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"{message} at line {line}" if line is not None else message)


class ContractError(PointProcessError):
    """A caller broke an operation's precondition"""


class NonFiniteError(PointProcessError):
    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        super().__init__(message)


class ConstructionError(PointProcessError):
    """A computation graph could not be assembled"""


class SimulationError(PointProcessError):
    pass


class StabilityError(SimulationError):
    pass


class ConvergenceError(PointProcessError):
    pass


class TrainingError(PointProcessError):
    pass


class CheckpointError(PointProcessError):
    pass


class ConfigError(PointProcessError):
    pass
