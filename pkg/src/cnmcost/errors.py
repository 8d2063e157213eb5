"""Exception hierarchy shared by every cnmcost module."""

from __future__ import annotations


class CnmError(Exception):
    """Base class for all model errors (validation, parsing, simulation)."""


class IsaError(CnmError, ValueError):
    pass


class ParseError(IsaError):
    """Syntax error in a text format, with 1-based line/column."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.line = line
        self.col = col
        where = f"{line}:{col}: " if line else ""
        super().__init__(f"{where}{message}")


class TargetError(CnmError, ValueError):
    pass


class KernelError(CnmError, ValueError):
    pass


class LoweringError(CnmError, ValueError):
    pass


class IngestError(CnmError, ValueError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class MappingError(CnmError, ValueError):
    pass


class SimulationError(CnmError, RuntimeError):
    pass


class DeadlockError(SimulationError):
    """No process can ever issue its next instruction."""

    def __init__(self, message: str, state: dict):
        self.state = state
        super().__init__(f"{message}; state={state}")
