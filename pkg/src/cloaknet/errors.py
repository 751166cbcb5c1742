"""Exception hierarchy shared by every layer of the toolchain."""

from __future__ import annotations


class CloakError(Exception):
    """Base class for all errors raised by cloaknet."""


class ShapeError(CloakError, ValueError):
    """A tensor dimension does not match what an operator expects."""

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


class InvalidParams(CloakError, ValueError):
    pass


class UnknownLayer(CloakError, ValueError):
    pass


class GraphError(CloakError, ValueError):
    """Ill-formed model graph (cycle, dangling edge, multiple outputs...)."""


class FormatError(CloakError, ValueError):
    """Malformed .snm container or tensor blob."""


class BudgetExceeded(CloakError, MemoryError):
    def __init__(self, needed: int, budget: int, what: str = "secure memory"):
        super().__init__(f"{what}: need {needed} bytes, budget is {budget} bytes")
        self.needed = needed
        self.budget = budget


class ProtocolError(CloakError, RuntimeError):
    """Command sent to the secure executor out of order or with bad payload."""
