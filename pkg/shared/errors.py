"""Error types shared by every package.

Contract violations derive from `ValueError` so callers that already catch
`ValueError` keep working; `IRRError` lets the CLI map any of them to a
user-facing exit code.
"""

from __future__ import annotations
from typing import List, Optional


class IRRError(Exception):
    """Base class for all errors raised by this project."""


class LinkRangeError(IRRError, ValueError):
    """Linear predictor of a log link falls outside the float exponent range."""


class DomainError(IRRError, ValueError):
    """A standard deviation or variance is not strictly positive."""


class SchemaError(IRRError, ValueError):
    """Input file or schema does not have the expected columns/labels."""


class RatingsValidationError(IRRError, ValueError):
    def __init__(self, message: str, ratees: Optional[List[str]] = None):
        super().__init__(message)
        self.ratees = list(ratees or [])


class RatingsParseError(IRRError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SamplerInitError(IRRError, ValueError):
    """Posterior density is not finite at the chain's starting point."""


class DiagnosticError(IRRError, ValueError):
    """Too few draws to compute split-chain diagnostics."""


class DegenerateProposalError(IRRError, ArithmeticError):
    """Bridge sampling produced non-finite values."""


class BridgeConvergenceError(IRRError, ArithmeticError):
    def __init__(self, message: str, last_log_marglik: float, iterations: int):
        super().__init__(message)
        self.last_log_marglik = last_log_marglik
        self.iterations = iterations


class DegenerateEvidenceError(IRRError, ValueError):
    """Every model in a set has zero marginal likelihood."""


class PartitionError(IRRError, ValueError):
    """An inclusion target splits the model set into an empty side."""


class PlanError(IRRError, ValueError):
    """Simulation plan or run configuration is not usable."""


class PriorError(IRRError, ValueError):
    """Prior preset is neither a known name nor a positive number."""


__all__ = [
    "IRRError",
    "LinkRangeError",
    "DomainError",
    "SchemaError",
    "RatingsValidationError",
    "RatingsParseError",
    "SamplerInitError",
    "DiagnosticError",
    "DegenerateProposalError",
    "BridgeConvergenceError",
    "DegenerateEvidenceError",
    "PartitionError",
    "PlanError",
    "PriorError",
]
