"""Exception hierarchy shared across the package.

ValidationError maps to CLI exit code 1; the solver/resource family maps
to exit code 2.
"""


class NaethError(Exception):
    """Base class for all package errors."""


class ValidationError(NaethError):
    """Malformed input: bad quantum numbers, config fields, file formats."""


class SolverError(NaethError):
    """An iterative solver failed to converge or an eigensolve failed."""


class ResourceError(NaethError):
    """A requested computation exceeds the configured resource budget."""


class InfeasibleTargetError(SolverError):
    """Requested (E, M) target lies outside the attainable region."""

    def __init__(self, message, *, e_bounds=None, m_bound=None):
        super().__init__(message)
        self.e_bounds = e_bounds
        self.m_bound = m_bound


class ConsistencyError(NaethError):
    """An internal cross-check between two independent routes failed."""
