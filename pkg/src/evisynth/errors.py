"""Exception types shared across the package."""


class EvisynthError(Exception):
    """Base class for all package errors."""


class ConfigError(EvisynthError):
    """Invalid or missing configuration."""


class DataError(EvisynthError):
    """Observation data violates its schema or an invariant."""


class DomainError(EvisynthError, ValueError):
    """Argument outside a function's mathematical domain."""


class ShapeError(EvisynthError, ValueError):
    """Array dimensions inconsistent with the stratification frame."""


class InitializationError(EvisynthError):
    """Sampler could not find a finite starting point."""

    def __init__(self, message, term_values=None):
        super().__init__(message)
        self.term_values = term_values or {}


class TermNanError(EvisynthError):
    """A likelihood term evaluated to NaN (hard failure, names the term)."""

    def __init__(self, term):
        super().__init__(f"log-likelihood term {term!r} evaluated to NaN")
        self.term = term
