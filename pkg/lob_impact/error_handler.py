#!/usr/bin/env python3
"""
Error Handling and Fallback Recording for lob-impact

Provides the exception hierarchy shared by all modules, machine-readable error
contexts for the CLI, and a recorder for flagged (non-fatal) fallbacks.
"""

import logging
from typing import Dict, List, Any, Optional
from dataclasses import dataclass, asdict, field
from datetime import datetime

logger = logging.getLogger(__name__)

ERROR_SCHEMA_VERSION = 1

EXIT_SUCCESS = 0
EXIT_NUMERICAL_FAILURE = 1
EXIT_INPUT_ERROR = 2


class LobImpactError(Exception):
    """Base class for all lob-impact errors."""
    exit_code: int = EXIT_NUMERICAL_FAILURE

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details


class InputError(LobImpactError, ValueError):
    """Invalid arguments, configs or input files."""
    exit_code = EXIT_INPUT_ERROR


class DomainError(LobImpactError, ValueError):
    """Value outside the domain of a book-mechanics operation."""
    exit_code = EXIT_INPUT_ERROR


class ModelError(LobImpactError):
    """Invalid model parameters or a numerical failure while using them."""
    exit_code = EXIT_NUMERICAL_FAILURE


class SamplingBudgetExceeded(ModelError):
    """Rejection sampler ran out of attempts."""

    def __init__(self, message: str, attempts: int, acceptance_rate: float,
                 acceptance_upper_bound: Optional[float] = None):
        details = {'attempts': attempts, 'acceptance_rate': acceptance_rate}
        if acceptance_upper_bound is not None:
            details['acceptance_upper_bound'] = acceptance_upper_bound
        super().__init__(message, **details)
        self.attempts = attempts
        self.acceptance_rate = acceptance_rate
        self.acceptance_upper_bound = acceptance_upper_bound


class NoLiquidatorActivity(ModelError):
    """A liquidator-dependent estimate was requested for a path without fills."""

    def __init__(self, message: str = "no liquidator activity"):
        super().__init__(message)


@dataclass
class ErrorContext:
    """Context information for a failed operation."""
    operation: str
    component: str
    timestamp: str
    error_type: str
    error_message: str
    exit_code: int = EXIT_NUMERICAL_FAILURE
    details: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.timestamp:
            self.timestamp = datetime.now().isoformat()

    @classmethod
    def from_exception(cls, error: Exception, operation: str, component: str) -> 'ErrorContext':
        """Build a context from any exception, mapping unknown errors to exit code 1."""
        if isinstance(error, LobImpactError):
            exit_code = error.exit_code
            details = dict(error.details)
        elif isinstance(error, (FileNotFoundError, PermissionError, IsADirectoryError)):
            exit_code = EXIT_INPUT_ERROR
            details = {'path': getattr(error, 'filename', None)}
        else:
            exit_code = EXIT_NUMERICAL_FAILURE
            details = {}

        return cls(
            operation=operation,
            component=component,
            timestamp="",
            error_type=type(error).__name__,
            error_message=str(error),
            exit_code=exit_code,
            details=details
        )

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable error document."""
        data = asdict(self)
        data['details'] = {k: _plain(v) for k, v in self.details.items()}
        return {'schema_version': ERROR_SCHEMA_VERSION, 'error': data}


def _plain(value: Any) -> Any:
    """Coerce numpy scalars and paths into JSON-friendly values."""
    if hasattr(value, 'item'):
        return value.item()
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return str(value)


@dataclass
class Flag:
    """A non-fatal fallback taken by some operation."""
    component: str
    code: str
    message: str
    details: Dict[str, Any] = field(default_factory=dict)
    timestamp: str = ""

    def __post_init__(self):
        if not self.timestamp:
            self.timestamp = datetime.now().isoformat()

    def to_dict(self) -> Dict[str, Any]:
        """Serialisable view without the wall-clock timestamp."""
        return {
            'component': self.component,
            'code': self.code,
            'message': self.message,
            'details': {k: _plain(v) for k, v in self.details.items()},
        }


class FlagRecorder:
    """Collects flagged fallbacks and reports statistics on them."""

    def __init__(self):
        self.flag_history: List[Flag] = []

    def flag(self, component: str, code: str, message: str, **details: Any) -> Flag:
        """Record a fallback and log it."""
        entry = Flag(component=component, code=code, message=message, details=details)
        self.flag_history.append(entry)
        logger.warning(f"⚠️ [{component}] {code}: {message}")
        return entry

    def extend(self, flags: List[Flag]) -> None:
        """Absorb flags produced elsewhere without logging them twice."""
        self.flag_history.extend(flags)

    def codes(self) -> List[str]:
        return [f.code for f in self.flag_history]

    def get_flag_statistics(self) -> Dict[str, Any]:
        """Counts of flags by code and by component."""
        if not self.flag_history:
            return {}

        by_code: Dict[str, int] = {}
        by_component: Dict[str, int] = {}
        for entry in self.flag_history:
            by_code[entry.code] = by_code.get(entry.code, 0) + 1
            by_component[entry.component] = by_component.get(entry.component, 0) + 1

        return {
            'total_flags': len(self.flag_history),
            'flag_codes': by_code,
            'affected_components': by_component,
        }

    def to_list(self) -> List[Dict[str, Any]]:
        return [f.to_dict() for f in self.flag_history]

    def clear(self) -> None:
        self.flag_history = []


def describe_error(error: Exception, operation: str, component: str = "cli") -> ErrorContext:
    """Log an error and return its machine-readable context."""
    context = ErrorContext.from_exception(error, operation, component)
    logger.error(f"❌ {operation} failed ({context.error_type}): {context.error_message}")
    return context
