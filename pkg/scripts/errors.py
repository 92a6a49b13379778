#!/usr/bin/env python3
"""
Exception hierarchy and stage wrappers for the evidence-transfer pipeline.

Every error carries the process exit code the CLI should return, so a failure
deep inside a training loop surfaces with the right code without the caller
having to classify it again.
"""

import logging
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional

logger = logging.getLogger(__name__)

# ============================================================================
# Exit codes
# ============================================================================

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ============================================================================
# Exceptions
# ============================================================================

class EviTransferError(Exception):
    """Base class for all pipeline errors."""
    exit_code = EXIT_DATA


class ConfigurationError(EviTransferError):
    """Raised when a configuration value is missing, invalid or inconsistent."""
    exit_code = EXIT_CONFIG


class DataError(EviTransferError):
    """Raised when input data violates a contract."""
    exit_code = EXIT_DATA


class ShapeError(DataError):
    """Raised on dimension mismatches between matrices, layers or labels."""


class AlignmentError(DataError):
    """Raised when evidence rows do not line up with the feature rows."""


class CountError(DataError):
    """Raised when there are too few rows, neighbors or samples for an operation."""


class DataLoadError(DataError):
    """Raised when a feature file is malformed. Messages carry the row index."""


class CatalogParseError(DataError):
    """Raised when an event catalog row is malformed. Messages carry the line number."""


class DegenerateEvidenceError(DataError):
    """Raised when an evidence source has a single class."""


class MappingError(DataError):
    """Raised when clusters cannot be put in bijection with labels."""


class ScreeningInconclusiveError(DataError):
    """Raised when evidence screening cannot produce a verdict."""


class EvidenceRejectedError(DataError):
    """Raised when screening rejects every evidence source of a run."""


class NumericError(EviTransferError):
    """Raised on NaN/Inf values in parameters, gradients or losses."""
    exit_code = EXIT_NUMERIC


class DivergenceError(NumericError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class GradCheckError(NumericError):
    """Raised when a gradient check cannot be performed reliably."""


class StageError(EviTransferError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", EXIT_DATA)


# ============================================================================
# Result Types
# ============================================================================

@dataclass
class CellResult:
    """Result of one suite cell (rotation pair or sampling strategy)."""
    name: str
    success: bool
    value: Any = None
    error: Optional[str] = None
    duration: float = 0.0
    exit_code: int = EXIT_OK


# ============================================================================
# Safe Wrappers
# ============================================================================

def run_stage(stage: str, func: Callable, *args, **kwargs) -> Any:
    """
    Run one pipeline stage, re-raising any failure as a StageError.

    Returns:
        Whatever ``func`` returns
    """
    logger.debug("stage %s: start", stage)
    try:
        return func(*args, **kwargs)
    except StageError:
        raise
    except (EviTransferError, ValueError, ArithmeticError) as e:
        raise StageError(stage, e) from e


def safe_cell(name: str, func: Callable, *args, **kwargs) -> CellResult:
    """
    Run a suite cell and capture failures instead of propagating them.

    Returns:
        CellResult with success, value, error, and duration
    """
    start = time.time()
    try:
        value = func(*args, **kwargs)
    except EviTransferError as e:
        duration = time.time() - start
        logger.warning("cell %s failed: %s", name, e)
        return CellResult(name=name, success=False, error=str(e), duration=duration,
                          exit_code=exit_code_for(e))
    return CellResult(name=name, success=True, value=value, duration=time.time() - start)


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    return getattr(error, "exit_code", EXIT_DATA)
