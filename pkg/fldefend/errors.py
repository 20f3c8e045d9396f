"""
Exception hierarchy for the simulator.

Signals that are part of normal operation (skip a client, skip a round,
clustering said nothing) are exceptions too; callers catch them and log.
"""

from typing import Optional


class FlDefendError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FlDefendError, ValueError):
    """Invalid configuration, task or attack settings, or mismatched dimensions."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyShardError(FlDefendError):
    """The client has no samples; it contributes nothing this round."""


class RoundSkipped(FlDefendError):
    """Nothing to aggregate; the previous global model is retained."""


class UninformativeClusteringError(FlDefendError):
    """GMM clustering cannot separate the points (degenerate fit or empty cluster)."""


class SimulationHalted(FlDefendError):
    """Every client is blacklisted, no cohort can be drawn."""

    def __init__(self, message: str, logs=None):
        self.logs = list(logs or [])
        super().__init__(message)
