"""Exception hierarchy shared across the package.

The CLI maps :class:`ConfigError` to exit code 2 and every other
:class:`CtxsegError` (or unexpected exception) to exit code 3.
"""

from __future__ import annotations


class CtxsegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CtxsegError, ValueError):
    """Invalid configuration value, schema violation, or malformed input file."""


class ValidationError(CtxsegError, ValueError):
    """A model or table violates its structural invariants (e.g. a
    conditional-probability row that does not sum to 1)."""


class NullEventError(CtxsegError, ValueError):
    """Conditioning on an event of probability zero."""


class UnsupportedModelError(CtxsegError, ValueError):
    """The requested operation needs structure the model does not have
    (e.g. a deterministic context mechanism)."""


class PositivityError(CtxsegError, ValueError):
    """A stratum required by an adjustment formula has probability zero,
    so the formula is undefined there."""


class PlacementError(CtxsegError, RuntimeError):
    """Scene generation could not place the requested shapes on the canvas."""


class TrainingError(CtxsegError, RuntimeError):
    """Model training cannot proceed (e.g. no usable training records)."""


class PipelineError(CtxsegError, RuntimeError):
    """A pipeline stage failed or was invoked on an inconsistent state."""
