"""Exception types shared across the package.

All inherit from ValueError so callers that do not care about the
category can still catch a single base class.
"""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent hyperparameters."""


class StepError(ValueError):
    """Diffusion timestep outside the schedule's valid range."""


class ShapeError(ValueError):
    """Array shapes inconsistent with the operation's contract."""


class InputError(ValueError):
    """Invalid input value (bad label, zero vector, duplicate id, ...)."""


class StateError(RuntimeError):
    """Operation called against stale or mismatched internal state."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""
