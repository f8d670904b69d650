"""Exception types raised across the package."""


class PointNavError(Exception):
    """Base class for all package errors."""


class ConstructionError(PointNavError, ValueError):
    """Invalid robot shape (non-convex, degenerate or clockwise polygon)."""


class DimensionError(PointNavError, ValueError):
    """Array inputs with inconsistent lengths."""


class LinearizationError(PointNavError, ValueError):
    """Linearization point outside the model's valid region."""


class TrainingDiverged(PointNavError, RuntimeError):
    """Encoder training produced a non-finite loss."""


class WeightsFormatError(PointNavError, ValueError):
    """Encoder weights file is malformed or does not match the robot shape."""


class BuildError(PointNavError, ValueError):
    """Planner problem data have inconsistent dimensions."""


class SolveError(PointNavError, RuntimeError):
    """The QP solver failed to reach the requested tolerance."""

    def __init__(self, message, residuals=None, iteration=None):
        super().__init__(message)
        self.residuals = residuals or {}
        self.iteration = iteration


class GenerationError(PointNavError, RuntimeError):
    """Random scenario generation could not place all obstacles."""


class ConfigError(PointNavError, ValueError):
    """Run configuration failed validation."""
