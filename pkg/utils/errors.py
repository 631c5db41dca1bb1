"""
errors.py
---------

Exception hierarchy shared by all rbpet modules.  Public entry points
validate their inputs and raise the most specific class; the command
line front end maps :class:`ConfigError` to exit code 2 and every other
:class:`RbPetError` to exit code 3.
"""

from __future__ import annotations


class RbPetError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(RbPetError, ValueError):
    """Shapes, voxel sizes or frame schedules do not agree."""


class VolumeFormatError(RbPetError, ValueError):
    """A volume, TAC or checkpoint file is malformed."""


class ConfigError(RbPetError):
    """Configuration is missing, invalid or references absent paths."""


class ConvergenceError(RbPetError):
    """An iterative solver stopped with its residual above threshold."""

    def __init__(self, message: str, residual: float | None = None) -> None:
        super().__init__(message)
        self.residual = residual


class NumericalError(RbPetError):
    """A non-finite value appeared in an intermediate result."""

    def __init__(self, message: str, where: str | None = None) -> None:
        super().__init__(message if where is None else f'{message} (at {where})')
        self.where = where


class DegenerateInputError(RbPetError, ValueError):
    """Input data cannot support the requested computation."""


class StageError(RbPetError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f'stage {stage!r} failed: {message}')
        self.stage = stage


__all__ = [
    'RbPetError',
    'GeometryError',
    'VolumeFormatError',
    'ConfigError',
    'ConvergenceError',
    'NumericalError',
    'DegenerateInputError',
    'StageError',
]
