"""Exception hierarchy shared across the package.

Argument problems derive from ValueError and state problems from RuntimeError
so plain ``except ValueError`` call sites keep working.
"""
from __future__ import annotations


class SplatEditError(Exception):
    """Base class for every error this package raises on purpose."""


class InvalidArgumentError(SplatEditError, ValueError):
    """An input value violates a documented precondition."""


class InvalidStateError(SplatEditError, RuntimeError):
    """The operation is valid in general but not for the current state."""


class BehindCameraError(InvalidArgumentError):
    """Point projection was asked for a point at non-positive camera depth."""


class RenderError(SplatEditError, RuntimeError):
    """Rasterization failed; carries the index of the offending Gaussian."""

    def __init__(self, message: str, gaussian_index: int | None = None):
        super().__init__(message)
        self.gaussian_index = gaussian_index


class BackendError(SplatEditError, RuntimeError):
    """A prior backend call failed; carries the capability and backend name."""

    def __init__(self, message: str, capability: str = "", backend: str = ""):
        super().__init__(message)
        self.capability = capability
        self.backend = backend


class SceneFileError(SplatEditError):
    """Base class for scene file load failures."""


class SceneFileFormatError(SceneFileError):
    """The file does not start with the scene file magic."""


class SceneFileVersionError(SceneFileError):
    """The file major version is not one this build can read."""


class SceneFileChecksumError(SceneFileError):
    """The trailing CRC32 does not match, or the file is truncated."""
