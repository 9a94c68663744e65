"""splatedit: lift one RGB image into an editable 3D Gaussian scene.

Public surface re-exported here; submodules stay importable directly.
"""
from .scene import Camera, Gaussian, GaussianScene, SceneObject
from .geometry import (
    covariance_3d,
    interpolate_camera,
    lift_pixel,
    orbit_camera,
    project_point,
)
from .sceneio import load, read_png, save, write_png

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Gaussian",
    "GaussianScene",
    "SceneObject",
    "covariance_3d",
    "interpolate_camera",
    "lift_pixel",
    "load",
    "orbit_camera",
    "project_point",
    "read_png",
    "save",
    "write_png",
    "__version__",
]
