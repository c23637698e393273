"""Sparse LiDAR + image to dense point-cloud reconstruction."""

from .kernels import BACKEND
from .geometry import CameraCalibration, GeometryError, OrientedBox3D, PointCloud

__all__ = ["BACKEND", "CameraCalibration", "GeometryError", "OrientedBox3D", "PointCloud"]
__version__ = "0.1.0"
