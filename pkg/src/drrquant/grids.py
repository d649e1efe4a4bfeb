"""Grid containers shared by every stage of the pipeline.

Axis convention (fixed): x = left-right, y = anterior-posterior (the
projection axis), z = superior-inferior. Arrays are stored C-ordered with x
fastest, so a 3D array has numpy shape ``(nz, ny, nx)`` and a projection image
has shape ``(nz, nx)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, InvariantError

KINDS = ("drr", "thickness-mm", "intensity-integral", "probability")


def _check_spacing(spacing, n):
    if len(spacing) != n:
        raise InvariantError(f"expected {n} spacing values, got {len(spacing)}")
    if not all(float(s) > 0 for s in spacing):
        raise InvariantError(f"spacing must be positive, got {tuple(spacing)}")


@dataclass(frozen=True, eq=False)
class Volume:
    """CT volume in Hounsfield units."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvariantError(f"volume data must be 3D and non-empty, got shape {self.data.shape}")
        _check_spacing(self.spacing, 3)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def geometry(self):
        return (self.dims, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class BinaryMask3D:
    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvariantError(f"mask data must be 3D and non-empty, got shape {self.data.shape}")
        if self.data.dtype != np.bool_:
            raise InvariantError(f"mask data must be boolean, got {self.data.dtype}")
        _check_spacing(self.spacing, 3)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    dims = Volume.dims
    geometry = Volume.geometry


@dataclass(frozen=True, eq=False)
class ProjectionImage:
    """2D scalar map on the coronal (x, z) plane."""

    data: np.ndarray
    spacing: tuple[float, float]
    kind: str = "drr"

    def __post_init__(self):
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise InvariantError(f"image data must be 2D and non-empty, got shape {self.data.shape}")
        _check_spacing(self.spacing, 2)
        if self.kind not in KINDS:
            raise InvariantError(f"unknown image kind {self.kind!r}")
        if not np.all(np.isfinite(self.data)):
            raise InvariantError("image contains non-finite values")
        if self.data.size and self.data.min() < 0:
            raise InvariantError(f"{self.kind} image has negative values (min {self.data.min()})")
        if self.kind == "probability" and self.data.max() > 1:
            raise InvariantError(f"probability image has values above 1 (max {self.data.max()})")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        nz, nx = self.data.shape
        return (nx, nz)

    @property
    def geometry(self):
        return (self.dims, self.spacing)


@dataclass(frozen=True, eq=False)
class BinaryMask2D:
    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise InvariantError(f"mask data must be 2D and non-empty, got shape {self.data.shape}")
        if self.data.dtype != np.bool_:
            raise InvariantError(f"mask data must be boolean, got {self.data.dtype}")
        _check_spacing(self.spacing, 2)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    dims = ProjectionImage.dims
    geometry = ProjectionImage.geometry


def require_same_geometry(a, b, what="grids"):
    if a.geometry != b.geometry:
        raise GeometryError(f"{what} do not share geometry: {a.geometry} vs {b.geometry}")
