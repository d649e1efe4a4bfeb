"""Projection of 3D masks to coronal maps, binarization, and cutoff calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .drr import DEFAULT_ATTENUATION, AttenuationMap, column_integral
from .errors import InvariantError, UsageError
from .grids import BinaryMask2D, BinaryMask3D, ProjectionImage, Volume
from .quant import poa, pov

LUNG_CUTOFF_MM = 38.0
# Intensity cutoff as published; its units cannot be mapped onto the
# attenuation convention used here, so it is only used with published_units=True.
PUBLISHED_INTENSITY_CUTOFF = 25000.0

_MODE_KIND = {"thickness": "thickness-mm", "intensity": "intensity-integral"}


@dataclass(frozen=True)
class CutoffConfig:
    mode: str = "thickness"
    cutoff: float = LUNG_CUTOFF_MM
    inclusive: bool = True
    published_units: bool = False

    def __post_init__(self):
        if self.mode not in _MODE_KIND:
            raise InvariantError(f"unknown projection mode {self.mode!r}")
        if not self.cutoff >= 0:
            raise InvariantError(f"cutoff must be >= 0, got {self.cutoff}")

    @classmethod
    def published_intensity(cls):
        return cls("intensity", PUBLISHED_INTENSITY_CUTOFF, True, published_units=True)

    @classmethod
    def from_dict(cls, d):
        return cls(
            d.get("mode", "thickness"),
            float(d.get("cutoff", LUNG_CUTOFF_MM)),
            bool(d.get("inclusive", True)),
            bool(d.get("published_units", False)),
        )

    def to_dict(self):
        return {"mode": self.mode, "cutoff": self.cutoff, "inclusive": self.inclusive, "published_units": self.published_units}


LUNG_CUTOFF = CutoffConfig("thickness", LUNG_CUTOFF_MM)


@dataclass
class CalibrationResult:
    best_cutoff: float
    best_mae: float
    curve: list[tuple[float, float]] = field(default_factory=list)
    mode: str = "thickness"

    def to_dict(self):
        return {
            "mode": self.mode,
            "best_cutoff": self.best_cutoff,
            "best_mae": self.best_mae,
            "curve": [[c, m] for c, m in self.curve],
        }


def thickness_projection(m: BinaryMask3D) -> ProjectionImage:
    """AP depth of the mask per (x, z) column, in mm."""
    counts = np.count_nonzero(m.data, axis=1)
    return ProjectionImage(counts * m.spacing[1], (m.spacing[0], m.spacing[2]), "thickness-mm")


def intensity_projection(v: Volume, m: BinaryMask3D, amap: AttenuationMap = DEFAULT_ATTENUATION) -> ProjectionImage:
    """Attenuation line integral restricted to mask voxels."""
    return ProjectionImage(column_integral(v, m, amap), (v.spacing[0], v.spacing[2]), "intensity-integral")


def project_mask(m: BinaryMask3D, mode: str, v: Volume | None = None, amap: AttenuationMap = DEFAULT_ATTENUATION):
    if mode == "thickness":
        return thickness_projection(m)
    if mode == "intensity":
        if v is None:
            raise UsageError("intensity projection needs the CT volume")
        return intensity_projection(v, m, amap)
    raise UsageError(f"unknown projection mode {mode!r}")


def binarize_map(img: ProjectionImage, c: CutoffConfig) -> BinaryMask2D:
    if img.kind != _MODE_KIND[c.mode]:
        raise UsageError(f"cannot binarize a {img.kind} map with a {c.mode} cutoff")
    fg = img.data >= c.cutoff if c.inclusive else img.data > c.cutoff
    return BinaryMask2D(fg, img.spacing)


def cutoff_grid(lo: float, hi: float, step: float) -> list[float]:
    """lo, lo + step, ... up to hi inclusive (with a small float tolerance)."""
    if not step > 0:
        raise UsageError(f"grid step must be > 0, got {step}")
    if lo > hi:
        raise UsageError(f"grid lower bound {lo} exceeds upper bound {hi}")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [lo + k * step for k in range(n)]


def parse_grid(text: str):
    """Parse ``lo:hi:step``."""
    try:
        lo, hi, step = (float(p) for p in text.split(":"))
    except ValueError:
        raise UsageError(f"grid must look like lo:hi:step, got {text!r}") from None
    return lo, hi, step


def calibrate_cutoff(dataset, mode: str, grid, lung_cutoff: CutoffConfig = LUNG_CUTOFF,
                     amap: AttenuationMap = DEFAULT_ATTENUATION) -> CalibrationResult:
    """Exhaustive search for the lesion cutoff minimizing mean |POa - POv|.

    ``dataset`` holds (volume, lung mask, lesion mask) triples. Lungs are
    binarized at ``lung_cutoff`` throughout. Ties resolve to the smallest cutoff.
    """
    dataset = list(dataset)
    if not dataset:
        raise UsageError("calibration dataset is empty")
    cutoffs = cutoff_grid(*grid)
    cases = []
    for v, lung, lesion in dataset:
        lung2d = binarize_map(thickness_projection(lung), lung_cutoff)
        lesion_map = project_mask(lesion, mode, v, amap)
        cases.append((lung2d, lesion_map, pov(lung, lesion)))

    curve = []
    for c in cutoffs:
        cfg = CutoffConfig(mode, c)
        errors = [abs(poa(lung2d, binarize_map(lmap, cfg)) - pv) for lung2d, lmap, pv in cases]
        curve.append((c, math.fsum(errors) / len(errors)))
    best_cutoff, best_mae = min(curve, key=lambda cm: (cm[1], cm[0]))
    return CalibrationResult(best_cutoff, best_mae, curve, mode)
