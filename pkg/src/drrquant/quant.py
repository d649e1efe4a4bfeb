"""Severity measures: volume and area opacity percentages, reader combination, ensembles."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, GeometryError, InvariantError, UsageError
from .grids import BinaryMask2D, BinaryMask3D, ProjectionImage, require_same_geometry

log = logging.getLogger(__name__)

METHODS = (
    "ground-truth-drr",
    "reader-1",
    "reader-2",
    "reader-avg",
    "reader-inter",
    "reader-union",
    "cnn-single",
    "cnn-ensemble",
)
DEFAULT_PROBABILITY_THRESHOLD = 0.5


def method_sort_key(name):
    """Canonical report order; extra readers (reader-3, ...) slot in after reader-2."""
    if name in METHODS:
        return (METHODS.index(name), 0, name)
    if name.startswith("reader-") and name[7:].isdigit():
        return (METHODS.index("reader-2"), int(name[7:]), name)
    return (len(METHODS), 0, name)


@dataclass
class SeverityRecord:
    case_id: str
    pov_ct: float | None = None
    poa_by_method: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in [("pov_ct", self.pov_ct), *self.poa_by_method.items()]:
            if value is not None and not 0.0 <= value <= 100.0:
                raise InvariantError(f"{self.case_id}: {name} = {value} outside [0, 100]")

    def to_dict(self):
        return {
            "case_id": self.case_id,
            "pov_ct": self.pov_ct,
            "poa_by_method": {k: self.poa_by_method[k] for k in sorted(self.poa_by_method, key=method_sort_key)},
        }


def _ratio(lung, lesion, what):
    require_same_geometry(lung, lesion, f"lung and lesion {what}")
    n_lung = int(np.count_nonzero(lung.data))
    if n_lung == 0:
        raise DegenerateError(f"lung {what} is empty; opacity percentage undefined")
    inter = lesion.data & lung.data
    n_lesion = int(np.count_nonzero(inter))
    stray = int(np.count_nonzero(lesion.data)) - n_lesion
    if stray:
        # 2D lesion maps are constrained to the lung by definition; stray 3D voxels hint at bad masks
        level = logging.WARNING if what == "masks (3D)" else logging.DEBUG
        log.log(level, "%d lesion %s outside the lung mask excluded", stray, "voxels" if what == "masks (3D)" else "pixels")
    return 100.0 * n_lesion / n_lung


def pov(lung: BinaryMask3D, lesion: BinaryMask3D) -> float:
    """Percentage of lung volume occupied by lesion; a pure voxel-count ratio."""
    return _ratio(lung, lesion, "masks (3D)")


def poa(lung: BinaryMask2D, lesion: BinaryMask2D) -> float:
    """Percentage of projected lung area covered by lesion pixels inside the lung."""
    return _ratio(lung, lesion, "masks (2D)")


def mae(xs, ys) -> float:
    """Mean absolute difference, summed with correctly rounded ``math.fsum``."""
    xs, ys = list(xs), list(ys)
    if len(xs) != len(ys):
        raise UsageError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if not xs:
        raise UsageError("mae of empty lists is undefined")
    return math.fsum(abs(x - y) for x, y in zip(xs, ys)) / len(xs)


def _check_masks(masks, minimum):
    if len(masks) < minimum:
        raise UsageError(f"need at least {minimum} masks, got {len(masks)}")
    for m in masks[1:]:
        require_same_geometry(masks[0], m, "reader masks")


def combine_readers(masks, mode: str, lung: BinaryMask2D | None = None):
    """Combine reader annotations.

    ``avg`` returns the mean of per-reader opacity percentages (needs ``lung``);
    ``inter`` and ``union`` return the pixelwise combined mask.
    """
    _check_masks(masks, 2)
    if mode == "avg":
        if lung is None:
            raise UsageError("reader averaging needs the paired lung mask")
        return math.fsum(poa(lung, m) for m in masks) / len(masks)
    if mode == "inter":
        data = np.logical_and.reduce([m.data for m in masks])
    elif mode == "union":
        data = np.logical_or.reduce([m.data for m in masks])
    else:
        raise UsageError(f"unknown combination mode {mode!r}")
    return BinaryMask2D(data, masks[0].spacing)


def ensemble_average(maps) -> ProjectionImage:
    if not maps:
        raise UsageError("ensemble needs at least one probability map")
    for m in maps:
        if m.kind != "probability":
            raise UsageError(f"ensemble members must be probability maps, got {m.kind}")
        require_same_geometry(maps[0], m, "probability maps")
        if m.data.min() < 0 or m.data.max() > 1:
            raise InvariantError("probability map values outside [0, 1]")
    # summing sorted members makes the result bitwise independent of input order;
    # offsets from the pixel minimum make identical members average to themselves
    stack = np.sort(np.stack([np.asarray(m.data, dtype=np.float64) for m in maps]), axis=0)
    mean = stack[0] + (stack - stack[0]).sum(axis=0) / len(maps)
    return ProjectionImage(np.clip(mean, 0.0, 1.0), maps[0].spacing, "probability")


def probability_to_mask(p: ProjectionImage, lung: BinaryMask2D, thr: float = DEFAULT_PROBABILITY_THRESHOLD) -> BinaryMask2D:
    if not 0.0 <= thr <= 1.0:
        raise UsageError(f"probability threshold must lie in [0, 1], got {thr}")
    if p.geometry != lung.geometry:
        raise GeometryError(f"probability map {p.geometry} and lung mask {lung.geometry} differ")
    return BinaryMask2D((p.data >= thr) & lung.data, lung.spacing)
