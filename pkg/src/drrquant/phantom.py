"""Synthetic CT phantoms built from boxes and ellipsoids with known opacity fractions."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DegenerateError, InvariantError, UnsupportedSpecError
from .grids import BinaryMask3D, Volume
from .quant import pov

HU_MIN, HU_MAX = -1024, 3071
DEFAULT_HU = {
    "background": -1000,
    "body": 40,
    "lung": -850,
    "ggo": -600,
    "consolidation": 20,
}


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned box or ellipsoid; ``half`` is half-extents or semi-axes in mm."""

    shape: str
    center: tuple[float, float, float]
    half: tuple[float, float, float]
    hu: float | None = None
    kind: str = "ggo"

    def __post_init__(self):
        if self.shape not in ("box", "ellipsoid"):
            raise InvariantError(f"unknown primitive shape {self.shape!r}")
        if len(self.center) != 3 or len(self.half) != 3:
            raise InvariantError("primitive center and half sizes need 3 components")
        if not all(h > 0 for h in self.half):
            raise InvariantError(f"primitive sizes must be positive, got {self.half}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "half", tuple(float(h) for h in self.half))

    @property
    def lo(self):
        return tuple(c - h for c, h in zip(self.center, self.half))

    @property
    def hi(self):
        return tuple(c + h for c, h in zip(self.center, self.half))

    @property
    def volume(self):
        a, b, c = self.half
        if self.shape == "box":
            return 8.0 * a * b * c
        return 4.0 / 3.0 * math.pi * a * b * c

    def contains(self, x, y, z):
        """Center-point membership on broadcastable coordinate arrays."""
        if self.shape == "box":
            (x0, y0, z0), (x1, y1, z1) = self.lo, self.hi
            return (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z < z1)
        (cx, cy, cz), (a, b, c) = self.center, self.half
        return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0

    @classmethod
    def from_dict(cls, d):
        half = d.get("half_extents", d.get("semi_axes", d.get("half")))
        if half is None:
            raise InvariantError(f"primitive {d} needs half_extents or semi_axes")
        return cls(d.get("shape", "box"), tuple(d["center"]), tuple(half), d.get("hu"), d.get("kind", "ggo"))

    def to_dict(self):
        key = "half_extents" if self.shape == "box" else "semi_axes"
        out = {"shape": self.shape, "center": list(self.center), key: list(self.half), "kind": self.kind}
        if self.hu is not None:
            out["hu"] = self.hu
        return out


def box(lo, hi, **kw):
    """Box from its corner coordinates."""
    center = tuple((a + b) / 2 for a, b in zip(lo, hi))
    half = tuple((b - a) / 2 for a, b in zip(lo, hi))
    return Primitive("box", center, half, **kw)


def ellipsoid(center, semi_axes, **kw):
    return Primitive("ellipsoid", tuple(center), tuple(semi_axes), **kw)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    lungs: tuple[Primitive, ...]
    lesions: tuple[Primitive, ...] = ()
    body: Primitive | None = None
    hu: dict = field(default_factory=lambda: dict(DEFAULT_HU))
    origin: tuple[float, float, float] | None = None
    noise_hu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lungs", tuple(self.lungs))
        object.__setattr__(self, "lesions", tuple(self.lesions))
        object.__setattr__(self, "hu", {**DEFAULT_HU, **self.hu})
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvariantError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvariantError(f"spacing must be three positive values, got {self.spacing}")
        for name, value in self.hu.items():
            if not HU_MIN <= value <= HU_MAX:
                raise InvariantError(f"HU for {name} = {value} outside [{HU_MIN}, {HU_MAX}]")
        for p in self.lesions:
            if p.hu is not None and not HU_MIN <= p.hu <= HU_MAX:
                raise InvariantError(f"lesion HU {p.hu} outside [{HU_MIN}, {HU_MAX}]")
            if p.hu is None and p.kind not in self.hu:
                raise InvariantError(f"unknown lesion kind {p.kind!r}")
        if self.noise_hu < 0:
            raise InvariantError("noise_hu must be >= 0")

    @property
    def grid_origin(self):
        """Center of voxel (0, 0, 0); by default the grid spans [0, n * spacing]."""
        if self.origin is not None:
            return tuple(float(o) for o in self.origin)
        return tuple(s / 2 for s in self.spacing)

    def extent(self):
        o = self.grid_origin
        lo = tuple(oi - s / 2 for oi, s in zip(o, self.spacing))
        hi = tuple(oi + (n - 0.5) * s for oi, n, s in zip(o, self.dims, self.spacing))
        return lo, hi

    @classmethod
    def from_dict(cls, d):
        return cls(
            dims=tuple(d["dims"]),
            spacing=tuple(d["spacing"]),
            lungs=tuple(Primitive.from_dict(p) for p in d.get("lungs", [])),
            lesions=tuple(Primitive.from_dict(p) for p in d.get("lesions", [])),
            body=Primitive.from_dict(d["body"]) if d.get("body") else None,
            hu=d.get("hu", {}),
            origin=tuple(d["origin"]) if d.get("origin") is not None else None,
            noise_hu=float(d.get("noise_hu", 0.0)),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": list(self.origin) if self.origin is not None else None,
            "body": self.body.to_dict() if self.body else None,
            "lungs": [p.to_dict() for p in self.lungs],
            "lesions": [p.to_dict() for p in self.lesions],
            "hu": dict(self.hu),
            "noise_hu": self.noise_hu,
            "seed": self.seed,
        }

    def with_spacing(self, spacing):
        """Same physical extent at a different voxel size."""
        lo, hi = self.extent()
        dims = tuple(int(round((b - a) / s)) for a, b, s in zip(lo, hi, spacing))
        origin = tuple(a + s / 2 for a, s in zip(lo, spacing))
        d = self.to_dict()
        d.update(dims=list(dims), spacing=list(spacing), origin=list(origin))
        return PhantomSpec.from_dict(d)


@dataclass(frozen=True)
class PhantomTruth:
    pov_analytic: float | None
    pov_voxelized: float

    def to_dict(self):
        return asdict(self)


# -- pairwise geometry ------------------------------------------------------------

def _max_concave(f, lo=0.0, hi=1.0, iters=200):
    for _ in range(iters):
        m1 = lo + (hi - lo) / 3
        m2 = hi - (hi - lo) / 3
        if f(m1) < f(m2):
            lo = m1
        else:
            hi = m2
    return f((lo + hi) / 2)


def overlaps(p: Primitive, q: Primitive) -> bool:
    """True if the two primitives share a region of positive volume."""
    if p.shape == "box" and q.shape == "box":
        return all(min(a1, b1) - max(a0, b0) > 0 for a0, a1, b0, b1 in zip(p.lo, p.hi, q.lo, q.hi))
    if p.shape == "box":
        p, q = q, p
    if q.shape == "box":
        # scale so p becomes the unit ball; nearest box point to its center
        d2 = 0.0
        for c, a, lo, hi in zip(p.center, p.half, q.lo, q.hi):
            u0, u1 = (lo - c) / a, (hi - c) / a
            nearest = min(max(0.0, u0), u1)
            d2 += nearest * nearest
        return d2 < 1.0
    # separating function for two axis-aligned ellipsoids (concave in s)
    d = [cp - cq for cp, cq in zip(p.center, q.center)]

    def k(s):
        return sum(
            s * (1 - s) * di * di / (s * a * a + (1 - s) * b * b)
            for di, a, b in zip(d, p.half, q.half)
        )

    return _max_concave(k) < 1.0


def _fibonacci_sphere(n=20000):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def inside(p: Primitive, q: Primitive, tol=1e-9) -> bool:
    """True if primitive ``p`` lies entirely within primitive ``q``."""
    if q.shape == "box":
        return all(a0 >= b0 - tol and a1 <= b1 + tol for a0, a1, b0, b1 in zip(p.lo, p.hi, q.lo, q.hi))
    c, b = np.array(q.center), np.array(q.half)
    if p.shape == "box":
        pts = np.array(list(itertools.product(*zip(p.lo, p.hi))))
    else:
        # ellipsoid in ellipsoid: dense surface sampling plus axis extremes
        dirs = np.vstack([_fibonacci_sphere(), np.eye(3), -np.eye(3)])
        pts = np.array(p.center) + dirs * np.array(p.half)
    return bool(np.all((((pts - c) / b) ** 2).sum(axis=1) <= 1.0 + tol))


def _check_disjoint(prims, what):
    for (i, p), (j, q) in itertools.combinations(enumerate(prims), 2):
        if overlaps(p, q):
            raise UnsupportedSpecError(f"{what} primitives {i} and {j} overlap")


def analytic_pov(spec: PhantomSpec) -> float:
    """Closed-form opacity percentage: total lesion volume over total lung volume."""
    if not spec.lungs:
        raise DegenerateError("phantom has no lung primitives")
    _check_disjoint(spec.lungs, "lung")
    _check_disjoint(spec.lesions, "lesion")
    for i, les in enumerate(spec.lesions):
        if not any(inside(les, lung) for lung in spec.lungs):
            raise UnsupportedSpecError(f"lesion {i} is not contained in a single lung primitive")
    lung_vol = math.fsum(p.volume for p in spec.lungs)
    lesion_vol = math.fsum(p.volume for p in spec.lesions)
    return 100.0 * lesion_vol / lung_vol


# -- voxelization -------------------------------------------------------------------

def _coords(spec):
    o, s, n = spec.grid_origin, spec.spacing, spec.dims
    x = o[0] + np.arange(n[0]) * s[0]
    y = o[1] + np.arange(n[1]) * s[1]
    z = o[2] + np.arange(n[2]) * s[2]
    return x[None, None, :], y[None, :, None], z[:, None, None]


def _union(prims, coords, shape):
    out = np.zeros(shape, dtype=bool)
    for p in prims:
        out |= p.contains(*coords)
    return out


def _check_extent(spec):
    lo, hi = spec.extent()
    prims = [*spec.lungs, *spec.lesions, *([spec.body] if spec.body else [])]
    for p in prims:
        if any(a < b - 1e-9 for a, b in zip(p.lo, lo)) or any(a > b + 1e-9 for a, b in zip(p.hi, hi)):
            raise InvariantError(f"primitive {p.to_dict()} extends outside the grid {lo}..{hi}")


def generate_phantom(spec: PhantomSpec):
    """Voxelize ``spec``; returns (volume, lung mask, lesion mask, truth)."""
    _check_extent(spec)
    shape = (spec.dims[2], spec.dims[1], spec.dims[0])
    coords = _coords(spec)
    lung = _union(spec.lungs, coords, shape)
    if not lung.any():
        raise DegenerateError("lung mask is empty after voxelization")
    lesion = _union(spec.lesions, coords, shape) & lung

    hu = np.full(shape, spec.hu["background"], dtype=np.float64)
    if spec.body is not None:
        hu[spec.body.contains(*coords)] = spec.hu["body"]
    hu[lung] = spec.hu["lung"]
    for p in spec.lesions:
        value = p.hu if p.hu is not None else spec.hu[p.kind]
        hu[p.contains(*coords) & lung] = value
    if spec.noise_hu > 0:
        rng = np.random.default_rng(spec.seed)
        hu += rng.normal(0.0, spec.noise_hu, size=shape)
    hu = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)

    origin = spec.grid_origin
    volume = Volume(hu, spec.spacing, origin)
    lung_m = BinaryMask3D(lung, spec.spacing, origin)
    lesion_m = BinaryMask3D(lesion, spec.spacing, origin)
    try:
        analytic = analytic_pov(spec)
    except UnsupportedSpecError:
        analytic = None
    return volume, lung_m, lesion_m, PhantomTruth(analytic, pov(lung_m, lesion_m))
