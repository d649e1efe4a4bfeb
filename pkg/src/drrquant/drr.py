"""Digitally reconstructed radiographs: axis-aligned parallel projection along y,
isotropic cubic resampling and Laplacian-pyramid sub-band normalization."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateError, GeometryError, InvariantError, UsageError
from .grids import BinaryMask3D, ProjectionImage, Volume

# z-slices per chunk; bounds the int32 scratch buffer for large volumes
_CHUNK_SLICES = 16
PYRAMID_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class AttenuationMap:
    """a(h) = max(h + offset_hu, floor) / scale_hu, an attenuation proxy per mm."""

    offset_hu: float = 1024.0
    floor: float = 0.0
    scale_hu: float = 1000.0

    def __call__(self, hu):
        return np.maximum(np.asarray(hu, dtype=np.float64) + self.offset_hu, self.floor) / self.scale_hu

    @property
    def integral_friendly(self):
        return float(self.offset_hu).is_integer() and float(self.floor).is_integer()


@dataclass(frozen=True)
class DrrConfig:
    attenuation: AttenuationMap = field(default_factory=AttenuationMap)
    target_pixel_spacing: float | str | None = "auto-min"
    band_levels: int = 4
    band_gains: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    band_epsilon: float = 1e-6
    output_window: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "band_gains", tuple(float(g) for g in self.band_gains))
        object.__setattr__(self, "output_window", tuple(float(w) for w in self.output_window))
        if self.band_levels < 1:
            raise InvariantError("band_levels must be >= 1")
        if len(self.band_gains) != self.band_levels:
            raise InvariantError(f"band_gains has {len(self.band_gains)} entries, band_levels is {self.band_levels}")
        if not self.band_epsilon > 0:
            raise InvariantError("band_epsilon must be > 0")
        t = self.target_pixel_spacing
        if t is not None and t != "auto-min" and not (isinstance(t, (int, float)) and t > 0):
            raise InvariantError(f"target_pixel_spacing must be > 0, 'auto-min' or null, got {t!r}")
        lo, hi = self.output_window
        if not hi > lo:
            raise InvariantError(f"output_window must satisfy lo < hi, got {self.output_window}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "attenuation" in d:
            d["attenuation"] = AttenuationMap(**d["attenuation"])
        if "band_gains" in d:
            d["band_gains"] = tuple(d["band_gains"])
        if "output_window" in d:
            d["output_window"] = tuple(d["output_window"])
        if "band_levels" in d and "band_gains" not in d:
            d["band_gains"] = (1.0,) * d["band_levels"]
        return cls(**d)

    def to_dict(self):
        out = asdict(self)
        out["band_gains"] = list(self.band_gains)
        out["output_window"] = list(self.output_window)
        return out


DEFAULT_ATTENUATION = AttenuationMap()


# -- projection ---------------------------------------------------------------------

def project_attenuation(att: np.ndarray, sy: float) -> np.ndarray:
    """Column integrals along y of an attenuation array shaped (nz, ny, nx)."""
    return np.asarray(att, dtype=np.float64).sum(axis=1) * sy


def column_integral(v: Volume, mask: BinaryMask3D | None = None, amap: AttenuationMap = DEFAULT_ATTENUATION):
    """Sum of a(h) * sy over each (x, z) column, optionally restricted to ``mask``.

    Integer volumes with an integral offset/floor accumulate exactly in int64,
    so the result does not depend on summation order.
    """
    if mask is not None and mask.geometry != v.geometry:
        raise GeometryError(f"mask geometry {mask.geometry} does not match volume {v.geometry}")
    nz, ny, nx = v.data.shape
    sy = v.spacing[1]
    exact = np.issubdtype(v.data.dtype, np.integer) and amap.integral_friendly
    out = np.empty((nz, nx), dtype=np.int64 if exact else np.float64)
    offset, floor = int(amap.offset_hu) if exact else amap.offset_hu, int(amap.floor) if exact else amap.floor
    for z0 in range(0, nz, _CHUNK_SLICES):
        chunk = v.data[z0:z0 + _CHUNK_SLICES]
        if exact:
            shifted = chunk.astype(np.int64 if chunk.dtype.itemsize > 2 else np.int32)
        else:
            shifted = chunk.astype(np.float64)
        shifted += offset
        np.maximum(shifted, floor, out=shifted)
        if mask is not None:
            shifted *= mask.data[z0:z0 + _CHUNK_SLICES]
        out[z0:z0 + _CHUNK_SLICES] = shifted.sum(axis=1, dtype=out.dtype)
    return out.astype(np.float64) / amap.scale_hu * sy


def project_drr(v: Volume, cfg: DrrConfig | None = None) -> ProjectionImage:
    """Raw parallel-projection DRR: pixel (x, z) = sum over y of a(HU) * sy."""
    amap = (cfg or DrrConfig()).attenuation
    return ProjectionImage(column_integral(v, None, amap), (v.spacing[0], v.spacing[2]), "drr")


# -- resampling -----------------------------------------------------------------------

def _keys(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def cubic_weights(n_in: int, spacing_in: float, n_out: int, spacing_out: float) -> np.ndarray:
    """(n_out, n_in) cubic-convolution matrix between two pixel-centered grids
    that share their low edge. Out-of-range taps use linear extrapolation, so
    constants and ramps are reproduced exactly."""
    w = np.zeros((n_out, n_in))
    for j in range(n_out):
        u = (j + 0.5) * spacing_out / spacing_in - 0.5
        base = math.floor(u)
        for k in range(base - 1, base + 3):
            wk = _keys(u - k)
            if wk == 0.0:
                continue
            if n_in == 1:
                w[j, 0] += wk
            elif k < 0:
                w[j, 0] += wk * (1 - k)
                w[j, 1] += wk * k
            elif k >= n_in:
                d = k - (n_in - 1)
                w[j, n_in - 1] += wk * (1 + d)
                w[j, n_in - 2] -= wk * d
            else:
                w[j, k] += wk
    return w


def resample_isotropic(img: ProjectionImage, target: float | str = "auto-min") -> ProjectionImage:
    """Bicubic resampling onto a square grid of pixel size ``target`` mm.

    Output dims are ceil(extent / target) per axis. Results are clipped to the
    kind's valid range (>= 0, and <= 1 for probability maps).
    """
    if target == "auto-min":
        target = min(img.spacing)
    target = float(target)
    if not target > 0:
        raise UsageError(f"target spacing must be > 0, got {target}")
    (nx, nz), (sx, sz) = img.dims, img.spacing
    ext_x, ext_z = nx * sx, nz * sz
    if target > ext_x or target > ext_z:
        raise DegenerateError(f"target spacing {target} mm exceeds image extent ({ext_x}, {ext_z}) mm")
    mx = math.ceil(ext_x / target - 1e-9)
    mz = math.ceil(ext_z / target - 1e-9)
    wx = cubic_weights(nx, sx, mx, target)
    wz = cubic_weights(nz, sz, mz, target)
    out = wz @ img.data @ wx.T
    hi = 1.0 if img.kind == "probability" else None
    return ProjectionImage(np.clip(out, 0.0, hi), (target, target), img.kind)


# -- Laplacian pyramid ------------------------------------------------------------------

def _blur_axis(a, axis):
    pad = [(0, 0)] * a.ndim
    pad[axis] = (2, 2)
    p = np.pad(a, pad, mode="reflect")
    n = a.shape[axis]
    out = np.zeros_like(a, dtype=np.float64)
    for i, k in enumerate(PYRAMID_KERNEL):
        out += k * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def _reduce(a):
    return _blur_axis(_blur_axis(a, 0), 1)[::2, ::2]


def _expand_axis(a, axis, n_out):
    g = np.moveaxis(a, axis, 0)
    p = np.concatenate([g[:1], g, g[-1:]], axis=0)
    even = (p[:-2] + 6 * p[1:-1] + p[2:]) / 8.0
    odd = (p[1:-1] + p[2:]) / 2.0
    out = np.empty((2 * g.shape[0],) + g.shape[1:])
    out[0::2] = even
    out[1::2] = odd
    return np.moveaxis(out[:n_out], 0, axis)


def _expand(a, shape):
    return _expand_axis(_expand_axis(a, 0, shape[0]), 1, shape[1])


def laplacian_decompose(data: np.ndarray, levels: int):
    """Return (detail bands finest-first, base)."""
    g = np.asarray(data, dtype=np.float64)
    bands = []
    for _ in range(levels):
        smaller = _reduce(g)
        bands.append(g - _expand(smaller, g.shape))
        g = smaller
    return bands, g


def laplacian_reconstruct(bands, base):
    g = base
    for band in reversed(bands):
        g = band + _expand(g, band.shape)
    return g


def normalize_bands(data: np.ndarray, cfg: DrrConfig) -> np.ndarray:
    """Scale every detail band with std >= epsilon to unit std times its gain,
    then reconstruct. No window mapping."""
    bands, base = laplacian_decompose(data, cfg.band_levels)
    scaled = []
    for band, gain in zip(bands, cfg.band_gains):
        sd = float(band.std())
        scaled.append(band / sd * gain if sd >= cfg.band_epsilon else band)
    return laplacian_reconstruct(scaled, base)


def window_map(data: np.ndarray, window) -> np.ndarray:
    """Affine map of [min, max] onto ``window``; constant input lands on its midpoint."""
    lo, hi = window
    dmin, dmax = float(data.min()), float(data.max())
    if dmax - dmin <= 0:
        return np.full(data.shape, (lo + hi) / 2.0)
    return lo + (data - dmin) * ((hi - lo) / (dmax - dmin))


def band_normalize(img: ProjectionImage, cfg: DrrConfig | None = None) -> ProjectionImage:
    cfg = cfg or DrrConfig()
    if img.kind != "drr":
        raise UsageError(f"sub-band normalization applies to DRRs, got kind {img.kind!r}")
    if cfg.output_window[0] < 0:
        raise InvariantError("output_window must be non-negative for a DRR")
    out = window_map(normalize_bands(img.data, cfg), cfg.output_window)
    return ProjectionImage(np.clip(out, *cfg.output_window), img.spacing, "drr")


def generate_drr(v: Volume, cfg: DrrConfig | None = None) -> ProjectionImage:
    """Full DRR pipeline: projection, optional isotropic resampling, band normalization."""
    cfg = cfg or DrrConfig()
    img = project_drr(v, cfg)
    if cfg.target_pixel_spacing is not None:
        img = resample_isotropic(img, cfg.target_pixel_spacing)
    return band_normalize(img, cfg)
