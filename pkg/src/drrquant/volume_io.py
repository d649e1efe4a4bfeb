"""MetaImage (.mha / .mhd+.raw) volumes and 16-bit PNG + JSON sidecar images."""
from __future__ import annotations

import json
import logging
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IntegrityError, InvariantError, ParseError, UnsupportedFormatError
from .grids import BinaryMask2D, BinaryMask3D, ProjectionImage, Volume

log = logging.getLogger(__name__)

MET_TYPES = {
    "MET_CHAR": np.int8,
    "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_INT": np.int32,
    "MET_UINT": np.uint32,
    "MET_LONG": np.int32,
    "MET_ULONG": np.uint32,
    "MET_LONG_LONG": np.int64,
    "MET_ULONG_LONG": np.uint64,
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
}
_DTYPE_TO_MET = {
    np.dtype(np.int8): "MET_CHAR",
    np.dtype(np.uint8): "MET_UCHAR",
    np.dtype(np.int16): "MET_SHORT",
    np.dtype(np.uint16): "MET_USHORT",
    np.dtype(np.int32): "MET_INT",
    np.dtype(np.uint32): "MET_UINT",
    np.dtype(np.int64): "MET_LONG_LONG",
    np.dtype(np.uint64): "MET_ULONG_LONG",
    np.dtype(np.float32): "MET_FLOAT",
    np.dtype(np.float64): "MET_DOUBLE",
}

U16_MAX = 65535


# -- MetaImage ---------------------------------------------------------------

def _read_header(path: Path):
    """Return (header dict, byte offset just past the ElementDataFile line)."""
    header = {}
    with open(path, "rb") as fh:
        for rawline in fh:
            line = rawline.decode("latin-1").strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(line[:40], "header line has no '=' separator")
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
            if key.strip() == "ElementDataFile":
                return header, fh.tell()
    raise ParseError("ElementDataFile", "missing")


def _ints(header, key, n=None):
    if key not in header:
        raise ParseError(key, "missing")
    try:
        vals = [int(v) for v in header[key].split()]
    except ValueError:
        raise ParseError(key, f"expected integers, got {header[key]!r}") from None
    if n is not None and len(vals) != n:
        raise ParseError(key, f"expected {n} values, got {len(vals)}")
    return vals


def _floats(header, key, n, default=None):
    if key not in header:
        if default is None:
            raise ParseError(key, "missing")
        return list(default)
    try:
        vals = [float(v) for v in header[key].split()]
    except ValueError:
        raise ParseError(key, f"expected numbers, got {header[key]!r}") from None
    if len(vals) != n:
        raise ParseError(key, f"expected {n} values, got {len(vals)}")
    return vals


def _bool(header, key, default=False):
    if key not in header:
        return default
    v = header[key].lower()
    if v in ("true", "1"):
        return True
    if v in ("false", "0"):
        return False
    raise ParseError(key, f"expected True/False, got {header[key]!r}")


def _parse_geometry(path, header):
    ndims = _ints(header, "NDims", 1)[0]
    if ndims != 3:
        raise UnsupportedFormatError(f"{path}: only 3D images are supported, NDims = {ndims}")
    dims = _ints(header, "DimSize", 3)
    if min(dims) < 1:
        raise ParseError("DimSize", f"dimensions must be >= 1, got {dims}")
    spacing_key = "ElementSpacing" if "ElementSpacing" in header else "ElementSize"
    spacing = _floats(header, spacing_key, 3, default=(1.0, 1.0, 1.0))
    origin_key = next((k for k in ("Offset", "Origin", "Position") if k in header), "Offset")
    origin = _floats(header, origin_key, 3, default=(0.0, 0.0, 0.0))
    return dims, tuple(spacing), tuple(origin)


def read_geometry(path, axes: str = "xyz"):
    """(dims, spacing, origin) of a MetaImage without reading its payload."""
    header, _ = _read_header(Path(path))
    dims, spacing, origin = _parse_geometry(path, header)
    if axes != "xyz":
        if sorted(axes) != ["x", "y", "z"]:
            raise ValueError(f"axes must be a permutation of 'xyz', got {axes!r}")
        perm = [axes.index(c) for c in "xyz"]
        dims, spacing, origin = ([seq[p] for p in perm] for seq in (dims, spacing, origin))
    return tuple(dims), tuple(spacing), tuple(origin)


def _read_metaimage(path):
    path = Path(path)
    header, pos = _read_header(path)
    dims, spacing, origin = _parse_geometry(path, header)

    etype = header.get("ElementType")
    if etype is None:
        raise ParseError("ElementType", "missing")
    if etype not in MET_TYPES:
        raise UnsupportedFormatError(f"{path}: unsupported ElementType {etype}")
    channels = _ints(header, "ElementNumberOfChannels", 1)[0] if "ElementNumberOfChannels" in header else 1
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: only scalar images are supported, got {channels} channels")
    msb = _bool(header, "BinaryDataByteOrderMSB", _bool(header, "ElementByteOrderMSB", False))
    compressed = _bool(header, "CompressedData", False)
    if not _bool(header, "BinaryData", True):
        raise UnsupportedFormatError(f"{path}: ASCII payloads are not supported")

    dtype = np.dtype(MET_TYPES[etype]).newbyteorder(">" if msb else "<")
    count = dims[0] * dims[1] * dims[2]
    nbytes = count * dtype.itemsize

    datafile = header["ElementDataFile"]
    if datafile == "LOCAL":
        with open(path, "rb") as fh:
            fh.seek(pos)
            payload = fh.read()
    elif datafile.startswith("LIST") or "%" in datafile:
        raise UnsupportedFormatError(f"{path}: multi-file payloads are not supported")
    else:
        payload = (path.parent / datafile).read_bytes()
        skip = int(header.get("HeaderSize", "0"))
        if skip == -1:
            payload = payload[-nbytes:] if not compressed else payload
        elif skip > 0:
            payload = payload[skip:]

    if compressed:
        try:
            payload = zlib.decompress(payload)
        except zlib.error as exc:
            raise IntegrityError(f"{path}: compressed payload is corrupt ({exc})") from None
    if len(payload) != nbytes:
        raise IntegrityError(
            f"{path}: payload holds {len(payload)} bytes, header DimSize {dims} with {etype} needs {nbytes}"
        )
    data = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))
    data = data.reshape(dims[2], dims[1], dims[0])

    slope = float(header.get("RescaleSlope", 1.0))
    intercept = float(header.get("RescaleIntercept", 0.0))
    if slope != 1.0 or intercept != 0.0:
        data = data.astype(np.float64) * slope + intercept
    return data, tuple(spacing), tuple(origin)


def _permute(data, spacing, origin, axes):
    """Reorder stored axes (named fastest-first in ``axes``) onto x, y, z."""
    if sorted(axes) != ["x", "y", "z"]:
        raise ValueError(f"axes must be a permutation of 'xyz', got {axes!r}")
    if axes == "xyz":
        return data, spacing, origin
    perm = [axes.index(c) for c in "xyz"]
    xyz = data.transpose(2, 1, 0).transpose(perm)
    return (
        np.ascontiguousarray(xyz.transpose(2, 1, 0)),
        tuple(spacing[p] for p in perm),
        tuple(origin[p] for p in perm),
    )


def _frozen(a):
    a.setflags(write=False)
    return a


def load_volume(path, axes: str = "xyz") -> Volume:
    """Load a 3D MetaImage as a Volume.

    ``axes`` names the canonical axis of each stored axis, fastest first; use
    it when the file's anterior-posterior axis is not the second one.
    """
    data, spacing, origin = _permute(*_read_metaimage(path), axes)
    return Volume(_frozen(data), spacing, origin)


def load_mask3d(path, axes: str = "xyz") -> BinaryMask3D:
    data, spacing, origin = _permute(*_read_metaimage(path), axes)
    return BinaryMask3D(_frozen(data != 0), spacing, origin)


def _fmt(vals):
    return " ".join(repr(float(v)) for v in vals)


def save_volume(v: Volume | BinaryMask3D, path, compress: bool = False):
    """Write ``v`` as .mha (payload inline) or .mhd with a sibling .raw."""
    path = Path(path)
    data = v.data.astype(np.uint8) if v.data.dtype == np.bool_ else v.data
    if data.dtype not in _DTYPE_TO_MET:
        raise UnsupportedFormatError(f"cannot store element type {data.dtype}")
    payload = np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes()
    if compress:
        payload = zlib.compress(payload)
    if path.suffix.lower() == ".mhd":
        datafile = path.with_suffix(".raw").name
    else:
        datafile = "LOCAL"
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"CompressedData = {compress}",
    ]
    if compress:
        lines.append(f"CompressedDataSize = {len(payload)}")
    lines += [
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        f"Offset = {_fmt(v.origin)}",
        "AnatomicalOrientation = RAI",
        f"ElementSpacing = {_fmt(v.spacing)}",
        "DimSize = {} {} {}".format(*v.dims),
        f"ElementType = {_DTYPE_TO_MET[data.dtype]}",
        f"ElementDataFile = {datafile}",
    ]
    head = ("\n".join(lines) + "\n").encode("ascii")
    if datafile == "LOCAL":
        path.write_bytes(head + payload)
    else:
        path.write_bytes(head)
        (path.parent / datafile).write_bytes(payload)


# -- 2D PNG + sidecar ----------------------------------------------------------

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def quantize(data, lo, hi):
    """Map [lo, hi] linearly to 0..65535 with round-half-up."""
    scaled = (np.asarray(data, dtype=np.float64) - lo) / (hi - lo) * U16_MAX
    return np.clip(np.floor(scaled + 0.5), 0, U16_MAX).astype(np.uint16)


def default_window(img: ProjectionImage):
    if img.kind == "probability":
        return (0.0, 1.0)
    lo, hi = float(img.data.min()), float(img.data.max())
    if hi <= lo:
        hi = lo + 1.0
    return (lo, hi)


def save_image2d(img: ProjectionImage | BinaryMask2D, path, window=None, extra: dict | None = None):
    """Write a 2D image as PNG plus ``<name>.json`` sidecar.

    Scalar images become 16-bit grayscale scaled over ``window``; masks become
    8-bit {0, 255}.
    """
    path = Path(path)
    meta = {"spacing_mm": list(img.spacing)}
    if isinstance(img, BinaryMask2D):
        Image.fromarray(np.where(img.data, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")
        meta["kind"] = "mask"
    else:
        if img.kind == "probability" and (img.data.min() < 0 or img.data.max() > 1):
            raise InvariantError("probability image has values outside [0, 1]")
        lo, hi = window if window is not None else default_window(img)
        if not hi > lo:
            raise InvariantError(f"window must satisfy lo < hi, got {(lo, hi)}")
        Image.fromarray(quantize(img.data, lo, hi)).save(path, format="PNG")
        meta["kind"] = img.kind
        meta["window"] = [float(lo), float(hi)]
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_sidecar(path):
    side = sidecar_path(path)
    if not side.exists():
        log.warning("%s: no sidecar %s, assuming spacing (1, 1) mm", path, side.name)
        return None
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(str(side), f"invalid JSON ({exc})") from None


def _read_png(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I;16B", "I;16L", "I", "1"):
            raise UnsupportedFormatError(f"{path}: expected a grayscale PNG, got mode {im.mode}")
        return np.array(im)


def load_image2d(path) -> ProjectionImage:
    arr = _read_png(path)
    meta = _read_sidecar(path)
    full = U16_MAX if arr.dtype != np.uint8 else 255
    if meta is None:
        return ProjectionImage(arr.astype(np.float64) / full, (1.0, 1.0), "drr")
    lo, hi = meta.get("window", [0.0, 1.0])
    kind = meta.get("kind", "drr")
    data = lo + arr.astype(np.float64) / full * (hi - lo)
    if kind == "probability":
        data = np.clip(data, 0.0, 1.0)
    return ProjectionImage(data, tuple(meta.get("spacing_mm", (1.0, 1.0))), kind)


def load_mask2d(path) -> BinaryMask2D:
    arr = _read_png(path)
    meta = _read_sidecar(path)
    spacing = tuple(meta.get("spacing_mm", (1.0, 1.0))) if meta else (1.0, 1.0)
    return BinaryMask2D(arr != 0, spacing)
