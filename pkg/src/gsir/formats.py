"""Byte-level file formats: PFM images and the little-endian array containers
used for baked volumes ("GSIRVOL1") and shading lookup tables ("GSIRLUT1").

Layouts are documented in docs/formats.md. All multi-byte values are
little-endian; all payloads are 32-bit floats and are validated to be finite
on load.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import SchemaError

VOL_MAGIC = b"GSIRVOL1"
LUT_MAGIC = b"GSIRLUT1"
_NAME_LEN = 16


def _check_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = np.unravel_index(int(np.argmax(bad)), arr.shape)
        raise SchemaError(f"{what} contains a non-finite value at index {tuple(int(i) for i in idx)}")


# --------------------------------------------------------------------------
# PFM (portable float map), rows stored bottom to top, negative scale marks
# little-endian data.


def write_pfm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header = b"Pf"
        payload = image
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
        payload = image
    else:
        raise SchemaError("PFM supports 1- or 3-channel images")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(payload[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise SchemaError(f"not a PFM file: magic {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise SchemaError("malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        channels = 3 if magic == b"PF" else 1
        count = w * h * channels
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dt, count=count)
    if data.size != count:
        raise SchemaError("PFM payload truncated")
    img = data.reshape(h, w, channels)[::-1].astype(np.float64)
    if channels == 1:
        img = img[:, :, 0]
    _check_finite(img, f"PFM {path}")
    return img


# --------------------------------------------------------------------------
# Named-array containers


def _write_name(f, name: str) -> None:
    raw = name.encode()
    if len(raw) > _NAME_LEN:
        raise SchemaError(f"name '{name}' exceeds {_NAME_LEN} bytes")
    f.write(raw.ljust(_NAME_LEN, b"\0"))


def _read_name(f) -> str:
    raw = f.read(_NAME_LEN)
    if len(raw) != _NAME_LEN:
        raise SchemaError("container truncated in a name field")
    return raw.rstrip(b"\0").decode()


def write_volume_container(path, grids: dict) -> None:
    """Serialize named volume grids.

    Each value is a dict with keys dims (3 ints), bounds_min, bounds_max
    (3 floats each), deg (int), coeffs (gx, gy, gz, channels, (deg+1)^2).
    """
    with open(path, "wb") as f:
        f.write(VOL_MAGIC)
        f.write(struct.pack("<I", len(grids)))
        for name, g in grids.items():
            coeffs = np.asarray(g["coeffs"], dtype=np.float32)
            gx, gy, gz, channels, ncoef = coeffs.shape
            if (gx, gy, gz) != tuple(g["dims"]):
                raise SchemaError("coeff array shape disagrees with dims")
            if ncoef != (g["deg"] + 1) ** 2:
                raise SchemaError("coefficient count disagrees with degree")
            _write_name(f, name)
            f.write(struct.pack("<III", gx, gy, gz))
            f.write(np.asarray(g["bounds_min"], dtype=np.float32).tobytes())
            f.write(np.asarray(g["bounds_max"], dtype=np.float32).tobytes())
            f.write(struct.pack("<II", int(g["deg"]), channels))
            f.write(np.ascontiguousarray(coeffs).tobytes())


def read_volume_container(path) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != VOL_MAGIC:
            raise SchemaError(f"{path}: bad magic, expected GSIRVOL1")
        (count,) = struct.unpack("<I", f.read(4))
        grids = {}
        for _ in range(count):
            name = _read_name(f)
            gx, gy, gz = struct.unpack("<III", f.read(12))
            bmin = np.frombuffer(f.read(12), dtype="<f4").astype(np.float64)
            bmax = np.frombuffer(f.read(12), dtype="<f4").astype(np.float64)
            deg, channels = struct.unpack("<II", f.read(8))
            ncoef = (deg + 1) ** 2
            n = gx * gy * gz * channels * ncoef
            data = np.frombuffer(f.read(n * 4), dtype="<f4", count=n)
            if data.size != n:
                raise SchemaError(f"{path}: grid '{name}' payload truncated")
            coeffs = data.reshape(gx, gy, gz, channels, ncoef).astype(np.float64)
            _check_finite(coeffs, f"grid '{name}'")
            grids[name] = {"dims": (gx, gy, gz), "bounds_min": bmin,
                           "bounds_max": bmax, "deg": deg, "coeffs": coeffs}
    return grids


def write_lut_container(path, arrays: dict) -> None:
    """Serialize named float32 arrays (lookup tables, prefiltered levels)."""
    with open(path, "wb") as f:
        f.write(LUT_MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float32)
            _write_name(f, name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_lut_container(path) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != LUT_MAGIC:
            raise SchemaError(f"{path}: bad magic, expected GSIRLUT1")
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            name = _read_name(f)
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(n * 4), dtype="<f4", count=n)
            if data.size != n:
                raise SchemaError(f"{path}: array '{name}' payload truncated")
            arr = data.reshape(shape).astype(np.float64)
            _check_finite(arr, f"array '{name}'")
            out[name] = arr
    return out
