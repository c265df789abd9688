"""Binary file formats for images, spectral fields and deformation grids.

All integers are little-endian int32 and all floats little-endian float64.

``SFV1``  spectral velocity: magic, nx, ny, trunc, then ``trunc*trunc*2``
          complex values as interleaved (re, im) pairs, row-major over
          (k1, k2, component) with signed frequencies ascending from
          ``-(trunc // 2)``.
``DGF1``  deformation grid: magic, nx, ny, 2, then ``nx*ny*2`` floats,
          row-major over (i, j, component).
``IMF1``  float image: magic, nx, ny, then ``nx*ny`` floats, row-major.
``P5``    8-bit binary PGM; first array axis is the row axis.
"""
from __future__ import annotations

import os
import re
import struct

import numpy as np

from .fourier import GridSpec, hermitian_defect, HERMITIAN_TOL

_I32 = "<i4"
_F64 = "<f8"


class FormatError(ValueError):
    pass


def _read_header(buf: bytes, magic: bytes, nints: int) -> tuple[int, ...]:
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    return struct.unpack("<" + "i" * nints, buf[4:4 + 4 * nints])


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_spectral(path, c: np.ndarray, g: GridSpec):
    if c.shape != (g.trunc, g.trunc, 2):
        raise FormatError(f"spectrum shape {c.shape} does not match trunc={g.trunc}")
    header = b"SFV1" + struct.pack("<iii", g.nx, g.ny, g.trunc)
    body = np.ascontiguousarray(c, dtype=np.complex128).view(np.float64).astype(_F64).tobytes()
    _atomic_write(path, header + body)


def read_spectral(path) -> tuple[np.ndarray, GridSpec]:
    with open(path, "rb") as fh:
        buf = fh.read()
    nx, ny, trunc = _read_header(buf, b"SFV1", 3)
    g = GridSpec(nx, ny, trunc)
    vals = np.frombuffer(buf[16:], dtype=_F64)
    if vals.size != trunc * trunc * 4:
        raise FormatError(f"expected {trunc * trunc * 4} floats, found {vals.size}")
    c = (vals[0::2] + 1j * vals[1::2]).reshape(trunc, trunc, 2)
    if hermitian_defect(c, g) > HERMITIAN_TOL:
        raise FormatError("stored spectrum is not Hermitian-symmetric")
    return c, g


def write_grid(path, m: np.ndarray):
    nx, ny, two = m.shape
    if two != 2:
        raise FormatError("deformation grid must have 2 components")
    _atomic_write(path, b"DGF1" + struct.pack("<iii", nx, ny, 2) + np.asarray(m, dtype=_F64).tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    nx, ny, c = _read_header(buf, b"DGF1", 3)
    vals = np.frombuffer(buf[16:], dtype=_F64)
    if c != 2 or vals.size != nx * ny * 2:
        raise FormatError("deformation grid size mismatch")
    return vals.reshape(nx, ny, 2).astype(float)


def write_raw_image(path, img: np.ndarray):
    nx, ny = img.shape
    _atomic_write(path, b"IMF1" + struct.pack("<ii", nx, ny) + np.asarray(img, dtype=_F64).tobytes())


def read_raw_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    nx, ny = _read_header(buf, b"IMF1", 2)
    vals = np.frombuffer(buf[12:], dtype=_F64)
    if vals.size != nx * ny:
        raise FormatError(f"expected {nx * ny} pixels, found {vals.size}")
    return vals.reshape(nx, ny).astype(float)


def write_pgm(path, img: np.ndarray, lo: float = 0.0, hi: float = 1.0):
    """Quantise ``img`` from [lo, hi] to 0..255 and write binary PGM."""
    q = np.clip(np.rint((np.asarray(img) - lo) / (hi - lo) * 255), 0, 255).astype(np.uint8)
    rows, cols = q.shape
    _atomic_write(path, f"P5\n{cols} {rows}\n255\n".encode() + q.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit binary PGM into floats in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    m = _PGM_HEADER.match(buf)
    if not m:
        raise FormatError(f"{path}: not a binary PGM")
    cols, rows, maxval = (int(x) for x in m.groups())
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(buf[m.end():], dtype=dtype, count=rows * cols)
    return data.reshape(rows, cols).astype(float) / maxval


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"IMF1":
        return read_raw_image(path)
    if magic[:2] == b"P5":
        return read_pgm(path)
    raise FormatError(f"{path}: unrecognised image format")


def write_image(path, img: np.ndarray, fmt: str = "raw", lo: float = 0.0, hi: float = 1.0):
    if fmt == "raw":
        write_raw_image(path, img)
    elif fmt == "pgm":
        write_pgm(path, img, lo, hi)
    else:
        raise ValueError(f"unknown image format {fmt!r}")
