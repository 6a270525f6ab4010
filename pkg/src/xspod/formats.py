"""XR32 raster container and ``key = value`` sidecars.

XR32 layout: 16-byte header (``b"XR32"``, width, height, reserved as
little-endian uint32) followed by ``width * height`` little-endian float32
values in row-major order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = b"XR32"
_HEADER = np.dtype([("magic", "S4"), ("width", "<u4"), ("height", "<u4"), ("reserved", "<u4")])


class FormatError(ValueError):
    pass


def write_xr32(path, raster) -> None:
    a = np.asarray(raster)
    if a.ndim != 2:
        raise FormatError("raster must be 2-D")
    header = np.array([(MAGIC, a.shape[1], a.shape[0], 0)], dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_xr32(path) -> np.ndarray:
    """Raster as a float32 array of shape (height, width)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.itemsize:
        raise FormatError(f"{path}: truncated header")
    h = np.frombuffer(data[:_HEADER.itemsize], dtype=_HEADER)[0]
    if h["magic"] != MAGIC:
        raise FormatError(f"{path}: bad magic {h['magic']!r}")
    width, height = int(h["width"]), int(h["height"])
    body = data[_HEADER.itemsize:]
    if len(body) != 4 * width * height:
        raise FormatError(f"{path}: expected {width * height} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(height, width).astype(np.float32)


def write_meta(path, values: dict) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {v}\n")


def read_meta(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed line {line!r}")
        out[k.strip()] = v.strip()
    return out
