"""File formats: PFM float maps, PGM/PPM previews, ESRI-style ASCII grids.

PFM follows the usual convention: `PF`/`Pf` magic, dimensions, a scale whose
sign encodes endianness (we always write little-endian, scale -1.0), and
bottom-to-top float32 scanlines. ASCII grids print values with shortest
round-trip formatting so parse(write(x)) is bitwise exact.
"""

from __future__ import annotations

import numpy as np


class FormatError(ValueError):
    pass


NODATA_DEFAULT = -9999.0


def write_pfm(path, array: np.ndarray):
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        magic = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"PF"
    else:
        raise FormatError(f"PFM supports (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: bad PFM magic {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: bad PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    expected = w * h * channels
    if data.size != expected:
        raise FormatError(f"{path}: expected {expected} floats, got {data.size}")
    a = data.reshape((h, w) if channels == 1 else (h, w, channels))
    return np.ascontiguousarray(a[::-1])


def write_pgm(path, array: np.ndarray):
    """8-bit grayscale preview; input in [0, 1] is scaled and clipped."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise FormatError("PGM wants a 2-D array")
    u = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        f.write(u.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise FormatError(f"{path}: bad PGM magic")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != w * h:
        raise FormatError(f"{path}: wrong PGM payload size")
    return data.reshape(h, w) / float(maxval)


def write_ppm(path, array: np.ndarray):
    """8-bit RGB preview; input in [0, 1] is scaled and clipped."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError("PPM wants an (H, W, 3) array")
    u = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        f.write(u.tobytes())


def write_asc(path, grid: np.ndarray, xllcorner: float = 0.0,
              yllcorner: float = 0.0, cellsize: float = 1.0,
              nodata: float = NODATA_DEFAULT, mask: np.ndarray | None = None):
    """ESRI ASCII grid, top row first; masked-out cells become NODATA."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise FormatError("ASCII grid wants a 2-D array")
    rows, cols = g.shape
    lines = [
        f"ncols {cols}",
        f"nrows {rows}",
        f"xllcorner {xllcorner!r}",
        f"yllcorner {yllcorner!r}",
        f"cellsize {cellsize!r}",
        f"NODATA_value {nodata!r}",
    ]
    m = None if mask is None else np.asarray(mask, dtype=bool)
    for i in range(rows):
        vals = []
        for j in range(cols):
            if m is not None and not m[i, j]:
                vals.append(repr(nodata))
            else:
                vals.append(repr(float(g[i, j])))
        lines.append(" ".join(vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_asc(path):
    """Returns (grid, header dict, validity mask)."""
    header = {}
    data_lines = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize",
                       "nodata_value") and len(parts) == 2:
                header[key] = float(parts[1])
            else:
                data_lines.append(parts)
    for req in ("ncols", "nrows", "cellsize"):
        if req not in header:
            raise FormatError(f"{path}: missing header field {req}")
    rows, cols = int(header["nrows"]), int(header["ncols"])
    vals = [float(v) for parts in data_lines for v in parts]
    if len(vals) != rows * cols:
        raise FormatError(f"{path}: expected {rows * cols} cells, got {len(vals)}")
    grid = np.array(vals).reshape(rows, cols)
    nodata = header.get("nodata_value", NODATA_DEFAULT)
    mask = grid != nodata
    return grid, header, mask
