"""Raster arithmetic for density maps, priors and image planes.

A grid is a 2-D ``float32`` numpy array of shape ``(height, width)``.
Pixel ``(u, v)`` lives at ``grid[v, u]``: ``u`` runs along the width and
``v`` along the height. Every operation returns a new array.

Sums are computed exactly (float32 inputs are accumulated as integers and
rounded once), so the counts of any tiling add up to the whole-map count.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BoundsError, FormatError, ParameterError

C2DG_MAGIC = b"C2DG"
C2DG_VERSION = 1

# float32 subnormal unit is 2**-149; every float32 is an integer multiple of it
_F32_SCALE = 1 << 149


def as_grid(values, name: str = "map") -> np.ndarray:
    """Validate ``values`` as a grid and return it as a C-contiguous float32 array."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ParameterError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle; ``(u0, v0)`` is the inclusive top-left corner."""

    u0: int
    v0: int
    width: int
    height: int

    def check_inside(self, shape: tuple[int, int]) -> None:
        h, w = shape
        if (
            self.width < 1
            or self.height < 1
            or self.u0 < 0
            or self.v0 < 0
            or self.u0 + self.width > w
            or self.v0 + self.height > h
        ):
            raise BoundsError(f"{self} does not fit inside a {w}x{h} grid")

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.v0, self.v0 + self.height), slice(self.u0, self.u0 + self.width))


def exact_mass(values: np.ndarray) -> int:
    """Exact sum of float32 ``values`` in units of 2**-149, as a Python int."""
    bits = np.ascontiguousarray(values, dtype=np.float32).ravel().view(np.uint32)
    if bits.size == 0:
        return 0
    exponent = ((bits >> 23) & 0xFF).astype(np.int64)
    mantissa = (bits & 0x7FFFFF).astype(np.int64)
    mantissa = np.where(exponent > 0, mantissa | (1 << 23), mantissa)
    mantissa = np.where(bits >> 31, -mantissa, mantissa)
    shift = np.maximum(exponent, 1) - 1
    order = np.argsort(shift, kind="stable")
    shift = shift[order]
    mantissa = mantissa[order]
    starts = np.flatnonzero(np.r_[True, shift[1:] != shift[:-1]])
    # at most 2**24 * n per bucket: int64 is safe for any realistic grid
    partial = np.add.reduceat(mantissa, starts)
    return sum(int(p) << int(s) for p, s in zip(partial, shift[starts]))


def _mass_to_float(mass: int) -> float:
    return mass / _F32_SCALE


def integrate(grid) -> float:
    """Total mass of a grid (predicted count when the grid is a density map)."""
    return _mass_to_float(exact_mass(as_grid(grid)))


def subregion_count(grid, region: Rect) -> float:
    """Mass inside ``region``."""
    arr = as_grid(grid)
    region.check_inside(arr.shape)
    return _mass_to_float(exact_mass(arr[region.slices]))


def total_over(grid, regions) -> float:
    """Mass of a set of disjoint regions, summed exactly before rounding once.

    For any tiling of the grid this is bit-identical to :func:`integrate`,
    whereas adding the rounded per-region floats may differ in the last ulp.
    """
    arr = as_grid(grid)
    masses = []
    for r in regions:
        r.check_inside(arr.shape)
        masses.append(exact_mass(arr[r.slices]))
    return _mass_to_float(sum(masses))


def tile_rects(shape: tuple[int, int], tile: int) -> list[Rect]:
    """Row-major tiling of ``shape`` by ``tile``-sized squares; edge tiles are clipped."""
    if tile < 1:
        raise ParameterError(f"tile must be >= 1, got {tile}")
    h, w = shape
    return [
        Rect(u0, v0, min(tile, w - u0), min(tile, h - v0))
        for v0 in range(0, h, tile)
        for u0 in range(0, w, tile)
    ]


def normalize_max(grid) -> np.ndarray:
    """Divide by the maximum so the peak is 1. An all-zero map stays all-zero."""
    arr = as_grid(grid)
    peak = float(arr.max())
    if peak <= 0.0:
        return np.zeros_like(arr)
    out = (arr.astype(np.float64) / peak).astype(np.float32)
    out[arr == arr.max()] = 1.0
    return out


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian of radius ceil(3*sigma), normalized to sum 1 (float64)."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(grid, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with reflected borders."""
    arr = as_grid(grid)
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(arr.astype(np.float64), k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return out.astype(np.float32)


def threshold_binarize(grid, t: float) -> np.ndarray:
    """1 where the value is strictly greater than ``t``, else 0.

    ``t`` is rounded to float32 first, so a cell holding the stored value of
    ``t`` compares equal and maps to 0.
    """
    arr = as_grid(grid)
    return (arr > np.float32(t)).astype(np.float32)


# --------------------------------------------------------------------------
# file formats


def save_c2dg(path, grid) -> None:
    arr = as_grid(grid)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(C2DG_MAGIC)
        fh.write(struct.pack("<3I", C2DG_VERSION, h, w))
        fh.write(arr.astype("<f4").tobytes())


def load_c2dg(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: header truncated ({len(data)} bytes)")
    if data[:4] != C2DG_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {C2DG_MAGIC!r}")
    version, h, w = struct.unpack("<3I", data[4:16])
    if version != C2DG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if h < 1 or w < 1:
        raise FormatError(f"{path}: bad shape height={h} width={w}")
    payload = data[16:]
    if len(payload) != 4 * h * w:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, height*width*4 = {4 * h * w}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return arr


def save_pgm(path, grid) -> None:
    """Write a 16-bit binary PGM, linearly rescaled so the map max maps to 65535."""
    arr = as_grid(grid).astype(np.float64)
    peak = arr.max()
    if peak > 0:
        scaled = np.clip(np.rint(arr / peak * 65535.0), 0, 65535)
    else:
        scaled = np.zeros_like(arr)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(scaled.astype(">u2").tobytes())


def _pgm_header(data: bytes, path) -> tuple[str, int, int, int, int]:
    """Parse magic, width, height, maxval; returns them plus the payload offset."""
    tokens: list[str] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{path}: header truncated after {len(tokens)} fields")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii", errors="replace"))
    magic = tokens[0]
    if magic not in ("P2", "P5"):
        raise FormatError(f"{path}: bad magic {magic!r}, expected P2 or P5")
    names = ("width", "height", "maxval")
    values = []
    for name, tok in zip(names, tokens[1:]):
        if not tok.isdigit() or int(tok) < 1:
            raise FormatError(f"{path}: bad {name} {tok!r}")
        values.append(int(tok))
    if values[2] > 65535:
        raise FormatError(f"{path}: bad maxval {values[2]}")
    # exactly one whitespace byte separates the header from a binary raster
    return magic, values[0], values[1], values[2], pos + 1


def load_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit PGM (P2 or P5); returns raw sample values as float32."""
    data = Path(path).read_bytes()
    magic, w, h, maxval, offset = _pgm_header(data, path)
    n = w * h
    if magic == "P5":
        dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
        payload = data[offset:]
        if len(payload) < n * dtype.itemsize:
            raise FormatError(
                f"{path}: payload truncated ({len(payload)} of {n * dtype.itemsize} bytes)"
            )
        arr = np.frombuffer(payload[: n * dtype.itemsize], dtype=dtype)
    else:
        tokens = data[offset - 1 :].split()
        if len(tokens) < n:
            raise FormatError(f"{path}: payload truncated ({len(tokens)} of {n} samples)")
        try:
            arr = np.array([int(t) for t in tokens[:n]], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"{path}: non-integer sample in payload") from exc
    if arr.max(initial=0) > maxval:
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    return arr.reshape(h, w).astype(np.float32)


def load_grid(path) -> np.ndarray:
    """Load a ``.c2dg`` or PGM file, dispatching on the leading magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == C2DG_MAGIC:
        return load_c2dg(path)
    if head[:2] in (b"P2", b"P5"):
        return load_pgm(path)
    raise FormatError(f"{path}: bad magic {head!r}, expected C2DG, P2 or P5")
