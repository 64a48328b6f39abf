"""Depth and image rasters, their file formats, tiling, and normalization.

Depth grids are plain ASCII (header of ``ncols/nrows/cellsize/nodata_value``
followed by row-major values); images are binary P6 portable pixmaps. Both
formats round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NODATA_DEFAULT = -9999.0


class RasterParseError(ValueError):
    """Malformed raster file; carries the offending line number."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class CoregistrationError(ValueError):
    """Paired rasters disagree in width, height, or ground sample distance."""


@dataclass
class DepthRaster:
    """Grid of signed depths in meters (negative below datum) with a gap mask."""

    values: np.ndarray
    gsd: float = 1.0
    nodata: float = NODATA_DEFAULT

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth grid must be 2-D, got shape {self.values.shape}")
        valid = self.values[self.values != self.nodata]
        if valid.size and valid.max() > 0:
            raise ValueError("valid depths must be <= 0 (negative below datum)")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def mask(self):
        """1 where a depth is present, 0 at nodata cells."""
        return (self.values != self.nodata).astype(np.uint8)

    def copy(self):
        return DepthRaster(self.values.copy(), self.gsd, self.nodata)


@dataclass
class RgbRaster:
    """3-channel byte image, shape (height, width, 3)."""

    pixels: np.ndarray
    gsd: float = 1.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"image must have shape (h, w, 3), got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def copy(self):
        return RgbRaster(self.pixels.copy(), self.gsd)


def check_coregistered(a, b):
    """Validate that two rasters share grid dimensions and gsd."""
    if (a.width, a.height) != (b.width, b.height):
        raise CoregistrationError(
            f"raster dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    if not np.isclose(a.gsd, b.gsd):
        raise CoregistrationError(f"ground sample distances differ: {a.gsd} vs {b.gsd}")


# -- depth grid format ----------------------------------------------------------


def write_grid(raster: DepthRaster, path):
    lines = [
        f"ncols {raster.width}",
        f"nrows {raster.height}",
        f"cellsize {_fmt(raster.gsd)}",
        f"nodata_value {_fmt(raster.nodata)}",
    ]
    for row in raster.values:
        lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(value):
    # repr of a python float is the shortest round-tripping decimal form
    return repr(float(value))


def read_grid(path) -> DepthRaster:
    with open(path) as fh:
        raw_lines = fh.read().splitlines()
    header = {}
    for lineno, key in enumerate(("ncols", "nrows", "cellsize", "nodata_value"), start=1):
        if lineno > len(raw_lines):
            raise RasterParseError(path, lineno, f"missing header line '{key}'")
        parts = raw_lines[lineno - 1].split()
        if len(parts) != 2 or parts[0] != key:
            raise RasterParseError(path, lineno, f"expected '{key} <value>', got {raw_lines[lineno - 1]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise RasterParseError(path, lineno, f"non-numeric value for {key}: {parts[1]!r}") from None
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    values = np.empty((nrows, ncols), dtype=np.float64)
    for i in range(nrows):
        lineno = 5 + i
        if lineno > len(raw_lines):
            raise RasterParseError(path, lineno, f"missing data row {i}")
        parts = raw_lines[lineno - 1].split()
        if len(parts) != ncols:
            raise RasterParseError(path, lineno, f"expected {ncols} values, got {len(parts)}")
        try:
            values[i] = [float(p) for p in parts]
        except ValueError:
            raise RasterParseError(path, lineno, "non-numeric cell value") from None
    return DepthRaster(values, gsd=header["cellsize"], nodata=header["nodata_value"])


# -- portable pixmap format ------------------------------------------------------


def write_ppm(image: RgbRaster, path):
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(image.pixels.tobytes())


def read_ppm(path, gsd=1.0) -> RgbRaster:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise RasterParseError(path, 1, "not a binary portable pixmap (missing P6 magic)")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterParseError(path, 1, "truncated header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise RasterParseError(path, 1, f"non-numeric header fields {fields}") from None
    if maxval != 255:
        raise RasterParseError(path, 2, f"only maxval 255 supported, got {maxval}")
    payload = blob[pos : pos + width * height * 3]
    if len(payload) != width * height * 3:
        raise RasterParseError(path, 3, f"truncated payload: {len(payload)} of {width * height * 3} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return RgbRaster(pixels.copy(), gsd=gsd)


# -- tiling ----------------------------------------------------------------------


@dataclass
class PatchPair:
    """Coregistered image/depth patch with its origin in the source raster."""

    image: np.ndarray  # (patch, patch, 3) uint8
    depth: np.ndarray  # (patch, patch) float64, nodata sentinel preserved
    row0: int
    col0: int


def extract_patches(image: RgbRaster, dsm: DepthRaster, patch_px, stride=None):
    """Cut coregistered patches; ``stride == patch_px`` (default) tiles without overlap."""
    check_coregistered(image, dsm)
    if stride is None:
        stride = patch_px
    if dsm.height < patch_px or dsm.width < patch_px:
        raise ValueError(f"raster {dsm.width}x{dsm.height} smaller than patch {patch_px}")
    pairs = []
    for r in range(0, dsm.height - patch_px + 1, stride):
        for c in range(0, dsm.width - patch_px + 1, stride):
            pairs.append(
                PatchPair(
                    image=image.pixels[r : r + patch_px, c : c + patch_px].copy(),
                    depth=dsm.values[r : r + patch_px, c : c + patch_px].copy(),
                    row0=r,
                    col0=c,
                )
            )
    return pairs


def assemble_depth(patches, height, width, gsd, nodata=NODATA_DEFAULT):
    """Place depth patches back at their origins (inverse of non-overlapping tiling)."""
    values = np.full((height, width), nodata, dtype=np.float64)
    for p in patches:
        values[p.row0 : p.row0 + p.depth.shape[0], p.col0 : p.col0 + p.depth.shape[1]] = p.depth
    return DepthRaster(values, gsd=gsd, nodata=nodata)


# -- normalization -----------------------------------------------------------------


@dataclass
class NormalizationSpec:
    """Scale factors mapping bytes and depths into [0, 1] training units."""

    rgb_divisor: float = 255.0
    depth_divisor: float = -15.0

    def __post_init__(self):
        if self.depth_divisor >= 0:
            raise ValueError("depth_divisor must be negative so depths map into [0, 1]")


def normalize_image(pixels, spec: NormalizationSpec):
    return np.asarray(pixels, dtype=np.float64) / spec.rgb_divisor


def normalize_depth(values, spec: NormalizationSpec, nodata=NODATA_DEFAULT):
    values = np.asarray(values, dtype=np.float64)
    out = values / spec.depth_divisor
    return np.where(values == nodata, nodata, out)


def denormalize_depth(values, spec: NormalizationSpec, nodata=NODATA_DEFAULT):
    values = np.asarray(values, dtype=np.float64)
    out = values * spec.depth_divisor
    return np.where(values == nodata, nodata, out)
