"""Pixel grids, binary masks, and their file formats.

Images are 2-D float64 arrays (height, width), row-major, finite unless a
log-Jacobian map explicitly opts out. Masks hold exact 0.0/1.0 values so that
mask algebra (products, complements) is bit-exact.

Native grid format (".f32grid"):

    bytes 0-3   magic b"F32G"
    bytes 4-7   width,  uint32 little-endian
    bytes 8-11  height, uint32 little-endian
    bytes 12-   width*height float32 little-endian, row-major, top-left origin

Masks use the same container with payload values restricted to 0.0/1.0.

PGM export writes binary "P5" with maxval 65535 (16-bit big-endian samples per
the Netpbm convention), intensities linearly rescaled from [min, max]; a
constant image exports as all zeros.
"""

from __future__ import annotations

import struct
import warnings

import numpy as np

__all__ = [
    "Image",
    "BinaryMask",
    "StructureAtlas",
    "GridFileError",
    "HeaderError",
    "PayloadError",
    "DimensionError",
    "DegenerateReferenceWarning",
    "mask_and",
    "mask_complement",
    "apply_mask",
    "mirror_mask",
    "histogram_match",
    "read_image",
    "write_image",
    "read_mask",
    "write_mask",
    "write_pgm",
]

GRID_MAGIC = b"F32G"
_HEADER = struct.Struct("<4sII")

# Desk-scale sanity caps; a header announcing more than this is rejected
# rather than trusted with a huge allocation.
MAX_DIM = 1 << 20
MAX_PIXELS = 1 << 26


class GridFileError(Exception):
    """Base class for malformed .f32grid files."""


class HeaderError(GridFileError):
    """Missing or wrong magic, or a header too short to parse."""


class PayloadError(GridFileError):
    """Payload byte count does not match the header dimensions."""


class DimensionError(GridFileError):
    """Header dimensions are zero or exceed the supported size."""


class DegenerateReferenceWarning(UserWarning):
    """Histogram matching against a constant reference image."""


class Image:
    """Immutable 2-D intensity grid.

    Values are float64 and finite; pass allow_nonfinite=True only for
    log-Jacobian maps whose folding pixels are flagged elsewhere.
    """

    __slots__ = ("_data",)

    def __init__(self, data, *, allow_nonfinite: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"image data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dimensions must be positive, got {arr.shape}")
        if not allow_nonfinite and not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    def __repr__(self):
        return f"Image({self.width}x{self.height})"


class BinaryMask:
    """Immutable mask over a grid; values are exactly 0.0 or 1.0."""

    __slots__ = ("_bits",)

    def __init__(self, bits):
        arr = np.array(bits, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"mask data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask dimensions must be positive, got {arr.shape}")
        if not ((arr == 0.0) | (arr == 1.0)).all():
            raise ValueError("mask values must be exactly 0.0 or 1.0")
        arr.setflags(write=False)
        self._bits = arr

    @classmethod
    def from_bool(cls, flags) -> "BinaryMask":
        return cls(np.asarray(flags, dtype=bool).astype(np.float64))

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def bool_array(self) -> np.ndarray:
        return self._bits.astype(bool)

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._bits.shape

    @property
    def count(self) -> int:
        """Number of set pixels."""
        return int(self._bits.sum())

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, set={self.count})"


class StructureAtlas:
    """Maps (structure name, side) to its segmentation mask.

    Sides are the literal strings "left" and "right". All masks share one
    grid; the two sides of a structure must be disjoint.
    """

    SIDES = ("left", "right")

    def __init__(self, masks: dict[tuple[str, str], BinaryMask]):
        if not masks:
            raise ValueError("atlas needs at least one mask")
        shape = None
        for (name, side), mask in masks.items():
            if side not in self.SIDES:
                raise ValueError(f"unknown side {side!r} for structure {name!r}")
            if shape is None:
                shape = mask.shape
            elif mask.shape != shape:
                raise ValueError(
                    f"mask for ({name!r}, {side!r}) has shape {mask.shape}, expected {shape}"
                )
        for name in {n for n, _ in masks}:
            left = masks.get((name, "left"))
            right = masks.get((name, "right"))
            if left is not None and right is not None:
                if (left.bits * right.bits).any():
                    raise ValueError(f"left/right masks overlap for structure {name!r}")
        self._masks = dict(masks)
        self._shape = shape

    @property
    def shape(self) -> tuple[int, int]:
        return self._shape

    @property
    def structures(self) -> tuple[str, ...]:
        return tuple(sorted({n for n, _ in self._masks}))

    def get(self, structure: str, side: str) -> BinaryMask:
        try:
            return self._masks[(structure, side)]
        except KeyError:
            raise KeyError(f"atlas has no mask for ({structure!r}, {side!r})") from None

    def __contains__(self, key) -> bool:
        return key in self._masks

    def items(self):
        return sorted(self._masks.items())


def _check_same_shape(a, b, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def mask_and(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _check_same_shape(a, b, "mask_and")
    return BinaryMask(a.bits * b.bits)


def mask_complement(m: BinaryMask) -> BinaryMask:
    return BinaryMask(1.0 - m.bits)


def apply_mask(img: Image, m: BinaryMask) -> Image:
    """Pointwise product: zeroes the pixels where the mask is 0."""
    _check_same_shape(img, m, "apply_mask")
    return Image(img.data * m.bits)


def mirror_mask(m: BinaryMask) -> BinaryMask:
    """Reflect across the vertical midline (column x -> width-1-x).

    The grid width must be even so the midline falls between columns and
    the reflection is an involution on pixel centers.
    """
    if m.width % 2 != 0:
        raise ValueError(f"mirror_mask requires an even width, got {m.width}")
    return BinaryMask(m.bits[:, ::-1])


def _edge_cdf(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Cumulative fraction of values below each bin edge (0 at the first)."""
    counts, _ = np.histogram(values, bins=edges)
    cdf = np.concatenate([[0.0], np.cumsum(counts)]) / values.size
    return cdf


def histogram_match(source: Image, reference: Image, nbins: int = 256) -> Image:
    """Remap source intensities so their distribution matches the reference.

    Uses equal-width histograms over the union of both value ranges and
    linear interpolation of the inverse reference CDF. Output values are
    clipped to the reference range. A constant reference cannot define a
    quantile map; the output is then constant at that value and a
    DegenerateReferenceWarning is issued.

    The sup distance between the output's CDF and the reference CDF is
    bounded by the per-bin linearization error, about 1/nbins when the
    shared binning resolves the reference; accuracy degrades when one
    image's value range is much narrower than the union of the two.
    """
    if nbins < 2:
        raise ValueError(f"nbins must be >= 2, got {nbins}")
    src = source.data
    ref = reference.data
    ref_lo = float(ref.min())
    ref_hi = float(ref.max())
    if ref_lo == ref_hi:
        warnings.warn(
            "histogram_match: constant reference image; returning a constant output",
            DegenerateReferenceWarning,
            stacklevel=2,
        )
        return Image(np.full(src.shape, ref_lo))

    lo = min(float(src.min()), ref_lo)
    hi = max(float(src.max()), ref_hi)
    if lo == hi:
        # Constant source inside a non-constant reference range cannot happen
        # (the union range spans the reference), so lo == hi is unreachable
        # here; guard anyway for clarity.
        return Image(np.full(src.shape, ref_lo))
    edges = np.linspace(lo, hi, nbins + 1)

    src_cdf = _edge_cdf(src.ravel(), edges)
    ref_cdf = _edge_cdf(ref.ravel(), edges)

    ranks = np.interp(src.ravel(), edges, src_cdf)

    # Invert the reference CDF. np.interp tolerates the plateau duplicates
    # from empty bins: a rank strictly inside a rising segment interpolates
    # within that bin, a rank exactly on a plateau snaps to the plateau's
    # upper edge.
    out = np.interp(ranks, ref_cdf, edges)
    out = np.clip(out, ref_lo, ref_hi)
    return Image(out.reshape(src.shape))


def _validate_dims(width: int, height: int):
    if width == 0 or height == 0:
        raise DimensionError(f"zero dimension in header: {width}x{height}")
    if width > MAX_DIM or height > MAX_DIM or width * height > MAX_PIXELS:
        raise DimensionError(f"unsupported grid size {width}x{height}")


def write_image(img: Image, path) -> None:
    payload = np.ascontiguousarray(img.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GRID_MAGIC, img.width, img.height))
        fh.write(payload)


def read_image(path, *, allow_nonfinite: bool = False) -> Image:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise HeaderError(f"{path}: file shorter than the 12-byte header")
    magic, width, height = _HEADER.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    _validate_dims(width, height)
    expected = width * height * 4
    got = len(blob) - _HEADER.size
    if got < expected:
        raise PayloadError(f"{path}: payload truncated ({got} bytes, expected {expected})")
    if got > expected:
        raise PayloadError(f"{path}: {got - expected} unexpected trailing bytes")
    pixels = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    data = pixels.reshape(height, width).astype(np.float64)
    return Image(data, allow_nonfinite=allow_nonfinite)


def write_mask(mask: BinaryMask, path) -> None:
    write_image(Image(mask.bits), path)


def read_mask(path) -> BinaryMask:
    img = read_image(path)
    bits = img.data
    if not ((bits == 0.0) | (bits == 1.0)).all():
        raise ValueError(f"{path}: mask file contains non-binary values")
    return BinaryMask(bits)


def write_pgm(img: Image, path) -> None:
    """Export for quick viewing; 16-bit binary PGM, linearly rescaled."""
    data = img.data
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        samples = np.zeros(data.shape, dtype=">u2")
    else:
        scaled = np.rint((data - lo) / (hi - lo) * 65535.0)
        samples = scaled.astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n65535\n".encode("ascii"))
        fh.write(samples.tobytes())
