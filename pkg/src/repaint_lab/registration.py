"""Non-rigid 2-D registration by cubic B-spline free-form deformation.

A deformation is a lattice of control displacements with spacing delta
(pixels); the dense displacement at pixel x is the cubic B-spline tensor
interpolation of the 4x4 surrounding controls. Conventions: coordinates
are (row, col), zero-based; control a per axis sits at (a-1)*delta, so
i = floor(x/delta) selects support {i..i+3} with fraction u = x/delta - i,
and covering an image dimension needs floor((dim-1)/delta) + 4 controls.

Registration minimizes the sum of squared differences
SSD = sum_x (reference(x) - moving(x + u(x)))^2 by steepest descent on the
control displacements with a backtracking line search, optionally plus
control-lattice bending-energy and linear-elasticity penalties (weights
default to 0). Image sampling is bilinear with edge clamping.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import BinaryMask, HeaderError, Image, PayloadError

__all__ = [
    "FIELD_MAGIC",
    "BSplineField",
    "LogJacMap",
    "RegParams",
    "RegResult",
    "control_grid_shape",
    "dense_displacement",
    "warp",
    "log_jacobian",
    "ssd_and_gradient",
    "register",
    "write_field",
    "read_field",
]

FIELD_MAGIC = b"BSPF"
_FIELD_HEADER = struct.Struct("<4sf2I")


def _basis(u: np.ndarray) -> np.ndarray:
    """Cubic B-spline weights B0..B3 at fraction u in [0, 1); shape (..., 4)."""
    v = 1.0 - u
    return np.stack(
        [
            v * v * v / 6.0,
            (3.0 * u ** 3 - 6.0 * u ** 2 + 4.0) / 6.0,
            (-3.0 * u ** 3 + 3.0 * u ** 2 + 3.0 * u + 1.0) / 6.0,
            u ** 3 / 6.0,
        ],
        axis=-1,
    )


def _dbasis(u: np.ndarray) -> np.ndarray:
    """Derivatives dB/du of the four cubic B-spline weights."""
    v = 1.0 - u
    return np.stack(
        [
            -v * v / 2.0,
            (3.0 * u ** 2 - 4.0 * u) / 2.0,
            (-3.0 * u ** 2 + 2.0 * u + 1.0) / 2.0,
            u * u / 2.0,
        ],
        axis=-1,
    )


def control_grid_shape(size, spacing: float):
    """(n_rows, n_cols) of the smallest control grid covering an image of
    the given (height, width)."""
    h, w = size
    if h < 1 or w < 1:
        raise ValueError(f"image size must be positive, got {size}")
    if not (spacing > 0 and math.isfinite(spacing)):
        raise ValueError(f"spacing must be positive and finite, got {spacing}")
    return (int((h - 1) // spacing) + 4, int((w - 1) // spacing) + 4)


@dataclass(frozen=True)
class BSplineField:
    """coeffs has shape (n_rows, n_cols, 2): [..., 0] is the row
    displacement, [..., 1] the column displacement, in pixels."""

    spacing: float
    coeffs: np.ndarray

    def __post_init__(self):
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")
        arr = np.array(self.coeffs, dtype=np.float64, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"coeffs must have shape (rows, cols, 2), got {arr.shape}")
        if arr.shape[0] < 4 or arr.shape[1] < 4:
            raise ValueError(f"control grid needs at least 4x4 points, got {arr.shape[:2]}")
        if not np.isfinite(arr).all():
            raise ValueError("control displacements must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "coeffs", arr)
        object.__setattr__(self, "spacing", float(self.spacing))

    @classmethod
    def zeros(cls, size, spacing: float) -> "BSplineField":
        nr, nc = control_grid_shape(size, spacing)
        return cls(spacing=spacing, coeffs=np.zeros((nr, nc, 2)))


def _axis_support(length: int, spacing: float, n_ctrl: int):
    """Per-pixel support start index, basis weights, and d/dpixel weights
    along one axis; rejects grids that do not cover the image."""
    x = np.arange(length, dtype=np.float64) / spacing
    i = np.floor(x).astype(np.int64)
    u = x - i
    if int(i.max()) + 3 > n_ctrl - 1:
        raise ValueError(
            f"control grid with {n_ctrl} points does not cover length {length} "
            f"at spacing {spacing}"
        )
    return i, _basis(u), _dbasis(u) / spacing


def _tensor_apply(channel, ri, ci, rw, cw):
    """16-tap tensor-product gather of one control channel to pixels."""
    out = np.zeros((ri.shape[0], ci.shape[0]))
    for l in range(4):
        rows = channel[ri + l]
        for m in range(4):
            out += rw[:, l:l + 1] * cw[None, :, m] * rows[:, ci + m]
    return out


def dense_displacement(field: BSplineField, size) -> np.ndarray:
    """(height, width, 2) per-pixel displacements, pixels."""
    h, w = size
    nr, nc, _ = field.coeffs.shape
    ri, rw, _ = _axis_support(h, field.spacing, nr)
    ci, cw, _ = _axis_support(w, field.spacing, nc)
    disp = np.zeros((h, w, 2))
    disp[:, :, 0] = _tensor_apply(field.coeffs[:, :, 0], ri, ci, rw, cw)
    disp[:, :, 1] = _tensor_apply(field.coeffs[:, :, 1], ri, ci, rw, cw)
    return disp


def _sample_bilinear(arr: np.ndarray, ry: np.ndarray, rx: np.ndarray):
    """Bilinear values and their derivatives w.r.t. the sample coordinates.
    Coordinates are clamped to the image; a clamped coordinate has zero
    derivative (moving further out does not change the value)."""
    h, w = arr.shape
    ryc = np.clip(ry, 0.0, h - 1.0)
    rxc = np.clip(rx, 0.0, w - 1.0)
    r0 = np.minimum(ryc.astype(np.int64), h - 2)
    c0 = np.minimum(rxc.astype(np.int64), w - 2)
    fr = ryc - r0
    fc = rxc - c0
    a = arr[r0, c0]
    b = arr[r0, c0 + 1]
    c = arr[r0 + 1, c0]
    d = arr[r0 + 1, c0 + 1]
    val = (1 - fr) * (1 - fc) * a + (1 - fr) * fc * b + fr * (1 - fc) * c + fr * fc * d
    gy = (1 - fc) * (c - a) + fc * (d - b)
    gx = (1 - fr) * (b - a) + fr * (d - c)
    gy = np.where((ry > 0.0) & (ry < h - 1.0), gy, 0.0)
    gx = np.where((rx > 0.0) & (rx < w - 1.0), gx, 0.0)
    return val, gy, gx


def warp(img: Image, field: BSplineField) -> Image:
    """out(x) = img(x + u(x)), bilinear, edge-clamped."""
    h, w = img.shape
    disp = dense_displacement(field, img.shape)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    val, _, _ = _sample_bilinear(img.data, rows + disp[:, :, 0], cols + disp[:, :, 1])
    return Image(val)


@dataclass(frozen=True)
class LogJacMap:
    """Per-pixel log det(I + grad u). Pixels where the determinant is <= 0
    (folding) carry value 0.0 and a set folding flag; statistics must skip
    them."""

    values: Image
    folding: BinaryMask

    @property
    def fold_count(self) -> int:
        return self.folding.count


def log_jacobian(field: BSplineField, size) -> LogJacMap:
    h, w = size
    nr, nc, _ = field.coeffs.shape
    ri, rw, drw = _axis_support(h, field.spacing, nr)
    ci, cw, dcw = _axis_support(w, field.spacing, nc)
    cy = field.coeffs[:, :, 0]
    cx = field.coeffs[:, :, 1]
    duy_dy = _tensor_apply(cy, ri, ci, drw, cw)
    duy_dx = _tensor_apply(cy, ri, ci, rw, dcw)
    dux_dy = _tensor_apply(cx, ri, ci, drw, cw)
    dux_dx = _tensor_apply(cx, ri, ci, rw, dcw)
    det = (1.0 + duy_dy) * (1.0 + dux_dx) - duy_dx * dux_dy
    fold = det <= 0.0
    values = np.where(fold, 0.0, np.log(np.where(fold, 1.0, det)))
    return LogJacMap(values=Image(values), folding=BinaryMask.from_bool(fold))


@dataclass(frozen=True)
class RegParams:
    spacing: float = 2.5
    max_iterations: int = 200
    step_init: float = 0.5
    tolerance: float = 1e-6
    bending_weight: float = 0.0
    elasticity_weight: float = 0.0
    levels: int = 1

    def __post_init__(self):
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not (self.step_init > 0 and math.isfinite(self.step_init)):
            raise ValueError(f"step_init must be positive, got {self.step_init}")
        if self.tolerance < 0:
            raise ValueError(f"tolerance must be >= 0, got {self.tolerance}")
        if self.bending_weight < 0 or self.elasticity_weight < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")


def _bending(c: np.ndarray):
    """Discrete bending energy of one control channel and its gradient."""
    cost = 0.0
    g = np.zeros_like(c)
    d = c[2:] - 2.0 * c[1:-1] + c[:-2]
    cost += float((d * d).sum())
    g[2:] += 2.0 * d
    g[1:-1] += -4.0 * d
    g[:-2] += 2.0 * d
    d = c[:, 2:] - 2.0 * c[:, 1:-1] + c[:, :-2]
    cost += float((d * d).sum())
    g[:, 2:] += 2.0 * d
    g[:, 1:-1] += -4.0 * d
    g[:, :-2] += 2.0 * d
    d = c[1:, 1:] - c[1:, :-1] - c[:-1, 1:] + c[:-1, :-1]
    cost += 2.0 * float((d * d).sum())
    g[1:, 1:] += 4.0 * d
    g[1:, :-1] += -4.0 * d
    g[:-1, 1:] += -4.0 * d
    g[:-1, :-1] += 4.0 * d
    return cost, g


def _elasticity(c: np.ndarray):
    """Discrete first-difference (membrane) energy and gradient."""
    cost = 0.0
    g = np.zeros_like(c)
    d = c[1:] - c[:-1]
    cost += float((d * d).sum())
    g[1:] += 2.0 * d
    g[:-1] += -2.0 * d
    d = c[:, 1:] - c[:, :-1]
    cost += float((d * d).sum())
    g[:, 1:] += 2.0 * d
    g[:, :-1] += -2.0 * d
    return cost, g


def ssd_and_gradient(reference: Image, moving: Image, field: BSplineField,
                     bending_weight: float = 0.0, elasticity_weight: float = 0.0):
    """Registration cost and its exact gradient w.r.t. the control
    displacements. Cost = SSD(reference, moving warped by field) plus the
    weighted control-lattice penalties."""
    if reference.shape != moving.shape:
        raise ValueError(
            f"shape mismatch: reference {reference.shape}, moving {moving.shape}"
        )
    h, w = reference.shape
    nr, nc, _ = field.coeffs.shape
    ri, rw, _ = _axis_support(h, field.spacing, nr)
    ci, cw, _ = _axis_support(w, field.spacing, nc)
    uy = _tensor_apply(field.coeffs[:, :, 0], ri, ci, rw, cw)
    ux = _tensor_apply(field.coeffs[:, :, 1], ri, ci, rw, cw)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    val, gy, gx = _sample_bilinear(moving.data, rows + uy, cols + ux)
    resid = val - reference.data
    cost = float((resid * resid).sum())
    py = 2.0 * resid * gy
    px = 2.0 * resid * gx
    grad = np.zeros((nr, nc, 2))
    gy_flat = np.zeros(nr * nc)
    gx_flat = np.zeros(nr * nc)
    for l in range(4):
        for m in range(4):
            wlm = rw[:, l:l + 1] * cw[None, :, m]
            idx = ((ri[:, None] + l) * nc + (ci[None, :] + m)).ravel()
            np.add.at(gy_flat, idx, (py * wlm).ravel())
            np.add.at(gx_flat, idx, (px * wlm).ravel())
    grad[:, :, 0] = gy_flat.reshape(nr, nc)
    grad[:, :, 1] = gx_flat.reshape(nr, nc)
    for weight, penalty in ((bending_weight, _bending), (elasticity_weight, _elasticity)):
        if weight > 0.0:
            for ch in (0, 1):
                pcost, pgrad = penalty(field.coeffs[:, :, ch])
                cost += weight * pcost
                grad[:, :, ch] += weight * pgrad
    return cost, grad


@dataclass(frozen=True)
class RegResult:
    field: BSplineField
    initial_ssd: float
    final_ssd: float
    trace: tuple
    iterations: int


def register(reference: Image, moving: Image, params: RegParams = RegParams()) -> RegResult:
    """Steepest descent with backtracking (halve the step until the cost
    drops, at most 20 halvings); the step is measured as the largest control
    move in pixels and doubles after each accepted iteration, capped at 2 px.
    Stops on the relative-decrease tolerance, a failed line search, or the
    iteration cap. Accepted costs are strictly decreasing by construction.
    """
    if reference.shape != moving.shape:
        raise ValueError(
            f"shape mismatch: reference {reference.shape}, moving {moving.shape}"
        )
    if params.levels > 1:
        raise NotImplementedError("multi-resolution pyramids are not supported")
    spacing = params.spacing
    coeffs = BSplineField.zeros(reference.shape, spacing).coeffs.copy()
    cost, grad = ssd_and_gradient(
        reference, moving, BSplineField(spacing, coeffs),
        params.bending_weight, params.elasticity_weight,
    )
    if not math.isfinite(cost):
        raise RuntimeError(f"registration cost is non-finite at the identity: {cost!r}")
    trace = [cost]
    step_px = params.step_init
    for _ in range(params.max_iterations):
        gmax = float(np.abs(grad).max())
        if gmax == 0.0:
            break
        accepted = False
        for _ in range(21):
            cand = coeffs - (step_px / gmax) * grad
            cand_cost, cand_grad = ssd_and_gradient(
                reference, moving, BSplineField(spacing, cand),
                params.bending_weight, params.elasticity_weight,
            )
            if math.isfinite(cand_cost) and cand_cost < cost:
                accepted = True
                break
            step_px /= 2.0
        if not accepted:
            break
        dropped = cost - cand_cost
        coeffs, cost, grad = cand, cand_cost, cand_grad
        trace.append(cost)
        step_px = min(step_px * 2.0, 2.0)
        if dropped <= params.tolerance * max(trace[0], 1e-300):
            break
    return RegResult(
        field=BSplineField(spacing, coeffs),
        initial_ssd=trace[0],
        final_ssd=cost,
        trace=tuple(trace),
        iterations=len(trace) - 1,
    )


def write_field(field: BSplineField, path) -> None:
    """BSPF container: magic, float32 spacing, uint32 grid dims, float32
    little-endian (row, col) displacement pairs in row-major order."""
    nr, nc, _ = field.coeffs.shape
    header = _FIELD_HEADER.pack(FIELD_MAGIC, field.spacing, nr, nc)
    Path(path).write_bytes(header + field.coeffs.astype("<f4").tobytes())


def read_field(path) -> BSplineField:
    data = Path(path).read_bytes()
    if len(data) < _FIELD_HEADER.size:
        raise HeaderError(f"{path}: truncated field header")
    magic, spacing, nr, nc = _FIELD_HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}, expected {FIELD_MAGIC!r}")
    payload = data[_FIELD_HEADER.size:]
    expected = nr * nc * 2 * 4
    if len(payload) != expected:
        raise PayloadError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected}"
        )
    coeffs = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(nr, nc, 2)
    return BSplineField(spacing=float(spacing), coeffs=coeffs)
