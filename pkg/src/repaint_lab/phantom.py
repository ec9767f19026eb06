"""Bilateral phantom generator with exactly known joint statistics.

A phantom is a flat background plus mirrored ellipse pairs. Each pair's
(left, right) interior intensities are one draw from a bivariate normal
with per-side mean/std and correlation rho, so the conditional law of one
side given the other is closed-form and every symmetry measurement made on
these images has an exact target.

Spec file format (parse_phantom_spec):

    [phantom]
    width = 32          ; even
    height = 32
    background = 0.1
    smoothing = 0.0     ; Gaussian kernel std in px, 0 disables, max 1.5

    [structure:thalamus]
    center = 8, 8       ; row, col of the LEFT ellipse center
    axes = 3.0, 3.4     ; semi-axes (row, col) in px
    mu = 0.6            ; or mu_left / mu_right
    sigma = 0.1         ; or sigma_left / sigma_right
    rho = 0.9

The right ellipse is always the mirror of the left across the vertical
midline; structures must be pairwise disjoint (checked eagerly).
"""

from __future__ import annotations

import configparser
import math
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .diffusion import GmmDataModel
from .grid import BinaryMask, Image, StructureAtlas, mirror_mask

__all__ = [
    "StructureSpec",
    "PhantomSpec",
    "PhantomSample",
    "PhantomSpecError",
    "VacuousConditioningWarning",
    "ellipse_mask",
    "build_atlas",
    "generate",
    "conditional_oracle",
    "gmm_from_spec",
    "parse_phantom_spec",
]

_NORMAL = NormalDist()


class PhantomSpecError(ValueError):
    """Raised for unreadable or invalid phantom spec files."""


class VacuousConditioningWarning(UserWarning):
    """Conditioning on a zero-variance side carries no information."""


def ellipse_mask(height, width, center, axes) -> BinaryMask:
    """Interior of ((row-cy)/ay)^2 + ((col-cx)/ax)^2 <= 1 on pixel centers."""
    cy, cx = center
    ay, ax = axes
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    inside = ((rows - cy) / ay) ** 2 + ((cols - cx) / ax) ** 2 <= 1.0
    return BinaryMask.from_bool(inside)


@dataclass(frozen=True)
class StructureSpec:
    """One mirrored ellipse pair. center/axes describe the left ellipse in
    (row, col) order; the right one is its mirror image."""

    name: str
    center: tuple
    axes: tuple
    mu_left: float = 0.6
    mu_right: float = 0.6
    sigma_left: float = 0.1
    sigma_right: float = 0.1
    rho: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise ValueError("structure needs a nonempty name")
        cy, cx = self.center
        ay, ax = self.axes
        vals = (cy, cx, ay, ax, self.mu_left, self.mu_right,
                self.sigma_left, self.sigma_right, self.rho)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"structure {self.name!r} has non-finite parameters")
        if ay <= 0 or ax <= 0:
            raise ValueError(f"structure {self.name!r}: axes must be > 0, got {self.axes}")
        if self.sigma_left < 0 or self.sigma_right < 0:
            raise ValueError(f"structure {self.name!r}: sigma must be >= 0")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"structure {self.name!r}: rho must lie in [-1, 1], got {self.rho}")


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 32
    height: int = 32
    structures: tuple = ()
    background: float = 0.1
    smoothing: float = 0.0

    def __post_init__(self):
        if self.width < 2 or self.width % 2 != 0:
            raise ValueError(f"width must be even and >= 2, got {self.width}")
        if self.height < 1:
            raise ValueError(f"height must be >= 1, got {self.height}")
        if not math.isfinite(self.background):
            raise ValueError("background must be finite")
        if not 0.0 <= self.smoothing <= 1.5:
            raise ValueError(f"smoothing must lie in [0, 1.5], got {self.smoothing}")
        names = [s.name for s in self.structures]
        if len(set(names)) != len(names):
            raise ValueError("structure names must be unique")
        object.__setattr__(self, "structures", tuple(self.structures))
        # eager disjointness check over every rendered mask, both sides
        masks = _structure_masks(self)
        keys = sorted(masks)
        for i, ka in enumerate(keys):
            for kb in keys[i + 1:]:
                if (masks[ka].bits * masks[kb].bits).any():
                    raise ValueError(f"structures overlap: {ka} and {kb}")


@dataclass(frozen=True)
class PhantomSample:
    """Rendered phantom plus its exact atlas and the latent intensities
    actually drawn: latents[name] == (left value, right value). Without
    smoothing the rendered interiors equal the latents exactly."""

    image: Image
    atlas: StructureAtlas
    latents: dict


def _structure_masks(spec: PhantomSpec) -> dict:
    masks = {}
    for s in spec.structures:
        left = ellipse_mask(spec.height, spec.width, s.center, s.axes)
        masks[(s.name, "left")] = left
        masks[(s.name, "right")] = mirror_mask(left)
    return masks


def build_atlas(spec: PhantomSpec) -> StructureAtlas:
    return StructureAtlas(_structure_masks(spec))


def _smooth(arr: np.ndarray, width: float) -> np.ndarray:
    """Separable truncated Gaussian blur, std=width px, edge-replicated."""
    radius = max(1, math.ceil(2.0 * width))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / width) ** 2)
    kernel /= kernel.sum()
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(arr, pad, mode="edge")
        out = np.zeros_like(arr)
        for i, w in enumerate(kernel):
            if axis == 0:
                out += w * padded[i:i + arr.shape[0], :]
            else:
                out += w * padded[:, i:i + arr.shape[1]]
        arr = out
    return arr


def _render(spec: PhantomSpec, latents: dict) -> Image:
    img = np.full((spec.height, spec.width), spec.background, dtype=np.float64)
    for s in spec.structures:
        left_value, right_value = latents[s.name]
        left = ellipse_mask(spec.height, spec.width, s.center, s.axes)
        img[left.bool_array] = left_value
        img[mirror_mask(left).bool_array] = right_value
    if spec.smoothing > 0.0:
        img = _smooth(img, spec.smoothing)
    return Image(img)


def generate(spec: PhantomSpec, rng: np.random.Generator) -> PhantomSample:
    """Draw one phantom. Structures are drawn in spec order and each
    consumes exactly two normal draws whatever its sigmas, so the stream
    layout does not depend on parameter values."""
    latents = {}
    for s in spec.structures:
        z0, z1 = rng.standard_normal(2)
        left_value = s.mu_left + s.sigma_left * z0
        right_value = s.mu_right + s.sigma_right * (
            s.rho * z0 + math.sqrt(1.0 - s.rho * s.rho) * z1
        )
        latents[s.name] = (float(left_value), float(right_value))
    return PhantomSample(image=_render(spec, latents), atlas=build_atlas(spec),
                         latents=latents)


def _find_structure(spec: PhantomSpec, structure: str) -> StructureSpec:
    for s in spec.structures:
        if s.name == structure:
            return s
    raise ValueError(f"spec has no structure named {structure!r}")


def conditional_oracle(spec: PhantomSpec, structure: str, known_side_value: float,
                       known_side: str = "left"):
    """Exact (mean, variance) of the hidden side given the known side's
    value, from the bivariate-normal conditional. Conditioning on a
    zero-variance side is vacuous: the marginal is returned under a
    VacuousConditioningWarning."""
    s = _find_structure(spec, structure)
    if known_side == "left":
        mu_k, sig_k, mu_h, sig_h = s.mu_left, s.sigma_left, s.mu_right, s.sigma_right
    elif known_side == "right":
        mu_k, sig_k, mu_h, sig_h = s.mu_right, s.sigma_right, s.mu_left, s.sigma_left
    else:
        raise ValueError(f"known_side must be 'left' or 'right', got {known_side!r}")
    if sig_h == 0.0:
        return (mu_h, 0.0)
    if sig_k == 0.0:
        warnings.warn(
            f"structure {structure!r}: known side {known_side!r} has sigma=0, "
            "conditioning is vacuous; returning the marginal",
            VacuousConditioningWarning,
        )
        return (mu_h, sig_h * sig_h)
    mean = mu_h + s.rho * (sig_h / sig_k) * (known_side_value - mu_k)
    return (float(mean), float(sig_h * sig_h * (1.0 - s.rho * s.rho)))


def _latent_factor(s: StructureSpec) -> np.ndarray:
    """(2, rank) factor B with (aL, aR) = (muL, muR) + B z, z iid standard
    normal. Degenerate sigmas and |rho|=1 drop to rank < 2 so lattice
    resolution is never spent on dimensions that cannot move the image."""
    sl, sr = s.sigma_left, s.sigma_right
    if sl == 0.0 and sr == 0.0:
        return np.zeros((2, 0))
    if sl == 0.0:
        return np.array([[0.0], [sr]])
    if sr == 0.0:
        return np.array([[sl], [0.0]])
    if abs(s.rho) == 1.0:
        return np.array([[sl], [s.rho * sr]])
    return np.array([[sl, 0.0], [s.rho * sr, math.sqrt(1.0 - s.rho * s.rho) * sr]])


def gmm_from_spec(spec: PhantomSpec, n_components: int,
                  rng: np.random.Generator = None) -> GmmDataModel:
    """Mixture of rendered phantoms at quantile-spaced latent draws.

    The effective latent dimension d counts only directions that move the
    image; the lattice uses m points per dimension with K = m^d the largest
    power not exceeding n_components. Without an rng the points are
    midpoint quantiles rescaled to unit variance, so the mixture's latent
    mean and covariance equal the population's exactly; the residual
    approximation error is the missing within-cell spread, decreasing in
    n_components. With an rng each component instead draws uniformly within
    its quantile stratum (unbiased stratification, left unscaled).
    """
    if n_components < 1:
        raise ValueError(f"n_components must be >= 1, got {n_components}")
    factors = [(s, _latent_factor(s)) for s in spec.structures]
    d = sum(B.shape[1] for _, B in factors)
    if d == 0:
        latents = {s.name: (s.mu_left, s.mu_right) for s in spec.structures}
        return GmmDataModel(means=(_render(spec, latents),),
                            weights=np.array([1.0]), variances=np.zeros(1))
    m = 1
    while (m + 1) ** d <= n_components:
        m += 1
    count = m ** d
    if rng is None and m > 1:
        q = np.array([_NORMAL.inv_cdf((i + 0.5) / m) for i in range(m)])
        q /= math.sqrt(float((q * q).mean()))
    else:
        q = np.zeros(m)
    means = []
    for flat in range(count):
        idx = []
        rem = flat
        for _ in range(d):
            idx.append(rem % m)
            rem //= m
        if rng is None:
            z = np.array([q[i] for i in idx])
        else:
            z = np.array([_NORMAL.inv_cdf((i + rng.uniform()) / m) for i in idx])
        latents = {}
        pos = 0
        for s, B in factors:
            r = B.shape[1]
            pair = np.array([s.mu_left, s.mu_right]) + B @ z[pos:pos + r]
            latents[s.name] = (float(pair[0]), float(pair[1]))
            pos += r
        means.append(_render(spec, latents))
    return GmmDataModel(means=tuple(means),
                        weights=np.full(count, 1.0 / count),
                        variances=np.zeros(count))


_SECTION_RE = re.compile(r"^\s*\[(?P<name>[^]]+)\]")
_KEY_RE = re.compile(r"^\s*(?P<key>[^=:\s][^=:]*?)\s*[=:]")


def _line_of(text: str, section: str, key: str = None) -> int:
    """Best-effort 1-based line number of a section header or of a key
    inside it, for error messages."""
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            current = m.group("name").strip()
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section:
            k = _KEY_RE.match(line)
            if k and k.group("key").strip() == key:
                return lineno
    return 0


_PHANTOM_KEYS = ("width", "height", "background", "smoothing")
_STRUCTURE_KEYS = ("center", "axes", "mu", "mu_left", "mu_right",
                   "sigma", "sigma_left", "sigma_right", "rho")


def _spec_error(origin, text, section, key, detail) -> PhantomSpecError:
    line = _line_of(text, section, key)
    where = f"{origin}, line {line}" if line else origin
    return PhantomSpecError(f"{where}: {detail}")


def _parse_pair(raw: str):
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {raw!r}")
    return (float(parts[0]), float(parts[1]))


def parse_phantom_spec(path) -> PhantomSpec:
    """Read a phantom spec file (format documented in the module docstring).
    Errors carry the file name and line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise PhantomSpecError(f"cannot read {path}: {e}") from None
    origin = str(path)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as e:
        raise PhantomSpecError(str(e)) from None

    width, height = 32, 32
    background, smoothing = 0.1, 0.0
    for section in cp.sections():
        if section != "phantom" and not section.startswith("structure:"):
            raise _spec_error(origin, text, section, None,
                              f"unknown section [{section}]")
    if cp.has_section("phantom"):
        for key in cp.options("phantom"):
            if key not in _PHANTOM_KEYS:
                raise _spec_error(origin, text, "phantom", key,
                                  f"unknown key {key!r} in [phantom]")
        try:
            width = cp.getint("phantom", "width", fallback=width)
        except ValueError:
            raise _spec_error(origin, text, "phantom", "width",
                              "width must be an integer") from None
        try:
            height = cp.getint("phantom", "height", fallback=height)
        except ValueError:
            raise _spec_error(origin, text, "phantom", "height",
                              "height must be an integer") from None
        try:
            background = cp.getfloat("phantom", "background", fallback=background)
            smoothing = cp.getfloat("phantom", "smoothing", fallback=smoothing)
        except ValueError:
            raise _spec_error(origin, text, "phantom", None,
                              "background/smoothing must be numbers") from None

    structures = []
    for section in cp.sections():
        if not section.startswith("structure:"):
            continue
        name = section[len("structure:"):].strip()
        for key in cp.options(section):
            if key not in _STRUCTURE_KEYS:
                raise _spec_error(origin, text, section, key,
                                  f"unknown key {key!r} in [{section}]")
        for required in ("center", "axes"):
            if not cp.has_option(section, required):
                raise _spec_error(origin, text, section, None,
                                  f"[{section}] is missing required key {required!r}")

        def fval(key, default):
            try:
                return cp.getfloat(section, key, fallback=default)
            except ValueError:
                raise _spec_error(origin, text, section, key,
                                  f"{key} must be a number") from None

        def pair(key):
            try:
                return _parse_pair(cp.get(section, key))
            except ValueError as e:
                raise _spec_error(origin, text, section, key, str(e)) from None

        center = pair("center")
        axes = pair("axes")
        mu = fval("mu", 0.6)
        sigma = fval("sigma", 0.1)
        try:
            structures.append(StructureSpec(
                name=name,
                center=center,
                axes=axes,
                mu_left=fval("mu_left", mu),
                mu_right=fval("mu_right", mu),
                sigma_left=fval("sigma_left", sigma),
                sigma_right=fval("sigma_right", sigma),
                rho=fval("rho", 0.0),
            ))
        except ValueError as e:
            raise _spec_error(origin, text, section, None, str(e)) from None
    try:
        return PhantomSpec(width=width, height=height, structures=tuple(structures),
                           background=background, smoothing=smoothing)
    except ValueError as e:
        raise PhantomSpecError(f"{origin}: {e}") from None
