"""Masked conditional sampling by compose-and-rediffuse.

Each reverse move at time t draws the unknown region from the model's
reverse kernel and the known region from the forward marginal of the clean
image at t-1, then composites them through the mask (mask=1 means known).
Time-travel: after descending to a boundary t that is a positive multiple of
the jump length j (and from which a jump of j stays within [0, T]), the
sampler re-noises the composite forward j steps and descends again, r-1 extra
times, which harmonizes the generated region with the conditioning content.

The walk ends at t=0 and the known region is then overwritten with the clean
pixels outright, so conditioning pixels are exact by construction.

RNG stream order is pinned for reproducibility: inpaint draws the initial
x_T first; each reverse move draws the unknown-region noise (when the step
adds any), then the known-region sample; each forward move draws once.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .diffusion import (
    Denoiser,
    NoiseSchedule,
    SIGMA_MODES,
    forward_step,
    reverse_step,
)
from .grid import BinaryMask, Image

__all__ = [
    "KNOWN_VARIANCE_INDEXES",
    "RepaintConfig",
    "TimeTravelPlan",
    "build_plan",
    "known_sample",
    "repaint_step",
    "inpaint",
]

KNOWN_VARIANCE_INDEXES = ("tm1", "t")


@dataclass(frozen=True)
class RepaintConfig:
    """Sampler knobs. jump_length must not exceed the schedule length; that
    is checked where the schedule is in hand (build_plan / inpaint)."""

    jump_length: int = 1
    resamplings: int = 1
    sigma_mode: str = "beta_tilde"
    known_variance_index: str = "tm1"

    def __post_init__(self):
        if self.jump_length < 1:
            raise ValueError(f"jump_length must be >= 1, got {self.jump_length}")
        if self.resamplings < 1:
            raise ValueError(f"resamplings must be >= 1, got {self.resamplings}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"unknown sigma mode {self.sigma_mode!r}")
        if self.known_variance_index not in KNOWN_VARIANCE_INDEXES:
            raise ValueError(
                f"known_variance_index must be one of {KNOWN_VARIANCE_INDEXES}, "
                f"got {self.known_variance_index!r}"
            )


@dataclass(frozen=True)
class TimeTravelPlan:
    """Move list walked by inpaint: -1 is one reverse step, +1 one forward
    rediffusion step. Starting at t=T, the running time must stay inside
    [0, T] and finish at 0."""

    moves: tuple
    timesteps: int

    def __post_init__(self):
        t = self.timesteps
        for i, move in enumerate(self.moves):
            if move not in (-1, 1):
                raise ValueError(f"move {i} is {move!r}, expected -1 or +1")
            t += move
            if not 0 <= t <= self.timesteps:
                raise ValueError(f"plan leaves [0, {self.timesteps}] after move {i}")
        if t != 0:
            raise ValueError(f"plan ends at t={t}, expected 0")


def build_plan(timesteps: int, jump_length: int, resamplings: int) -> TimeTravelPlan:
    """Descend T..0; at each boundary t>0 with t a multiple of jump_length,
    insert resamplings-1 round trips of jump_length forwards then reverses.
    Boundaries too close to T for a full jump (possible only when
    jump_length does not divide T) are skipped so the walk stays in [0, T].
    """
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not 1 <= jump_length <= timesteps:
        raise ValueError(
            f"jump_length must be in [1, {timesteps}], got {jump_length}"
        )
    if resamplings < 1:
        raise ValueError(f"resamplings must be >= 1, got {resamplings}")
    moves = []
    t = timesteps
    while t > 0:
        moves.append(-1)
        t -= 1
        if t > 0 and t % jump_length == 0 and t + jump_length <= timesteps:
            for _ in range(resamplings - 1):
                moves.extend([1] * jump_length)
                moves.extend([-1] * jump_length)
    return TimeTravelPlan(moves=tuple(moves), timesteps=timesteps)


def known_sample(
    I0: Image,
    t_minus_1: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    variance_index: str = "tm1",
) -> Image:
    """Draw the known-region state N(sqrt(abar_{t-1}) I0, (1-abar_{t-1}) I).

    At t-1=0 this is I0 itself; it is returned exactly and no noise is drawn.
    variance_index="t" selects the printed-index variant that takes the
    variance one step later, (1-abar_t), while keeping the mean at t-1.
    """
    idx = int(t_minus_1)
    if not 0 <= idx <= sched.timesteps:
        raise ValueError(f"timestep {idx} outside [0, {sched.timesteps}]")
    if variance_index not in KNOWN_VARIANCE_INDEXES:
        raise ValueError(f"unknown variance_index {variance_index!r}")
    if idx == 0:
        return Image(I0.data)
    if variance_index == "tm1":
        var = 1.0 - sched.alpha_bar[idx]
    else:
        if idx + 1 > sched.timesteps:
            raise ValueError("variance_index='t' needs t-1 < T")
        var = 1.0 - sched.alpha_bar[idx + 1]
    mean = sqrt(sched.alpha_bar[idx]) * I0.data
    return Image(mean + sqrt(var) * rng.standard_normal(I0.shape))


def _check_dims(I_t: Image, I0: Image, mask: BinaryMask):
    if I_t.shape != I0.shape or mask.shape != I0.shape:
        raise ValueError(
            f"shape mismatch: state {I_t.shape}, clean {I0.shape}, mask {mask.shape}"
        )


def repaint_step(
    I_t: Image,
    t: int,
    I0: Image,
    mask: BinaryMask,
    model: Denoiser,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    sigma_mode: str = "beta_tilde",
    known_variance_index: str = "tm1",
) -> Image:
    """One conditional reverse move: unknown region from the model's reverse
    kernel, known region from the forward marginal at t-1, composited through
    the mask (1 = known). The unknown draw happens first."""
    _check_dims(I_t, I0, mask)
    unknown = reverse_step(I_t, t, model, sched, rng, sigma_mode=sigma_mode)
    known = known_sample(I0, t - 1, sched, rng, variance_index=known_variance_index)
    return Image(np.where(mask.bool_array, known.data, unknown.data))


def inpaint(
    I0: Image,
    mask: BinaryMask,
    model: Denoiser,
    sched: NoiseSchedule,
    cfg: RepaintConfig,
    rng: np.random.Generator,
) -> Image:
    """Run the full time-travel walk from x_T ~ N(0, I) and return the
    completed image. Pixels with mask=1 equal I0 bit-exactly in the result."""
    if mask.shape != I0.shape:
        raise ValueError(f"shape mismatch: clean {I0.shape}, mask {mask.shape}")
    plan = build_plan(sched.timesteps, cfg.jump_length, cfg.resamplings)
    x = Image(rng.standard_normal(I0.shape))
    t = sched.timesteps
    for move in plan.moves:
        if move == -1:
            x = repaint_step(
                x,
                t,
                I0,
                mask,
                model,
                sched,
                rng,
                sigma_mode=cfg.sigma_mode,
                known_variance_index=cfg.known_variance_index,
            )
            t -= 1
        else:
            x = forward_step(x, t + 1, sched, rng)
            t += 1
    if t != 0:
        raise AssertionError("time-travel plan did not terminate at t=0")
    return Image(np.where(mask.bool_array, I0.data, x.data))
