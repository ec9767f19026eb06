"""Desk-scale diffusion inpainting lab.

DDPM forward/reverse processes with an exact Gaussian-mixture denoiser, the
RePaint inpainting procedure, synthetic bilateral phantoms with closed-form
joint statistics, free-form B-spline registration, and a seeded experiment
harness comparing baseline against bilateral masking.
"""

__version__ = "0.1.0"
