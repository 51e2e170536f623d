"""Stochastic geometric and photometric augmentation.

Parameters are drawn from a counter-based generator keyed by
(seed, image index, draw index), so a given image always receives the same
transform regardless of processing order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentationPolicy:
    horizontal_flip: bool = True
    rotation_degrees: float = 15.0
    zoom_fraction: float = 0.10
    contrast_fraction: float = 0.10
    translation_fraction: float = 0.05
    seed: int = 42

    def __post_init__(self):
        for name in ("rotation_degrees", "zoom_fraction", "contrast_fraction",
                     "translation_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.zoom_fraction >= 1:
            raise ValueError("zoom_fraction must be below 1")

    @classmethod
    def identity(cls, seed: int = 42) -> "AugmentationPolicy":
        return cls(False, 0.0, 0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class TransformParams:
    flip: bool
    angle: float  # degrees, counter-clockwise
    zoom: float  # scale factor; >1 magnifies
    contrast: float
    shift: tuple[float, float]  # (rows, cols) as fractions of size


def draw_rng(seed: int, image_index: int, draw_index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, image_index, draw_index])


def sample_params(policy: AugmentationPolicy, rng: np.random.Generator) -> TransformParams:
    # fixed draw order keeps the stream stable when a magnitude is zero
    u = rng.uniform(-1.0, 1.0, size=5)
    flip = bool(rng.random() < 0.5)
    return TransformParams(
        flip=policy.horizontal_flip and flip,
        angle=policy.rotation_degrees * u[0],
        zoom=1.0 + policy.zoom_fraction * u[1],
        contrast=1.0 + policy.contrast_fraction * u[2],
        shift=(policy.translation_fraction * u[3], policy.translation_fraction * u[4]),
    )


def _affine(channel: np.ndarray, p: TransformParams) -> np.ndarray:
    h, w = channel.shape
    theta = math.radians(p.angle)
    cos, sin = math.cos(theta), math.sin(theta)
    # output->input mapping in (row, col) coordinates about the centre
    rot = np.array([[cos, sin], [-sin, cos]]) / p.zoom
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([p.shift[0] * h, p.shift[1] * w])
    offset = centre - rot @ (centre + shift)
    return ndimage.affine_transform(channel, rot, offset=offset, order=1, mode="nearest")


def transform(image: np.ndarray, p: TransformParams) -> np.ndarray:
    out = image
    if p.flip:
        out = out[:, ::-1, :]
    if p.angle != 0.0 or p.zoom != 1.0 or p.shift != (0.0, 0.0):
        out = np.stack([_affine(out[..., c], p) for c in range(out.shape[2])], axis=-1)
    if p.contrast != 1.0:
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = (out - mean) * p.contrast + mean
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def apply_augmentation(
    image: np.ndarray,
    policy: AugmentationPolicy,
    draw: np.random.Generator | int = 0,
    image_index: int = 0,
) -> np.ndarray:
    """Return a randomly transformed copy of ``image``.

    ``draw`` is either a generator or a draw index; with an index the
    generator is derived from ``(policy.seed, image_index, draw)``.
    """
    rng = draw if isinstance(draw, np.random.Generator) else draw_rng(
        policy.seed, image_index, draw
    )
    return np.ascontiguousarray(transform(image, sample_params(policy, rng)))
