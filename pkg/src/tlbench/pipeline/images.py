"""Image decoding and normalisation to 3-channel [0, 1] float arrays."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import DecodeError, ShapeError

DEFAULT_SIZE = (224, 224)


def _luminance(img: Image.Image) -> np.ndarray:
    """Return luminance in [0, 1] as float32, whatever the source mode."""
    if img.mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(img, dtype=np.float32) / 65535.0
    if img.mode in ("I", "F"):
        arr = np.asarray(img, dtype=np.float32)
        peak = arr.max() if arr.size else 0.0
        return arr / peak if peak > 0 else arr
    # ITU-R 601-2 luma for colour inputs
    return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def decode_and_preprocess(
    image_ref: str | Path, target_size: tuple[int, int] = DEFAULT_SIZE
) -> np.ndarray:
    """Load an image as an (H, W, 3) float32 array in [0, 1].

    Colour inputs are reduced to luminance and the single channel is
    replicated three times so pretrained 3-channel backbones accept it.
    """
    try:
        with Image.open(image_ref) as img:
            img.load()
            gray = _luminance(img)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(str(image_ref), str(exc)) from None
    return resize_gray(gray, target_size)


def resize_gray(gray: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    h, w = target_size
    if gray.shape != (h, w):
        gray = np.asarray(
            Image.fromarray(gray.astype(np.float32), mode="F").resize(
                (w, h), Image.BILINEAR
            )
        )
    gray = np.clip(gray, 0.0, 1.0).astype(np.float32)
    return np.repeat(gray[:, :, None], 3, axis=2)


def validate_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got shape {image.shape}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ShapeError("image values must lie in [0, 1]")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image: np.ndarray, path: str | Path) -> Path:
    """Write an image array as PNG (grayscale when all channels agree)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(image)
    if pixels.ndim == 3 and np.array_equal(pixels[..., 0], pixels[..., 1]) and np.array_equal(
        pixels[..., 0], pixels[..., 2]
    ):
        Image.fromarray(pixels[..., 0], mode="L").save(path)
    else:
        Image.fromarray(pixels).save(path)
    return path
