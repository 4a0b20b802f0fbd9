"""Input validation helpers used at module boundaries."""

from __future__ import annotations

import io
import math
import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .exceptions import InputError

SEQUENCE_LENGTH = 77


def as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def check_finite(x, name: str = "input") -> None:
    """Raise InputError when `x` (array or tensor) holds NaN or Inf."""
    if isinstance(x, torch.Tensor):
        ok = bool(torch.isfinite(x).all())
    else:
        ok = bool(np.isfinite(np.asarray(x, dtype=float)).all())
    if not ok:
        raise InputError(f"{name} contains non-finite values")


def check_scalar(value, name: str, *, min_val: float | None = None) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{name} must be a real scalar, got {value!r}") from exc
    if not math.isfinite(value):
        raise InputError(f"{name} must be finite, got {value}")
    if min_val is not None and value < min_val:
        raise InputError(f"{name} must be >= {min_val}, got {value}")
    return value


def check_sequence(vectors, name: str = "sequence") -> None:
    if vectors.ndim != 2 or vectors.shape[0] != SEQUENCE_LENGTH:
        raise InputError(
            f"{name} must have shape ({SEQUENCE_LENGTH}, d), got {tuple(vectors.shape)}"
        )
    check_finite(vectors, name)


def load_image(image) -> Image.Image:
    """Decode `image` into an RGB PIL image.

    Accepts a path, raw bytes, a PIL image or an HxWx3 uint8 array.
    """
    if isinstance(image, Image.Image):
        return image.convert("RGB")
    if isinstance(image, (str, os.PathLike)):
        path = Path(image)
        if not path.is_file():
            raise InputError(f"image file not found: {path}")
        try:
            with Image.open(path) as im:
                return im.convert("RGB")
        except (UnidentifiedImageError, OSError) as exc:
            raise InputError(f"cannot decode image {path}: {exc}") from exc
    if isinstance(image, (bytes, bytearray)):
        try:
            with Image.open(io.BytesIO(image)) as im:
                return im.convert("RGB")
        except (UnidentifiedImageError, OSError) as exc:
            raise InputError(f"cannot decode image bytes: {exc}") from exc
    arr = as_numpy(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise InputError(f"expected an HxWx3 raster, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0 if arr.max() <= 1.0 else arr), 0, 255).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")
