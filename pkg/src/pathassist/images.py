"""Image arrays: validation, loading, resizing and cropping.

Images are ``H x W x 3`` float arrays in ``[0, 1]``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import InvalidInputError


def check_image(image, min_size: int = 1) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise InvalidInputError(
            f"image {arr.shape[0]}x{arr.shape[1]} is smaller than {min_size}x{min_size}"
        )
    if not np.issubdtype(arr.dtype, np.floating):
        raise InvalidInputError(f"image dtype must be floating, got {arr.dtype}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise InvalidInputError("image values must be finite and within [0, 1]")
    return arr


def load_image(ref: str | Path) -> np.ndarray:
    path = Path(ref)
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return check_image(arr.astype(np.float32, copy=False))


def save_image(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.round(check_image(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize: output corners sample input corners exactly."""
    arr = np.asarray(image)
    if arr.shape[:2] == (height, width):
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=True)
    return out[0].permute(1, 2, 0).numpy()


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        image = resize_bilinear(image, max(h, size), max(w, size))
        h, w = image.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top : top + size, left : left + size]
