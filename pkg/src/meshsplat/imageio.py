"""PNG image IO.

Images are float arrays of shape (H, W, 3) in [0, 1]. Quantization maps
code values linearly (round(x * 255)); the engine treats stored pixel
values as the optimization target directly, so a write/read round trip is
within half a code step per channel.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    arr = to_uint8(np.asarray(image))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def image_nbytes(width: int, height: int) -> int:
    """Decoded size of one view in bytes (float32 RGB)."""
    return width * height * 3 * 4
