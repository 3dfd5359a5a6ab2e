"""PNG / binary PPM reading and writing via Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .core import ImageBuffer, InvalidInputError


def read_image(path) -> ImageBuffer:
    """Load an 8- or 16-bit PNG/PPM as an ImageBuffer with values in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read image {path}: {exc}") from exc
    return ImageBuffer(np.clip(arr, 0.0, 1.0))


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_rgb(path, pixels) -> None:
    """Write an ``(H, W, 3)`` float image in [0, 1]; format follows the suffix (.png/.ppm)."""
    path = Path(path)
    arr = pixels.pixels if isinstance(pixels, ImageBuffer) else pixels
    img = Image.fromarray(to_uint8(arr), mode="RGB")
    img.save(path, format="PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG")


def write_gray(path, values, lo=None, hi=None) -> None:
    """Write a scalar map. uint8 input is written as-is; floats are rescaled to [lo, hi]."""
    path = Path(path)
    values = np.asarray(values)
    if values.dtype != np.uint8:
        v = values.astype(np.float64)
        lo = float(np.nanmin(v)) if lo is None else lo
        hi = float(np.nanmax(v)) if hi is None else hi
        v = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
        values = to_uint8(v)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pgm", ".pnm") else "PNG"
    Image.fromarray(values, mode="L").save(path, format=fmt)


def id_colors(ids: np.ndarray) -> np.ndarray:
    """Deterministic pseudo-random colour per site ID, for partition images."""
    ids = np.asarray(ids, dtype=np.uint64)
    h = (ids * np.uint64(2654435761)) & np.uint64(0xFFFFFFFF)
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(0xFF) for s in (0, 8, 16)], axis=-1)
    return (rgb.astype(np.float64) * 0.75 + 48.0) / 255.0
