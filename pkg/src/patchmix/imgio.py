"""Tiny image writers: PNG through Pillow when importable, PPM/PGM always.

Format is chosen by file extension. Inputs are float arrays in [0, 1],
either [H, W] (grayscale) or [C, H, W] with 1 or 3 channels; values are
quantised by round(v * 255).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["write_image"]


def _to_bytes(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(
            f"expected [H, W] or [C, H, W] with 1 or 3 channels, got shape "
            f"{np.asarray(img).shape}"
        )
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_pnm(path: Path, data: np.ndarray) -> None:
    c, h, w = data.shape
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode()
        body = data[0].tobytes()
    else:
        header = f"P6\n{w} {h}\n255\n".encode()
        body = data.transpose(1, 2, 0).tobytes()  # interleave RGB
    path.write_bytes(header + body)


def write_image(path, img: np.ndarray) -> Path:
    """Write one image; returns the path actually written.

    ``.png`` uses Pillow and falls back to the matching PNM format (with a
    corrected extension) when Pillow is unavailable; ``.ppm``/``.pgm``
    always use the built-in writer.
    """
    path = Path(path)
    data = _to_bytes(img)
    suffix = path.suffix.lower()
    if suffix == ".png":
        try:
            from PIL import Image
        except ImportError:
            fallback = path.with_suffix(".ppm" if data.shape[0] == 3 else ".pgm")
            _write_pnm(fallback, data)
            return fallback
        mode = "RGB" if data.shape[0] == 3 else "L"
        array = data.transpose(1, 2, 0) if mode == "RGB" else data[0]
        Image.fromarray(array, mode=mode).save(path)
        return path
    if suffix in (".ppm", ".pgm"):
        _write_pnm(path, data)
        return path
    raise ValueError(f"{path}: unsupported image extension {suffix!r}")
