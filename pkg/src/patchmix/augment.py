"""Two-view stochastic augmentation pipelines.

Each view applies, in this fixed order: random resized crop (bilinear),
horizontal flip, color jitter, grayscale, Gaussian blur, solarization,
then a clamp to [0, 1]. The two views share every setting except the blur
and solarize probabilities, which are per-view pairs (view 1 defaults to
blur always / never solarize, view 2 to rare blur / occasional solarize).

All randomness is drawn per image from the caller's generator, so a fixed
seed reproduces the batch bit for bit. Color operations assume 3-channel
input and are skipped for other channel counts; ``color_ops=False``
disables jitter and grayscale entirely for data without color semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .patch_ops import ImageBatch

__all__ = ["AugConfig", "augment_view"]


@dataclass(frozen=True)
class AugConfig:
    """Pipeline settings; blur/solarize probabilities are (view1, view2)."""

    crop_area: tuple[float, float] = (0.1, 1.0)
    crop_aspect: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: tuple[float, float] = (1.0, 0.1)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_prob: tuple[float, float] = (0.0, 0.2)
    solarize_threshold: float = 0.5
    color_ops: bool = True

    def __post_init__(self):
        for name in ("flip_prob", "jitter_prob", "grayscale_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("blur_prob", "solarize_prob"):
            for v in getattr(self, name):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name} entries must lie in [0, 1], got {v}")
        for name in ("crop_area", "crop_aspect", "blur_sigma"):
            lo, hi = getattr(self, name)
            if not (lo <= hi and lo > 0.0):
                raise ValueError(f"{name} must be a non-empty positive range")


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a [C, h, w] image; exact identity at same size."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _random_resized_crop(
    img: np.ndarray, cfg: AugConfig, rng: np.random.Generator
) -> np.ndarray:
    c, h, w = img.shape
    for _ in range(10):
        area = h * w * rng.uniform(*cfg.crop_area)
        aspect = rng.uniform(*cfg.crop_aspect)
        ch = int(round(math.sqrt(area / aspect)))
        cw = int(round(math.sqrt(area * aspect)))
        if 0 < ch <= h and 0 < cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img[:, top : top + ch, left : left + cw]
            return _bilinear_resize(crop, h, w)
    # fallback: centered square of the smaller side
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return _bilinear_resize(img[:, top : top + side, left : left + side], h, w)


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    spread = maxc - minc
    s = np.where(maxc > 0, spread / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(spread > 0, spread, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    hue = np.where(
        maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc)
    )
    hue = np.where(spread > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, s, v])


def _hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


_LUMA = np.array([0.299, 0.587, 0.114])


def _grayscale(img: np.ndarray) -> np.ndarray:
    y = np.tensordot(_LUMA, img, axes=(0, 0))
    return np.broadcast_to(y, img.shape).copy()


def _color_jitter(
    img: np.ndarray, cfg: AugConfig, rng: np.random.Generator
) -> np.ndarray:
    """Brightness/contrast/saturation/hue, applied in a random order."""
    order = rng.permutation(4)
    for op in order:
        if op == 0 and cfg.brightness > 0:
            f = rng.uniform(max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness)
            img = np.clip(img * f, 0.0, 1.0)
        elif op == 1 and cfg.contrast > 0:
            f = rng.uniform(max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast)
            anchor = _grayscale(img).mean()
            img = np.clip(img * f + anchor * (1.0 - f), 0.0, 1.0)
        elif op == 2 and cfg.saturation > 0:
            f = rng.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation)
            img = np.clip(img * f + _grayscale(img) * (1.0 - f), 0.0, 1.0)
        elif op == 3 and cfg.hue > 0:
            shift = rng.uniform(-cfg.hue, cfg.hue)
            hsv = _rgb_to_hsv(img)
            hsv[0] = (hsv[0] + shift) % 1.0
            img = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    return img


def _gaussian_blur(
    img: np.ndarray, image_side: int, cfg: AugConfig, rng: np.random.Generator
) -> np.ndarray:
    sigma = rng.uniform(*cfg.blur_sigma)
    ksize = max(3, int(round(image_side / 10)) | 1)
    half = ksize // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = convolve1d(img, kernel, axis=1, mode="reflect")
    return convolve1d(out, kernel, axis=2, mode="reflect")


def augment_view(
    batch: ImageBatch, cfg: AugConfig, view: int, rng: np.random.Generator
) -> ImageBatch:
    """Apply one view's pipeline to every image independently.

    ``view`` selects which element of the per-view probability pairs is
    used (1 or 2). Randomness is consumed per image in pipeline order.
    """
    if view not in (1, 2):
        raise ValueError(f"view must be 1 or 2, got {view}")
    vi = view - 1
    data = batch.data
    n, c, h, w = data.shape
    color = cfg.color_ops and c == 3
    out = np.empty_like(data, dtype=np.float64)
    for i in range(n):
        img = data[i].astype(np.float64, copy=True)
        img = _random_resized_crop(img, cfg, rng)
        if rng.random() < cfg.flip_prob:
            img = img[:, :, ::-1]
        if color and rng.random() < cfg.jitter_prob:
            img = _color_jitter(img, cfg, rng)
        if color and rng.random() < cfg.grayscale_prob:
            img = _grayscale(img)
        if rng.random() < cfg.blur_prob[vi]:
            img = _gaussian_blur(img, max(h, w), cfg, rng)
        if rng.random() < cfg.solarize_prob[vi]:
            img = np.where(img < cfg.solarize_threshold, img, 1.0 - img)
        out[i] = np.clip(img, 0.0, 1.0)
    return ImageBatch(out)
