"""Image primitives shared across the pipeline.

Images are numpy float32 arrays of shape (H, W, 3), RGB in [0, 1], row-major.
Display encoding is a plain 2.2 gamma curve.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

DISPLAY_GAMMA = 2.2
# BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check shape/range invariants, returning the array unchanged."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values outside [0, 1]")
    return img


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.power(x, DISPLAY_GAMMA, dtype=np.float32)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    # negative inputs would NaN under the fractional power
    return np.power(np.clip(x, 0.0, None), 1.0 / DISPLAY_GAMMA, dtype=np.float32)


def luminance(img: np.ndarray) -> np.ndarray:
    """Per-pixel BT.601 luma of an encoded image, shape (H, W)."""
    return img @ LUMA_WEIGHTS


def mean_luminance(img: np.ndarray) -> float:
    return float(np.mean(luminance(img)))


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; works on (H, W) or (H, W, C)."""
    from scipy.ndimage import gaussian_filter

    if sigma <= 0:
        return img.copy()
    if img.ndim == 2:
        out = gaussian_filter(img, sigma=sigma, mode="reflect")
    else:
        out = np.stack(
            [gaussian_filter(img[..., c], sigma=sigma, mode="reflect") for c in range(img.shape[2])],
            axis=-1,
        )
    return out.astype(np.float32)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def png_bytes(img: np.ndarray) -> bytes:
    """Deterministic PNG encoding; the render service and the CLI must emit
    byte-identical files for identical pixels, so both go through here."""
    validate_image(img)
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(path: str | Path, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(png_bytes(img))
