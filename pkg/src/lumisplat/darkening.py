"""Physics-inspired low-light synthesis.

Turns a normal-light image into a controllably dark one: linearize, drop
exposure, compress tone, suppress chroma, optionally add noise, re-encode.
A soft sky mask keeps bright sky regions from darkening unrealistically.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import (
    LUMA_WEIGHTS,
    gaussian_blur,
    linear_to_srgb,
    luminance,
    srgb_to_linear,
    validate_image,
)


@dataclass(frozen=True)
class DarknessParams:
    d: float = 0.5
    exposure_stops_max: float = 4.0
    tone_gamma_max: float = 1.8
    chroma_drop_max: float = 0.5
    noise_enabled: bool = False
    noise_sigma_max: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 <= self.d <= 1.0:
            raise ValueError(f"darkness level d={self.d} outside [0, 1]")
        if self.exposure_stops_max <= 0 or self.tone_gamma_max <= 0:
            raise ValueError("exposure_stops_max and tone_gamma_max must be positive")
        if not 0.0 <= self.chroma_drop_max <= 1.0:
            raise ValueError("chroma_drop_max must be in [0, 1]")
        if self.noise_sigma_max < 0:
            raise ValueError("noise_sigma_max must be non-negative")


def darken_image(img: np.ndarray, p: DarknessParams, seed: int = 0) -> np.ndarray:
    """Apply the staged darkening transform at level p.d.

    Stage order: linearize (gamma 2.2) -> exposure drop 2^(-d*stops) ->
    tone compression x^(1 + d*(gamma_max-1)) -> chroma scale by
    (1 - d*chroma_drop_max) about BT.601 luma -> optional Gaussian noise
    (sigma = d*noise_sigma_max) -> re-encode and clamp.
    """
    validate_image(img)
    d = p.d
    if d == 0.0:
        # exact identity: skip all float round-trips
        return img.copy()

    lin = srgb_to_linear(img)
    lin = lin * np.float32(2.0 ** (-d * p.exposure_stops_max))
    lin = np.power(lin, np.float32(1.0 + d * (p.tone_gamma_max - 1.0)), dtype=np.float32)

    luma = lin @ LUMA_WEIGHTS
    chroma_scale = np.float32(1.0 - d * p.chroma_drop_max)
    lin = luma[..., None] + chroma_scale * (lin - luma[..., None])

    if p.noise_enabled and p.noise_sigma_max > 0:
        rng = np.random.default_rng(seed)
        lin = lin + rng.normal(0.0, d * p.noise_sigma_max, size=lin.shape).astype(np.float32)

    return np.clip(linear_to_srgb(lin), 0.0, 1.0)


def blend_sky(dark: np.ndarray, normal: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """out = (1 - M) * dark + M * normal, per pixel per channel."""
    if dark.shape != normal.shape:
        raise ValueError(f"dark {dark.shape} and normal {normal.shape} differ in shape")
    if mask.shape != dark.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {dark.shape[:2]}")
    m = mask[..., None].astype(np.float32)
    return (1.0 - m) * dark + m * normal


def estimate_sky_mask(img: np.ndarray) -> np.ndarray:
    """Soft sky weight from brightness and blue dominance, blurred smooth.

    mask = blur(sigmoid(12*(luma - 0.7)) * sigmoid(12*(B - mean(R, G)))),
    Gaussian blur sigma = 2% of image width.
    """
    validate_image(img)
    luma = luminance(img)
    blue_excess = img[..., 2] - 0.5 * (img[..., 0] + img[..., 1])
    raw = _sigmoid(12.0 * (luma - 0.7)) * _sigmoid(12.0 * blue_excess)
    sigma = 0.02 * img.shape[1]
    return np.clip(gaussian_blur(raw.astype(np.float32), sigma), 0.0, 1.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-x))).astype(np.float32)


def sample_pair(
    img: np.ndarray, d_low: float, d_high: float, seed: int = 0
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Darken img at the two given levels; returns (img_low, img_high, d_low, d_high)."""
    if not (0.0 <= d_low < d_high <= 1.0):
        raise ValueError(f"need 0 <= d_low < d_high <= 1, got ({d_low}, {d_high})")
    s_low, s_high = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    img_low = darken_image(img, DarknessParams(d=d_low), seed=s_low)
    img_high = darken_image(img, DarknessParams(d=d_high), seed=s_high)
    return img_low, img_high, d_low, d_high


@dataclass
class ChannelStats:
    hist: np.ndarray  # (3, bins) counts
    bin_edges: np.ndarray  # (bins + 1,)
    mean: np.ndarray  # (3,)


def channel_stats(imgs: list[np.ndarray], bins: int = 32) -> ChannelStats:
    """Per-channel intensity histograms and means over an image list."""
    if not imgs:
        raise ValueError("empty image list")
    for im in imgs:
        validate_image(im)
    flat = np.concatenate([im.reshape(-1, 3) for im in imgs], axis=0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist = np.stack([np.histogram(flat[:, c], bins=edges)[0] for c in range(3)])
    return ChannelStats(hist=hist, bin_edges=edges, mean=flat.mean(axis=0))


@dataclass
class ManifestEntry:
    path: str
    d: float
    seed: int
    extras: dict = field(default_factory=dict)


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    with open(path, "w") as f:
        for e in entries:
            rec = {"path": e.path, "d": e.d, "seed": e.seed, **e.extras}
            f.write(json.dumps(rec) + "\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            extras = {k: v for k, v in rec.items() if k not in ("path", "d", "seed")}
            out.append(ManifestEntry(path=rec["path"], d=rec["d"], seed=rec["seed"], extras=extras))
    return out
