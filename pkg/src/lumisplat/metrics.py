"""Image quality metrics for display-referred [0, 1] images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

PSNR_CAP = 99.0

# BT.601 luma weights, shared with the loss-side luminance helper.
_LUMA = (0.299, 0.587, 0.114)


def _gray(img: torch.Tensor) -> torch.Tensor:
    if img.ndim == 3 and img.shape[-1] == 3:
        w = torch.tensor(_LUMA, dtype=img.dtype)
        return img @ w
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, 3), got {tuple(img.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise ValueError("psnr inputs must share a shape")
    mse = float(torch.mean((a.double() - b.double()) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows on BT.601 grayscale."""
    if a.shape != b.shape:
        raise ValueError("ssim inputs must share a shape")
    x = _gray(a).double()
    y = _gray(b).double()
    if min(x.shape) < 11:
        raise ValueError("ssim needs images at least 11 pixels on each side")
    w = _gaussian_window()[None, None]

    def f(img: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.conv2d(img[None, None], w)[0, 0]

    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    c1, c2 = k1 ** 2, k2 ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float((num / den).mean())


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    per_view: tuple[tuple[float, float], ...]


def evaluate_views(preds: list[torch.Tensor], refs: list[torch.Tensor]) -> MetricReport:
    if len(preds) != len(refs) or not preds:
        raise ValueError("need matching non-empty prediction/reference lists")
    rows = tuple((psnr(p, r), ssim(p, r)) for p, r in zip(preds, refs))
    return MetricReport(psnr=sum(r[0] for r in rows) / len(rows),
                        ssim=sum(r[1] for r in rows) / len(rows),
                        per_view=rows)
