"""Global illumination adjustment of a dark Gaussian field.

A lightweight style net reads the dark view (plus an optional normal-light
reference) into a brightness scalar and an 8-dim latent code.  Low-frequency
feature guidance comes from cross-attending the refined features onto their
own wavelet LL band.  A dual-branch enhancer then emits per-primitive SH
residuals and a non-negative density increment; the brightness branch is a
literal monotone gate, DC band only, so exposure control is architectural
rather than a trained tendency.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .gaussians import GaussianField, num_sh_coeffs
from .wavelets import AttentionParams, dwt2, fgca, init_attention

S_LATENT_DIM = 8
STYLE_CHANNELS = (8, 16, 32, 32)
GAMMA_RHO = 1.0
LAMBDA_DOM = 0.01
DOM_EPS = 1e-8


@dataclass(frozen=True)
class StyleCode:
    """Scalar exposure factor plus a latent tone/color code."""

    s_bright: torch.Tensor  # 0-dim
    s_latent: torch.Tensor  # (S_LATENT_DIM,)

    def __post_init__(self) -> None:
        if self.s_bright.ndim != 0:
            raise ValueError("s_bright must be a scalar")
        if self.s_latent.shape != (S_LATENT_DIM,):
            raise ValueError(f"s_latent must have dim {S_LATENT_DIM}")
        if not (torch.isfinite(self.s_bright) and torch.isfinite(self.s_latent).all()):
            raise ValueError("non-finite style code")

    def with_bright(self, s: float) -> "StyleCode":
        return StyleCode(torch.tensor(float(s), dtype=self.s_latent.dtype), self.s_latent)


@dataclass
class GlobalModulation:
    """Per-primitive residuals; the two SH branches stay separate so the
    dominance regularizer can weigh them against each other."""

    dsh_bright: torch.Tensor  # (N, 3, n_coeffs), DC band only
    dsh_latent: torch.Tensor  # (N, 3, n_coeffs)
    drho: torch.Tensor        # (N,), >= 0
    gamma_rho: float = GAMMA_RHO

    def __post_init__(self) -> None:
        if self.dsh_bright.shape != self.dsh_latent.shape:
            raise ValueError("branch shapes differ")
        if self.drho.shape != self.dsh_bright.shape[:1]:
            raise ValueError("drho count mismatch")
        if self.gamma_rho <= 0:
            raise ValueError("gamma_rho must be positive")
        if torch.any(self.drho < 0):
            raise ValueError("drho must be non-negative")
        if not (torch.isfinite(self.dsh_bright).all() and torch.isfinite(self.dsh_latent).all()
                and torch.isfinite(self.drho).all()):
            raise ValueError("non-finite modulation")

    @property
    def dsh(self) -> torch.Tensor:
        return self.dsh_bright + self.dsh_latent


def concat_modulations(mods: list[GlobalModulation]) -> GlobalModulation:
    if not mods:
        raise ValueError("no modulations to concatenate")
    gamma = mods[0].gamma_rho
    if any(m.gamma_rho != gamma for m in mods):
        raise ValueError("gamma_rho differs across views")
    return GlobalModulation(
        torch.cat([m.dsh_bright for m in mods]),
        torch.cat([m.dsh_latent for m in mods]),
        torch.cat([m.drho for m in mods]),
        gamma,
    )


@dataclass
class IcmParams:
    """Style net, LL attention, and enhancer head weights."""

    tensors: dict[str, torch.Tensor]
    feature_channels: int
    sh_degree: int
    gamma_rho: float = GAMMA_RHO
    heads: int = 2

    def attention(self) -> AttentionParams:
        t = self.tensors
        return AttentionParams(t["fgca.wq"], t["fgca.wk"], t["fgca.wv"], t["fgca.wo"],
                               heads=self.heads)

    def to(self, dtype: torch.dtype) -> "IcmParams":
        return IcmParams({k: v.to(dtype) for k, v in self.tensors.items()},
                         self.feature_channels, self.sh_degree, self.gamma_rho, self.heads)

    def clone(self) -> "IcmParams":
        return IcmParams({k: v.clone() for k, v in self.tensors.items()},
                         self.feature_channels, self.sh_degree, self.gamma_rho, self.heads)

    def trainable(self) -> dict[str, torch.Tensor]:
        return dict(self.tensors)


def init_icm(feature_channels: int = 64, sh_degree: int = 1, seed: int = 0,
             dtype: torch.dtype = torch.float32, hidden: int = 32,
             c_prime: int = 32, heads: int = 2,
             gamma_rho: float = GAMMA_RHO) -> IcmParams:
    gen = torch.Generator().manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}

    def conv(name: str, out_ch: int, in_ch: int) -> None:
        bound = 1.0 / (in_ch * 9) ** 0.5
        w = torch.empty(out_ch, in_ch, 3, 3, dtype=torch.float64)
        w.uniform_(-bound, bound, generator=gen)
        tensors[f"{name}.w"] = w.to(dtype)
        tensors[f"{name}.b"] = torch.zeros(out_ch, dtype=dtype)

    prev = 6  # dark + reference slot, zeros when no reference is given
    for i, ch in enumerate(STYLE_CHANNELS, start=1):
        conv(f"style{i}", ch, prev)
        prev = ch
    bound = 1.0 / prev ** 0.5
    fc = torch.empty(1 + S_LATENT_DIM, prev, dtype=torch.float64)
    fc.uniform_(-bound, bound, generator=gen)
    tensors["style.fc.w"] = fc.to(dtype)
    tensors["style.fc.b"] = torch.zeros(1 + S_LATENT_DIM, dtype=dtype)

    attn = init_attention(feature_channels, feature_channels, c_prime=c_prime,
                          heads=heads, seed=seed + 1, dtype=dtype)
    for k, v in attn.tensors().items():
        tensors[f"fgca.{k}"] = v

    n = num_sh_coeffs(sh_degree)
    conv("gain1", hidden, 2 * feature_channels)
    conv("gain2", 3, hidden)
    conv("lat1", hidden, 2 * feature_channels + S_LATENT_DIM)
    conv("lat2", 3 * n, hidden)
    conv("rho1", hidden, 2 * feature_channels + S_LATENT_DIM)
    conv("rho2", 1, hidden)
    return IcmParams(tensors, feature_channels, sh_degree, gamma_rho, heads)


def _conv(x: torch.Tensor, t: dict[str, torch.Tensor], name: str, stride: int = 1) -> torch.Tensor:
    return F.conv2d(x, t[f"{name}.w"], t[f"{name}.b"], stride=stride, padding=1)


def _lift(m: torch.Tensor, out_hw: tuple[int, int],
          stride: int = 4) -> torch.Tensor:
    """Upsample a (1, C, h, w) feature-rate map by the feature stride and crop
    to the image grid, mirroring the predictor's pixel alignment."""
    big = F.interpolate(m, scale_factor=stride, mode="bilinear",
                        align_corners=False)
    if big.shape[-2] < out_hw[0] or big.shape[-1] < out_hw[1]:
        raise ValueError("modulation map smaller than requested resolution")
    return big[..., :out_hw[0], :out_hw[1]]


def predict_style(dark: torch.Tensor, reference: torch.Tensor | None,
                  params: IcmParams) -> StyleCode:
    """Encode a dark view (and optional reference) into a style code.

    The reference occupies three extra input channels; when absent they are
    zeros, which keeps inference reference-free with the same weights.
    """
    if dark.ndim != 3 or dark.shape[-1] != 3:
        raise ValueError("dark image must be (H, W, 3)")
    if not torch.isfinite(dark).all():
        raise ValueError("non-finite dark image")
    dtype = params.tensors["style1.w"].dtype
    x = dark.permute(2, 0, 1).to(dtype)
    if reference is not None:
        if reference.shape != dark.shape:
            raise ValueError("reference shape must match dark image")
        if not torch.isfinite(reference).all():
            raise ValueError("non-finite reference image")
        r = reference.permute(2, 0, 1).to(dtype)
    else:
        r = torch.zeros_like(x)
    h = torch.cat([x, r], dim=0)[None]
    for i in range(1, len(STYLE_CHANNELS) + 1):
        h = torch.relu(_conv(h, params.tensors, f"style{i}", stride=2))
    pooled = h.mean(dim=(2, 3))[0]
    out = params.tensors["style.fc.w"] @ pooled + params.tensors["style.fc.b"]
    return StyleCode(out[0], out[1:])


def low_frequency_features(f_refine: torch.Tensor, params: IcmParams) -> torch.Tensor:
    """f_LL: the refined features cross-attended onto their own LL band."""
    return fgca(f_refine, dwt2(f_refine).ll, params.attention())


def global_enhance(f_ll: torch.Tensor, style: StyleCode, f_refine: torch.Tensor,
                   params: IcmParams,
                   out_hw: tuple[int, int] | None = None) -> GlobalModulation:
    """Dual-branch residuals for one view's feature grid.

    Brightness branch: dsh_DC = s_bright * softplus(gain(features)), per color,
    zero on higher SH orders, so the DC residual is elementwise non-decreasing
    in s_bright by construction.  Density increment is softplus-positive and
    deliberately independent of s_bright: sweeping brightness then never moves
    compositing weights, which makes sweep luminance monotone end to end.

    out_hw bilinearly lifts the modulation maps to the pixel grid so one row
    lines up with each pixel-aligned primitive; interpolation is convex, so
    gain and drho stay strictly positive and the monotonicity survives.
    """
    if f_ll.shape != f_refine.shape:
        raise ValueError("f_ll / f_refine shape mismatch")
    t = params.tensors
    n = num_sh_coeffs(params.sh_degree)
    base = torch.cat([f_refine, f_ll], dim=0)[None]

    gain = F.softplus(_conv(torch.relu(_conv(base, t, "gain1")), t, "gain2"))

    lat_map = style.s_latent.reshape(-1, 1, 1).expand(S_LATENT_DIM, *f_refine.shape[1:])
    cond = torch.cat([base[0], lat_map.to(f_refine.dtype)], dim=0)[None]
    dsh_l = _conv(torch.relu(_conv(cond, t, "lat1")), t, "lat2")
    drho = F.softplus(_conv(torch.relu(_conv(cond, t, "rho1")), t, "rho2"))

    if out_hw is not None:
        gain, dsh_l, drho = (
            _lift(m, out_hw) for m in (gain, dsh_l, drho))
    gain, dsh_l, drho = gain[0], dsh_l[0], drho[0, 0]
    h, w = gain.shape[-2:]
    n_prims = h * w

    dc = style.s_bright * gain                       # (3, H, W)
    dsh_b = torch.zeros(3, n, h, w, dtype=f_refine.dtype)
    dsh_b = torch.cat([dc[:, None], dsh_b[:, 1:]], dim=1) if n > 1 else dc[:, None]
    dsh_b = dsh_b.permute(2, 3, 0, 1).reshape(n_prims, 3, n)
    dsh_l = dsh_l.reshape(3, n, h, w).permute(2, 3, 0, 1).reshape(n_prims, 3, n)
    return GlobalModulation(dsh_b, dsh_l, drho.reshape(n_prims), params.gamma_rho)


def apply_global(field: GaussianField, m: GlobalModulation) -> GaussianField:
    """Residual SH update and exponential density decay; geometry untouched.

    The opacity attribute is left as-is; stages that need the modulated
    opacity derive it from density through the shared map alpha = 1-exp(-rho).
    """
    if m.drho.shape[0] != len(field):
        raise ValueError("modulation count does not match field")
    if m.dsh_bright.shape[-1] != field.sh.shape[-1]:
        raise ValueError("SH degree mismatch")
    return GaussianField(
        mu=field.mu, rot=field.rot, scale=field.scale,
        density=field.density * torch.exp(-m.gamma_rho * m.drho),
        opacity=field.opacity,
        sh=field.sh + m.dsh,
        provenance="global-enhanced",
    )


def density_to_opacity(rho: torch.Tensor) -> torch.Tensor:
    """Shared optical-density map alpha = 1 - exp(-rho)."""
    return 1.0 - torch.exp(-rho)


def dominance_loss(dsh_bright: torch.Tensor, dsh_latent: torch.Tensor,
                   lambda_dom: float = LAMBDA_DOM, eps: float = DOM_EPS) -> torch.Tensor:
    """lambda * |latent|_1 / (|bright|_1 + eps): cheap to shrink the latent
    branch, so explicit brightness ends up carrying exposure."""
    if dsh_bright.shape != dsh_latent.shape:
        raise ValueError("branch shapes differ")
    return lambda_dom * dsh_latent.abs().sum() / (dsh_bright.abs().sum() + eps)
