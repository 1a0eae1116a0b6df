"""Per-primitive appearance refinement on top of the global enhancement.

Each primitive is described locally (multi-view pyramid samples of the
high-frequency feature band plus geometric cues) and globally (current SH,
opacity, style).  Three factor branches emit strength scalars and embeddings;
windowed 3D cross-attention lets every primitive query its spatial
neighborhood with the factor embeddings as keys and the global descriptors
as values.  Band-weighted heads decode SH and opacity residuals.  Residual
heads start at zero, so an untrained refinement pass is an exact no-op on SH
and maps opacity straight through the shared density map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .gaussians import Camera, GaussianField, world_to_cam
from .icm import S_LATENT_DIM, StyleCode, density_to_opacity
from .predictor import FEATURE_STRIDE
from .wavelets import AttentionParams, dwt2, fgca, init_attention

# SH order bands: DC / degree-1 / degree-2 coefficient counts
BAND_WIDTHS = (1, 3, 5)
EMBED_DIM = 16


@dataclass(frozen=True)
class BandWeights:
    low: float = 1.0
    mid: float = 0.5
    high: float = 0.25
    alpha: float = 0.1


@dataclass(frozen=True)
class ArmConfig:
    feature_channels: int = 64
    sh_degree: int = 1
    levels: int = 2
    window_count: int = 8
    n_views: int = 2
    attn_dim: int = 32
    out_dim: int = 32
    hidden: int = 32
    heads: int = 2
    weights: BandWeights = BandWeights()

    def __post_init__(self) -> None:
        if not 0 <= self.sh_degree <= 2:
            raise ValueError("refinement bands cover SH degrees 0..2 only")
        if self.levels < 1 or self.window_count < 1 or self.n_views < 1:
            raise ValueError("levels, window_count and n_views must be >= 1")

    @property
    def n_coeffs(self) -> int:
        return (self.sh_degree + 1) ** 2

    @property
    def d_sample(self) -> int:
        return self.n_views * self.levels * self.feature_channels

    @property
    def d_local(self) -> int:
        return self.d_sample + self.n_views * 4     # + per-view depth, direction

    @property
    def d_global(self) -> int:
        return 3 * self.n_coeffs + 1 + 1 + S_LATENT_DIM

    @property
    def d_f_l(self) -> int:
        return self.d_sample + 1 + S_LATENT_DIM     # + style code

    @property
    def d_f_m(self) -> int:
        return self.d_sample + self.n_views * 4     # + geometric cues

    @property
    def d_f_v(self) -> int:
        return self.d_sample + self.n_views * 3     # + view directions


# ---------------------------------------------------------------- pyramid

def build_pyramid(f_hf: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Level 0 is the input; each next level is 2x average-pooled."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if min(f_hf.shape[-2:]) // 2 ** (levels - 1) < 1:
        raise ValueError("levels exceed log2 of the smallest spatial dim")
    out = [f_hf]
    for _ in range(levels - 1):
        out.append(F.avg_pool2d(out[-1][None], 2)[0])
    return out


def sample_multiview(x: torch.Tensor, pyramids: list[list[torch.Tensor]],
                     cams: list[Camera]) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear samples of every pyramid level at each point's projection.

    Returns (f_sample (N, K*levels*C), valid (N, K)).  Concatenation order is
    view-major, then level.  A view outside whose frustum a point falls
    contributes exact zeros for all its levels.
    """
    if len(pyramids) != len(cams):
        raise ValueError("one pyramid per camera required")
    n = x.shape[0]
    feats, valids = [], []
    for pyr, cam in zip(pyramids, cams):
        cam = cam.to(x.dtype)
        p = world_to_cam(x, cam)
        z = p[:, 2]
        zc = z.clamp(min=1e-6)
        u = cam.fx * p[:, 0] / zc + cam.cx
        v = cam.fy * p[:, 1] / zc + cam.cy
        inb = ((z > cam.near) & (z < cam.far)
               & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height))
        valids.append(inb)
        gate = inb.to(x.dtype)[:, None]
        for lvl, fm in enumerate(pyr):
            stride = FEATURE_STRIDE * 2 ** lvl
            h, w = fm.shape[-2:]
            gx = 2.0 * (u / stride) / w - 1.0
            gy = 2.0 * (v / stride) / h - 1.0
            grid = torch.stack([gx, gy], dim=-1).reshape(1, 1, n, 2)
            s = F.grid_sample(fm[None], grid, mode="bilinear",
                              padding_mode="zeros", align_corners=False)
            feats.append(s[0, :, 0, :].T * gate)
    return torch.cat(feats, dim=1), torch.stack(valids, dim=1)


def geometric_cues(x: torch.Tensor, cams: list[Camera]) -> torch.Tensor:
    """Per-view depth and unit world-frame direction camera->point, (N, K*4)."""
    cues = []
    for cam in cams:
        cam = cam.to(x.dtype)
        z = world_to_cam(x, cam)[:, 2:3]
        d = x - cam.position
        d = d / torch.linalg.norm(d, dim=-1, keepdim=True).clamp(min=1e-8)
        cues.append(torch.cat([z, d], dim=1))
    return torch.cat(cues, dim=1)


# ---------------------------------------------------------------- windows

@dataclass
class WindowPartition:
    """Flat voxel ids over a uniform grid spanning the field bounds."""

    wid: torch.Tensor   # (N,) long
    window_count: int
    lo: torch.Tensor
    hi: torch.Tensor


def partition_windows(field: GaussianField, window_count: int = 8) -> WindowPartition:
    """Half-open voxel assignment; points on the top bound join the last cell,
    zero-extent axes collapse to a single slab."""
    if window_count < 1:
        raise ValueError("window_count must be >= 1")
    lo, hi = field.bounds
    extent = hi - lo
    idx = torch.zeros(len(field), 3, dtype=torch.long)
    for ax in range(3):
        if extent[ax] > 0:
            frac = (field.mu[:, ax] - lo[ax]) / extent[ax]
            idx[:, ax] = (frac * window_count).floor().long().clamp(0, window_count - 1)
    flat = (idx[:, 0] * window_count + idx[:, 1]) * window_count + idx[:, 2]
    return WindowPartition(flat, window_count, lo, hi)


@dataclass
class WcaParams:
    wq: torch.Tensor  # (d_attn, d_q)
    wk: torch.Tensor  # (d_attn, d_k)
    wv: torch.Tensor  # (d_attn, d_v)
    wo: torch.Tensor  # (d_out, d_attn)
    heads: int = 2

    def __post_init__(self) -> None:
        if self.wq.shape[0] % self.heads != 0:
            raise ValueError("attention dim not divisible by heads")


def wca(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
        part: WindowPartition, params: WcaParams) -> torch.Tensor:
    """Cross-attention restricted to each primitive's window.

    Runs as padded per-window batches; masked lanes get -1e30 logits so their
    softmax weight underflows to exactly zero and no NaN can enter autograd.
    """
    n = q.shape[0]
    if not (k.shape[0] == n and v.shape[0] == n and part.wid.shape[0] == n):
        raise ValueError("per-primitive rows misaligned")
    d_attn = params.wq.shape[0]
    nh = params.heads
    dh = d_attn // nh
    qp = q @ params.wq.T
    kp = k @ params.wk.T
    vp = v @ params.wv.T

    order = torch.argsort(part.wid, stable=True)
    wid_sorted = part.wid[order]
    _, counts = torch.unique_consecutive(wid_sorted, return_counts=True)
    n_win = counts.numel()
    l_max = int(counts.max())
    offsets = torch.cumsum(counts, 0) - counts
    widx = torch.repeat_interleave(torch.arange(n_win), counts)
    rank = torch.arange(n) - offsets[widx]

    def pad(t: torch.Tensor) -> torch.Tensor:
        out = torch.zeros(n_win, l_max, t.shape[1], dtype=t.dtype)
        out[widx, rank] = t[order]
        return out.reshape(n_win, l_max, nh, dh).permute(0, 2, 1, 3)

    occupied = torch.arange(l_max)[None, :] < counts[:, None]   # (W, Lmax)
    logits = pad(qp) @ pad(kp).transpose(-1, -2) / math.sqrt(d_attn)
    logits = torch.where(occupied[:, None, None, :], logits,
                         torch.tensor(-1e30, dtype=logits.dtype))
    attended = torch.softmax(logits, dim=-1) @ pad(vp)           # (W, nh, Lmax, dh)
    attended = attended.permute(0, 2, 1, 3).reshape(n_win, l_max, d_attn)
    flat = attended[widx, rank]
    unsort = torch.empty_like(order)
    unsort[order] = torch.arange(n)
    return flat[unsort] @ params.wo.T


# ---------------------------------------------------------------- branches

@dataclass
class FactorOutput:
    a_l: torch.Tensor  # (N,) in (0, 1)
    a_m: torch.Tensor  # (N,) in (0, 1)
    a_v: torch.Tensor  # (N,) in (-1, 1)
    e_l: torch.Tensor  # (N, EMBED_DIM)
    e_m: torch.Tensor
    e_v: torch.Tensor
    a_x: torch.Tensor  # (N,) fused scalar


def _mlp(x: torch.Tensor, t: dict[str, torch.Tensor], name: str) -> torch.Tensor:
    h = torch.relu(x @ t[f"{name}1.w"].T + t[f"{name}1.b"])
    return h @ t[f"{name}2.w"].T + t[f"{name}2.b"]


def factor_branches(f_l: torch.Tensor, f_m: torch.Tensor, f_v: torch.Tensor,
                    params: "ArmParams") -> FactorOutput:
    """Scalar strength + embedding per factor; an MLP fuses the scalars."""
    t = params.tensors
    out_l = _mlp(f_l, t, "phiL")
    out_m = _mlp(f_m, t, "phiM")
    out_v = _mlp(f_v, t, "phiV")
    a_l = torch.sigmoid(out_l[:, 0])
    a_m = torch.sigmoid(out_m[:, 0])
    a_v = torch.tanh(out_v[:, 0])
    fused = _mlp(torch.stack([a_l, a_m, a_v], dim=1), t, "psi")[:, 0]
    return FactorOutput(a_l, a_m, a_v, out_l[:, 1:], out_m[:, 1:], out_v[:, 1:], fused)


# ---------------------------------------------------------------- residuals

@dataclass
class LocalResiduals:
    """Band-weighted SH residuals (tuple ordered low/mid/high) and an opacity
    residual; widths follow the configured SH degree."""

    bands: tuple[torch.Tensor, ...]
    dalpha: torch.Tensor

    def __post_init__(self) -> None:
        widths = tuple(b.shape[-1] for b in self.bands)
        if widths != BAND_WIDTHS[:len(widths)]:
            raise ValueError(f"band widths {widths} not a prefix of {BAND_WIDTHS}")
        for b in self.bands:
            if not torch.isfinite(b).all():
                raise ValueError("non-finite SH residual")
        if not torch.isfinite(self.dalpha).all():
            raise ValueError("non-finite opacity residual")

    @property
    def dsh(self) -> torch.Tensor:
        return torch.cat(self.bands, dim=-1)


def decode_residuals(f_low: torch.Tensor, f_mid: torch.Tensor, f_high: torch.Tensor,
                     params: "ArmParams",
                     a_x: torch.Tensor | None = None) -> LocalResiduals:
    """Band residual l = lambda_l * head_l(f_band), opacity from the mid band;
    the fused factor scalar, when given, scales everything multiplicatively."""
    cfg = params.cfg
    t = params.tensors
    w = cfg.weights
    scale = 1.0 if a_x is None else a_x[:, None, None]
    feats = (f_low, f_mid, f_high)[:cfg.sh_degree + 1]
    lams = (w.low, w.mid, w.high)
    bands = []
    for lvl, feat in enumerate(feats):
        head = feat @ t[f"hsh{lvl}.w"].T + t[f"hsh{lvl}.b"]
        bands.append(lams[lvl] * scale * head.reshape(-1, 3, BAND_WIDTHS[lvl]))
    dalpha = w.alpha * (f_mid @ t["halpha.w"].T + t["halpha.b"])[:, 0]
    if a_x is not None:
        dalpha = dalpha * a_x
    return LocalResiduals(tuple(bands), dalpha)


def apply_local(field_global: GaussianField, r: LocalResiduals) -> GaussianField:
    """Map density to opacity, then add the clipped residuals; geometry and
    density pass through untouched."""
    if r.dalpha.shape[0] != len(field_global):
        raise ValueError("residual count does not match field")
    if r.dsh.shape[-1] != field_global.sh.shape[-1]:
        raise ValueError("SH degree mismatch")
    alpha = density_to_opacity(field_global.density)
    return GaussianField(
        mu=field_global.mu, rot=field_global.rot, scale=field_global.scale,
        density=field_global.density,
        opacity=(alpha + r.dalpha).clamp(0.0, 1.0),
        sh=field_global.sh + r.dsh,
        provenance="bright",
    )


# ---------------------------------------------------------------- params

@dataclass
class ArmParams:
    tensors: dict[str, torch.Tensor]
    cfg: ArmConfig

    def attention(self) -> AttentionParams:
        t = self.tensors
        return AttentionParams(t["fgca.wq"], t["fgca.wk"], t["fgca.wv"], t["fgca.wo"],
                               heads=self.cfg.heads)

    def wca_params(self, kappa: str) -> WcaParams:
        t = self.tensors
        return WcaParams(t[f"wca{kappa}.wq"], t[f"wca{kappa}.wk"],
                         t[f"wca{kappa}.wv"], t[f"wca{kappa}.wo"], heads=self.cfg.heads)

    def to(self, dtype: torch.dtype) -> "ArmParams":
        return ArmParams({k: v.to(dtype) for k, v in self.tensors.items()}, self.cfg)

    def clone(self) -> "ArmParams":
        return ArmParams({k: v.clone() for k, v in self.tensors.items()}, self.cfg)

    def trainable(self) -> dict[str, torch.Tensor]:
        return dict(self.tensors)


def init_arm(cfg: ArmConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ArmParams:
    """Residual heads start at exactly zero (safe start); everything else uses
    seeded uniform(+-1/sqrt(fan_in))."""
    gen = torch.Generator().manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}

    def lin(name: str, out_d: int, in_d: int, zero: bool = False) -> None:
        if zero:
            tensors[f"{name}.w"] = torch.zeros(out_d, in_d, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(in_d)
            w = torch.empty(out_d, in_d, dtype=torch.float64)
            w.uniform_(-bound, bound, generator=gen)
            tensors[f"{name}.w"] = w.to(dtype)
        tensors[f"{name}.b"] = torch.zeros(out_d, dtype=dtype)

    c = cfg.feature_channels
    attn = init_attention(c, 3 * c, c_prime=cfg.attn_dim, heads=cfg.heads,
                          seed=seed + 1, dtype=dtype)
    for k, v in attn.tensors().items():
        tensors[f"fgca.{k}"] = v

    lin("phiL1", cfg.hidden, cfg.d_f_l)
    lin("phiL2", 1 + EMBED_DIM, cfg.hidden)
    lin("phiM1", cfg.hidden, cfg.d_f_m)
    lin("phiM2", 1 + EMBED_DIM, cfg.hidden)
    lin("phiV1", cfg.hidden, cfg.d_f_v)
    lin("phiV2", 1 + EMBED_DIM, cfg.hidden)
    lin("psi1", cfg.hidden, 3)
    lin("psi2", 1, cfg.hidden)

    def mat(name: str, out_d: int, in_d: int) -> None:
        bound = 1.0 / math.sqrt(in_d)
        w = torch.empty(out_d, in_d, dtype=torch.float64)
        w.uniform_(-bound, bound, generator=gen)
        tensors[name] = w.to(dtype)

    for kappa in ("L", "M", "V"):
        mat(f"wca{kappa}.wq", cfg.attn_dim, cfg.d_local)
        mat(f"wca{kappa}.wk", cfg.attn_dim, EMBED_DIM)
        mat(f"wca{kappa}.wv", cfg.attn_dim, cfg.d_global)
        mat(f"wca{kappa}.wo", cfg.out_dim, cfg.attn_dim)

    for lvl in range(cfg.sh_degree + 1):
        lin(f"hsh{lvl}", 3 * BAND_WIDTHS[lvl], cfg.out_dim, zero=True)
    lin("halpha", 1, cfg.out_dim, zero=True)
    return ArmParams(tensors, cfg)


# ---------------------------------------------------------------- pipeline

def high_frequency_features(f_refine: torch.Tensor, params: ArmParams) -> torch.Tensor:
    """f_HF: refined features cross-attended onto their stacked HL/LH/HH bands."""
    s = dwt2(f_refine)
    return fgca(f_refine, torch.cat([s.hl, s.lh, s.hh], dim=0), params.attention())


def refine_field(field_global: GaussianField, style: StyleCode,
                 features: list[torch.Tensor], cams: list[Camera],
                 params: ArmParams) -> tuple[GaussianField, LocalResiduals, FactorOutput]:
    """Full refinement pass over an enhanced field.

    features are the per-view refined maps from prediction; every primitive
    samples every view.  Returns the bright field plus the residuals and
    factor outputs for loss terms.
    """
    cfg = params.cfg
    if len(features) != cfg.n_views or len(cams) != cfg.n_views:
        raise ValueError(f"expected {cfg.n_views} views")
    n = len(field_global)
    dtype = field_global.mu.dtype

    pyramids = [build_pyramid(high_frequency_features(f, params), cfg.levels)
                for f in features]
    f_sample, _ = sample_multiview(field_global.mu, pyramids, cams)
    cues = geometric_cues(field_global.mu, cams)
    dirs = torch.cat([cues[:, i * 4 + 1: i * 4 + 4] for i in range(cfg.n_views)], dim=1)

    style_vec = torch.cat([style.s_bright.reshape(1), style.s_latent]).to(dtype)
    style_rows = style_vec[None].expand(n, -1)
    f_local = torch.cat([f_sample, cues], dim=1)
    f_global = torch.cat([field_global.sh.reshape(n, -1),
                          density_to_opacity(field_global.density)[:, None],
                          style_rows], dim=1)

    factors = factor_branches(torch.cat([f_sample, style_rows], dim=1),
                              torch.cat([f_sample, cues], dim=1),
                              torch.cat([f_sample, dirs], dim=1), params)
    part = partition_windows(field_global, cfg.window_count)
    f_low = wca(f_local, factors.e_l, f_global, part, params.wca_params("L"))
    f_mid = wca(f_local, factors.e_m, f_global, part, params.wca_params("M"))
    f_high = wca(f_local, factors.e_v, f_global, part, params.wca_params("V"))
    residuals = decode_residuals(f_low, f_mid, f_high, params, a_x=factors.a_x)
    return apply_local(field_global, residuals), residuals, factors
