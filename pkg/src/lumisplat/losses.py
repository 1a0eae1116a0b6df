"""Loss library and supervision oracles for the three training stages.

All losses are plain torch expressions over render outputs and targets, so
autograd provides their gradients.  The perceptual distance is a fixed,
seeded random conv stack (frozen at init and stored with checkpoints); the
illumination decomposition and normal supervision come from deterministic
closed-form oracles rather than pretrained networks.

Normal maps throughout use the view convention: unit vectors in camera
coordinates with +z pointing toward the camera, so a fronto-parallel surface
reads (0, 0, 1).  `view_normals` converts the renderer's world-frame,
camera-facing normals into this frame.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .gaussians import Camera
from .icm import GlobalModulation, dominance_loss
from .rasterizer import RenderOutput

LUMA_WEIGHTS = (0.299, 0.587, 0.114)   # BT.601
SAT_MASK_MIN_VALUE = 0.05


@dataclass(frozen=True)
class LossWeights:
    lam_mse: float = 1.0
    lam_grad: float = 0.1
    lam_depth: float = 0.05
    lam_normal: float = 0.1
    lam_style: float = 1.0
    lam_lum: float = 0.1
    lam_dom: float = 0.01
    lam_l: float = 0.1
    lam_m: float = 0.1
    lam_x: float = 0.1
    lam_lpips: float = 0.05
    alpha_enh: float = 1.0
    lam_hsv: float = 0.2

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def luminance(img: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype)
    return img @ w


def _forward_diffs(m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return m[:, 1:] - m[:, :-1], m[1:, :] - m[:-1, :]


# ---------------------------------------------------------------- geometry

def gradient_loss(a_rgb: torch.Tensor, b_rgb: torch.Tensor) -> torch.Tensor:
    """L1 between grayscale forward-difference gradients."""
    gax, gay = _forward_diffs(luminance(a_rgb))
    gbx, gby = _forward_diffs(luminance(b_rgb))
    return (gax - gbx).abs().mean() + (gay - gby).abs().mean()


def depth_smoothness(depth: torch.Tensor, guide_rgb: torch.Tensor) -> torch.Tensor:
    """Depth gradients damped where the guide image has edges."""
    dx, dy = _forward_diffs(depth)
    gx, gy = _forward_diffs(luminance(guide_rgb))
    return (dx.abs() * torch.exp(-gx.abs())).mean() \
        + (dy.abs() * torch.exp(-gy.abs())).mean()


def view_normals(n_world: torch.Tensor, cam: Camera) -> torch.Tensor:
    """World normals -> view convention (+z toward the camera)."""
    r = cam.R.to(n_world.dtype)
    return -torch.einsum("...j,ij->...i", n_world, r)


def normal_loss(n_pred_view: torch.Tensor, n_gt_view: torch.Tensor) -> torch.Tensor:
    """1 - mean cosine over pixels where the ground truth is defined."""
    valid = torch.linalg.norm(n_gt_view, dim=-1) > 0.5
    if not bool(valid.any()):
        return torch.zeros((), dtype=n_pred_view.dtype)
    n = n_pred_view / torch.linalg.norm(n_pred_view, dim=-1, keepdim=True).clamp(min=1e-8)
    cos = (n * n_gt_view).sum(-1)
    return 1.0 - cos[valid].mean()


def loss_geo(render: RenderOutput, target_dark: torch.Tensor,
             gt_normals_view: torch.Tensor | None, cam: Camera,
             w: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Stage-one objective: photometric + gradient + depth-smoothness + normal."""
    if render.rgb_linear.shape != target_dark.shape:
        raise ValueError("render/target shape mismatch")
    mse = ((render.rgb_linear - target_dark) ** 2).mean()
    grad = gradient_loss(render.rgb_linear, target_dark)
    depth = depth_smoothness(render.depth, target_dark)
    total = w.lam_mse * mse + w.lam_grad * grad + w.lam_depth * depth
    comps = {"mse": _f(mse), "grad": _f(grad), "depth": _f(depth)}
    if gt_normals_view is not None:
        if gt_normals_view.shape != render.normal.shape:
            raise ValueError("normal map shape mismatch")
        nrm = normal_loss(view_normals(render.normal, cam), gt_normals_view)
        total = total + w.lam_normal * nrm
        comps["normal"] = _f(nrm)
    return total, comps


# ---------------------------------------------------------------- global

def pearson(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor | None:
    """Sample correlation; None when either side has (near-)zero variance."""
    xc = x - x.mean()
    yc = y - y.mean()
    den = xc.norm() * yc.norm()
    if float(den.detach()) < 1e-12:
        return None
    return (xc * yc).sum() / den


def loss_global(s_bright: torch.Tensor, d_targets: torch.Tensor,
                dlum: torch.Tensor, mods: list[GlobalModulation],
                w: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Style regression + brightness correlation + branch dominance."""
    if s_bright.shape != d_targets.shape:
        raise ValueError("style/target shape mismatch")
    style = ((s_bright - d_targets) ** 2).sum()
    total = w.lam_style * style
    comps = {"style": _f(style)}
    if s_bright.numel() < 2:
        warnings.warn("batch of 1: correlation term skipped")
    else:
        r = pearson(dlum.to(s_bright.dtype), s_bright)
        if r is None:
            warnings.warn("degenerate batch variance: correlation term skipped")
        else:
            corr = 1.0 - r
            total = total + w.lam_lum * corr
            comps["corr"] = _f(corr)
    if mods:
        dom = sum(dominance_loss(m.dsh_bright, m.dsh_latent, lambda_dom=1.0)
                  for m in mods) / len(mods)
        total = total + w.lam_dom * dom
        comps["dom"] = _f(dom)
    return total, comps


# ---------------------------------------------------------------- physical

@dataclass
class DecompositionTargets:
    illum: torch.Tensor       # (H, W) in [0, 1]
    refl: torch.Tensor        # (H, W) in [0, 1]
    illum_diff: torch.Tensor  # (H, W) in [0, 1]

    def __post_init__(self) -> None:
        for name in ("illum", "refl", "illum_diff"):
            t = getattr(self, name)
            if float(t.min()) < 0 or float(t.max()) > 1:
                raise ValueError(f"{name} outside [0, 1]")


def loss_phys(a_l: torch.Tensor, a_m: torch.Tensor, a_x: torch.Tensor,
              targets: DecompositionTargets,
              w: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """L1 between splatted factor maps and the decomposition targets."""
    for a, t in ((a_l, targets.illum), (a_m, targets.refl), (a_x, targets.illum_diff)):
        if a.shape != t.shape:
            raise ValueError("factor map / target shape mismatch")
    t_l = (a_l - targets.illum).abs().mean()
    t_m = (a_m - targets.refl).abs().mean()
    t_x = (a_x - targets.illum_diff).abs().mean()
    total = w.lam_l * t_l + w.lam_m * t_m + w.lam_x * t_x
    return total, {"phys_l": _f(t_l), "phys_m": _f(t_m), "phys_x": _f(t_x)}


def _gaussian_blur(m: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable reflect-padded blur of a (H, W) map."""
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=m.dtype)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    k = k / k.sum()
    x = m[None, None]
    x = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    x = F.conv2d(x, k.reshape(1, 1, 1, -1))
    x = F.pad(x, (0, 0, radius, radius), mode="reflect")
    x = F.conv2d(x, k.reshape(1, 1, -1, 1))
    return x[0, 0]


def decomposition_oracle(img: torch.Tensor, img_ref: torch.Tensor) -> DecompositionTargets:
    """Retinex-style supervision: blurred max-channel illumination, luminance
    ratio reflectance, and a max-normalized illumination difference."""
    if img.shape != img_ref.shape:
        raise ValueError("image shape mismatch")
    sigma = 0.03 * img.shape[1]
    illum_ref = _gaussian_blur(img_ref.max(dim=-1).values, sigma).clamp(0.0, 1.0)
    illum_in = _gaussian_blur(img.max(dim=-1).values, sigma).clamp(0.0, 1.0)
    refl = (luminance(img_ref) / illum_ref.clamp(min=1e-3)).clamp(0.0, 1.0)
    diff = (illum_ref - illum_in).abs()
    peak = float(diff.max())
    if peak > 1e-6:
        diff = diff / peak
    else:
        diff = torch.zeros_like(diff)
    return DecompositionTargets(illum_ref, refl, diff)


def normals_from_depth(depth: torch.Tensor, cam: Camera
                       ) -> tuple[torch.Tensor, torch.Tensor]:
    """View-frame normals from a depth map via the cross product of the
    backprojected surface derivatives.  Returns (normals, valid); degenerate
    pixels (flat gradient or depth outside (near, far)) are flagged invalid
    and zeroed."""
    h, w = depth.shape
    ys, xs = torch.meshgrid(torch.arange(h, dtype=depth.dtype),
                            torch.arange(w, dtype=depth.dtype), indexing="ij")
    px = (xs + 0.5 - cam.cx) / cam.fx
    py = (ys + 0.5 - cam.cy) / cam.fy
    p = torch.stack([px * depth, py * depth, depth], dim=-1)
    du = torch.gradient(p, dim=1)[0]
    dv = torch.gradient(p, dim=0)[0]
    n = torch.cross(du, dv, dim=-1)
    n = n * torch.where(n[..., 2:3] < 0, -1.0, 1.0)
    length = torch.linalg.norm(n, dim=-1)
    valid = (length > 1e-12) & (depth > cam.near) & (depth < cam.far)
    n = torch.where(valid[..., None], n / length.clamp(min=1e-12)[..., None],
                    torch.zeros_like(n))
    return n, valid


# ---------------------------------------------------------------- appearance

def rgb_to_hsv(img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable-almost-everywhere HSV; input clamped to [0, 1], hue in
    [0, 1) with ties broken r > g > b."""
    x = img.clamp(0.0, 1.0)
    r, g, b = x.unbind(-1)
    maxc = x.max(dim=-1).values
    minc = x.min(dim=-1).values
    delta = maxc - minc
    safe = delta.clamp(min=1e-8)
    h_r = ((g - b) / safe) % 6.0
    h_g = (b - r) / safe + 2.0
    h_b = (r - g) / safe + 4.0
    h = torch.where(maxc == r, h_r, torch.where(maxc == g, h_g, h_b)) / 6.0
    h = torch.where(delta > 0, h, torch.zeros_like(h))
    s = torch.where(maxc > 0, delta / maxc.clamp(min=1e-8), torch.zeros_like(maxc))
    return h, s, maxc


def circular_hue_l1(ha: torch.Tensor, hb: torch.Tensor) -> torch.Tensor:
    d = (ha - hb).abs()
    return torch.minimum(d, 1.0 - d).mean()


def hsv_loss(a_rgb: torch.Tensor, b_rgb: torch.Tensor) -> tuple[torch.Tensor, ...]:
    ha, sa, va = rgb_to_hsv(a_rgb)
    hb, sb, vb = rgb_to_hsv(b_rgb)
    hue = circular_hue_l1(ha, hb)
    mask = (va >= SAT_MASK_MIN_VALUE) & (vb >= SAT_MASK_MIN_VALUE)
    if bool(mask.any()):
        sat = (sa - sb).abs()[mask].mean()
    else:
        sat = torch.zeros((), dtype=a_rgb.dtype)
    val = (va - vb).abs().mean()
    return hue, sat, val


def init_lpips_proxy(seed: int = 0, dtype: torch.dtype = torch.float32
                     ) -> dict[str, torch.Tensor]:
    """Fixed random 3-conv feature stack; weights are frozen for the lifetime
    of a model and shipped inside its checkpoint."""
    gen = torch.Generator().manual_seed(seed)
    shapes = {"perc1.w": (8, 3, 3, 3), "perc2.w": (16, 8, 3, 3), "perc3.w": (32, 16, 3, 3)}
    out = {}
    for name, shape in shapes.items():
        bound = 1.0 / math.sqrt(shape[1] * 9)
        w = torch.empty(shape, dtype=torch.float64)
        w.uniform_(-bound, bound, generator=gen)
        out[name] = w.to(dtype)
    return out


def lpips_proxy(a_rgb: torch.Tensor, b_rgb: torch.Tensor,
                params: dict[str, torch.Tensor]) -> torch.Tensor:
    """Mean-L1 distance between the random conv features of the two images."""
    if a_rgb.shape != b_rgb.shape:
        raise ValueError("image shape mismatch")

    def features(img: torch.Tensor) -> list[torch.Tensor]:
        x = img.permute(2, 0, 1)[None]
        feats = []
        for i, key in enumerate(("perc1.w", "perc2.w", "perc3.w")):
            x = torch.relu(F.conv2d(x, params[key].to(img.dtype), padding=1))
            feats.append(x)
            if i < 2:
                x = F.avg_pool2d(x, 2)
        return feats

    fa, fb = features(a_rgb), features(b_rgb)
    return sum((u - v).abs().mean() for u, v in zip(fa, fb))


def loss_appearance(rgb_dark: torch.Tensor, rgb_enh: torch.Tensor,
                    target_dark: torch.Tensor, target_bright: torch.Tensor,
                    w: LossWeights, perc: dict[str, torch.Tensor]
                    ) -> tuple[torch.Tensor, dict[str, float]]:
    """Photometric + perceptual on both branches; HSV consistency on the
    enhanced branch where color fidelity matters."""
    mse_d = ((rgb_dark - target_dark) ** 2).mean()
    mse_e = ((rgb_enh - target_bright) ** 2).mean()
    lp_d = lpips_proxy(rgb_dark, target_dark, perc)
    lp_e = lpips_proxy(rgb_enh, target_bright, perc)
    hue, sat, val = hsv_loss(rgb_enh, target_bright)
    total = (w.lam_mse * (mse_d + mse_e)
             + w.lam_lpips * (lp_d + w.alpha_enh * lp_e)
             + w.lam_hsv * (hue + sat + val))
    return total, {"mse_dark": _f(mse_d), "mse_enh": _f(mse_e),
                   "lpips_dark": _f(lp_d), "lpips_enh": _f(lp_e),
                   "hue": _f(hue), "sat": _f(sat), "val": _f(val)}
