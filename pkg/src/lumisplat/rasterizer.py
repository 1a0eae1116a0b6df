"""Differentiable Gaussian splatting rasterizer (CPU, autograd-backed).

Two routes share the same per-contribution arithmetic and compositing core:

- binned (production): per-primitive 3-sigma bounding boxes are expanded into
  (pixel, primitive) candidate entries, compacted, sorted per pixel in depth
  order, and scattered into a dense per-pixel layer tensor.
- naive (oracle): every (pixel, primitive) pair is evaluated on a dense grid
  with the same bbox membership test and response function.

Zero-alpha pad slots are exact arithmetic no-ops (cumprod pads multiply by
1.0, cumsum pads add 0.0, both under float64 accumulators), so the two
routes agree bitwise on small scenes; the oracle test pins that.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .gaussians import Camera, GaussianField, GaussianPrimitive, covariance_from, project, quat_to_rotmat, sh_eval


@dataclass(frozen=True)
class RenderConfig:
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.999
    termination: float = 1e-4   # stop compositing when transmittance drops below
    r_max: int = 32             # cap on bbox radius in pixels

    def __post_init__(self) -> None:
        if not 0 <= self.alpha_min < self.alpha_max <= 0.999:
            raise ValueError("need 0 <= alpha_min < alpha_max <= 0.999")
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")


DEFAULT_CONFIG = RenderConfig()


@dataclass
class RenderOutput:
    rgb: torch.Tensor         # (H, W, 3) clamped to [0, 1]
    rgb_linear: torch.Tensor  # (H, W, 3) pre-clamp compositing result; losses use this
    depth: torch.Tensor       # (H, W) expected depth, far where nothing splats
    normal: torch.Tensor      # (H, W, 3) weight-composited, re-normalized
    acc: torch.Tensor         # (H, W) accumulated opacity
    aux: torch.Tensor | None = None  # (H, W, C) weight-averaged extra channels


@dataclass
class GradientBundle:
    """Partials of a scalar image loss w.r.t. field parameters.

    density never enters rendering directly (opacity does), so its slot is
    zero here; enhancement modules chain density into opacity upstream.
    """
    mu: torch.Tensor
    rot: torch.Tensor
    scale: torch.Tensor
    density: torch.Tensor
    opacity: torch.Tensor
    sh: torch.Tensor


def primitive_normals(rot: torch.Tensor, scale: torch.Tensor, mu: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Rotated axis of the smallest scale, ties toward the highest axis index,
    sign-flipped to face the camera."""
    R = quat_to_rotmat(rot)
    idx = 2 - torch.argmin(scale.flip(-1), dim=-1)
    axes = torch.gather(R, 2, idx.view(-1, 1, 1).expand(-1, 3, 1)).squeeze(-1)
    to_cam = cam.position.to(mu.dtype) - mu
    sign = torch.where((axes * to_cam).sum(-1) < 0, -1.0, 1.0).to(mu.dtype)
    return axes * sign.unsqueeze(-1)


def normal_of_primitive(g: GaussianPrimitive, cam: Camera) -> torch.Tensor:
    return primitive_normals(g.rot.unsqueeze(0), g.scale.unsqueeze(0), g.mu.unsqueeze(0), cam)[0]


def _quad_form(a, b, c, dx, dy):
    # conic quadratic; both routes must share this exact expression tree
    return a * (dx * dx) + 2.0 * b * (dx * dy) + c * (dy * dy)


def _alpha_response(opacity, a, b, c, dx, dy, cfg: RenderConfig):
    return (opacity * torch.exp(-0.5 * _quad_form(a, b, c, dx, dy))).clamp(max=cfg.alpha_max)


class _Prepared:
    """Depth-sorted per-primitive render quantities shared by both routes."""

    __slots__ = ("n", "mean2d", "conic", "depth", "opacity", "color", "normal",
                 "aux", "x0", "x1", "y0", "y1")

    def __init__(self, field: GaussianField, cam: Camera, cfg: RenderConfig,
                 aux: torch.Tensor | None):
        dtype = field.mu.dtype
        # canonical normalization: gradients w.r.t. rot are taken through it
        rot = field.rot / torch.linalg.norm(field.rot, dim=-1, keepdim=True)
        sigma = covariance_from(field.scale, rot)
        mean2d, cov2d, depth, valid = project(field.mu, sigma, cam)

        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        conic = torch.stack([c / det, -b / det, a / det], dim=-1)

        half = 0.5 * (a - c)
        lam_max = 0.5 * (a + c) + torch.sqrt((half * half + b * b).clamp(min=0))
        # coverage radius: 3 sigma, shrunk where the response cutoff is exact —
        # past q = 2 ln(alpha/alpha_min) the response cannot reach alpha_min,
        # so low-opacity splats get tighter boxes with zero output change
        if cfg.alpha_min > 0:
            q_cut = 2.0 * torch.log(field.opacity.clamp(min=cfg.alpha_min)
                                    / cfg.alpha_min).clamp(max=9.0)
        else:
            q_cut = torch.full_like(lam_max, 9.0)
        radius = torch.sqrt(q_cut * lam_max).clamp(max=float(cfg.r_max))

        # tightest integer bounds over pixel centers: column px is covered
        # iff its center px + 0.5 lies within radius of the mean
        x0u = torch.ceil(mean2d[:, 0] - radius - 0.5).long()
        x1u = torch.floor(mean2d[:, 0] + radius - 0.5).long()
        y0u = torch.ceil(mean2d[:, 1] - radius - 0.5).long()
        y1u = torch.floor(mean2d[:, 1] + radius - 0.5).long()
        x0, x1 = x0u.clamp(min=0), x1u.clamp(max=cam.width - 1)
        y0, y1 = y0u.clamp(min=0), y1u.clamp(max=cam.height - 1)
        # keep prims that are in the clip range and overlap the image; a prim
        # whose opacity cannot reach alpha_min contributes nothing anywhere
        onscreen = (x0u <= cam.width - 1) & (x1u >= 0) & (x0u <= x1u) \
            & (y0u <= cam.height - 1) & (y1u >= 0) & (y0u <= y1u)
        keep = valid & onscreen
        if cfg.alpha_min > 0:
            keep &= field.opacity >= cfg.alpha_min

        cam_pos = cam.position.to(dtype)
        dirs = field.mu - cam_pos
        dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True).clamp(min=1e-8)
        color = sh_eval(field.sh, dirs, validate=False).clamp(min=0)
        normal = primitive_normals(rot, field.scale, field.mu, cam)

        order = torch.argsort(depth, stable=True)
        order = order[keep[order]]  # depth-ascending, index tie-break, culled removed
        self.n = int(order.numel())
        self.mean2d = mean2d[order]
        self.conic = conic[order]
        self.depth = depth[order]
        self.opacity = field.opacity[order]
        self.color = color[order]
        self.normal = normal[order]
        self.aux = aux[order] if aux is not None else None
        self.x0, self.x1 = x0[order], x1[order]
        self.y0, self.y1 = y0[order], y1[order]


def _composite(alpha, color, depth, normal, aux, background, cam: Camera, cfg: RenderConfig):
    """Front-to-back compositing over dense per-pixel layers (P, L).

    Pad slots must carry alpha = 0 and zeroed channels; they are then exact
    no-ops under the float64 accumulators of cumprod/cumsum.
    """
    P, L = alpha.shape
    t_inc = torch.cumprod(1.0 - alpha, dim=1)
    ones = torch.ones(P, 1, dtype=alpha.dtype)
    t_exc = torch.cat([ones, t_inc[:, :-1]], dim=1)
    alive = (t_exc >= cfg.termination).to(alpha.dtype)  # termination replayed in backward
    w = alpha * t_exc * alive
    wv = w.unsqueeze(-1)

    # one sequential per-pixel cumsum over all channels; each channel's
    # left-to-right accumulation is what keeps both routes bitwise equal
    cols = [wv, wv * color, (w * depth).unsqueeze(-1), wv * normal]
    if aux is not None:
        cols.append(wv * aux)
    stack = torch.cat(cols, dim=-1)
    C = stack.shape[-1]
    totals = torch.cumsum(stack.permute(0, 2, 1).reshape(P * C, L), dim=1)[:, -1].view(P, C)
    acc = totals[:, 0]
    rgb = totals[:, 1:4]
    dep = totals[:, 4]
    nrm = totals[:, 5:8]

    rgb_linear = rgb + background.unsqueeze(0) * (1.0 - acc).unsqueeze(-1)
    depth_out = torch.where(acc > 0, dep / acc.clamp(min=1e-6),
                            torch.full_like(dep, cam.far))
    nrm_len = torch.sqrt((nrm * nrm).sum(-1)).clamp(min=1e-8)
    normal_out = nrm / nrm_len.unsqueeze(-1)

    aux_out = None
    if aux is not None:
        aux_out = totals[:, 8:] / acc.clamp(min=1e-6).unsqueeze(-1)

    H, W = cam.height, cam.width
    return RenderOutput(
        rgb=rgb_linear.clamp(0.0, 1.0).view(H, W, 3),
        rgb_linear=rgb_linear.view(H, W, 3),
        depth=depth_out.view(H, W),
        normal=normal_out.view(H, W, 3),
        acc=acc.view(H, W),
        aux=aux_out.view(H, W, -1) if aux_out is not None else None,
    )


def _background_only(cam: Camera, background: torch.Tensor, aux_channels: int | None):
    H, W = cam.height, cam.width
    dtype = background.dtype
    return RenderOutput(
        rgb=background.clamp(0, 1).expand(H, W, 3).clone(),
        rgb_linear=background.expand(H, W, 3).clone(),
        depth=torch.full((H, W), cam.far, dtype=dtype),
        normal=torch.zeros(H, W, 3, dtype=dtype),
        acc=torch.zeros(H, W, dtype=dtype),
        aux=torch.zeros(H, W, aux_channels, dtype=dtype) if aux_channels else None,
    )


def _render_binned(prep: _Prepared, cam: Camera, background, cfg: RenderConfig):
    W, H = cam.width, cam.height
    dtype = prep.mean2d.dtype
    widths = prep.x1 - prep.x0 + 1
    counts = widths * (prep.y1 - prep.y0 + 1)
    total = int(counts.sum())
    if total == 0:
        return _background_only(cam, background, prep.aux.shape[1] if prep.aux is not None else None)

    offsets = torch.cumsum(counts, 0) - counts
    eprim = torch.repeat_interleave(torch.arange(prep.n), counts)
    k = torch.arange(total) - offsets[eprim]
    w_e = widths[eprim]
    ex = prep.x0[eprim] + k % w_e
    ey = prep.y0[eprim] + k // w_e

    dx = (ex.to(dtype) + 0.5) - prep.mean2d[eprim, 0]
    dy = (ey.to(dtype) + 0.5) - prep.mean2d[eprim, 1]
    con = prep.conic[eprim]
    alpha = _alpha_response(prep.opacity[eprim], con[:, 0], con[:, 1], con[:, 2], dx, dy, cfg)

    keep = alpha >= cfg.alpha_min
    if not bool(keep.any()):
        return _background_only(cam, background, prep.aux.shape[1] if prep.aux is not None else None)
    alpha = alpha[keep]
    eprim = eprim[keep]
    pix = (ey[keep] * W + ex[keep])

    # stable sort by pixel keeps within-pixel entries in depth order
    order = torch.argsort(pix, stable=True)
    pix = pix[order]
    alpha = alpha[order]
    eprim = eprim[order]

    m = pix.numel()
    first = torch.ones(m, dtype=torch.bool)
    first[1:] = pix[1:] != pix[:-1]
    run_id = torch.cumsum(first.long(), 0) - 1
    starts = torch.nonzero(first).squeeze(1)
    rank = torch.arange(m) - starts[run_id]
    L = int(rank.max()) + 1
    P = H * W

    # one scatter for every channel; (pix, rank) pairs are unique so the
    # dense table is deterministic
    feats = [alpha.unsqueeze(1), prep.color[eprim],
             prep.depth[eprim].unsqueeze(1), prep.normal[eprim]]
    if prep.aux is not None:
        feats.append(prep.aux[eprim])
    vals = torch.cat(feats, dim=1)
    table = torch.zeros((P, L, vals.shape[1]), dtype=dtype).index_put((pix, rank), vals)

    return _composite(
        table[..., 0],
        table[..., 1:4],
        table[..., 4],
        table[..., 5:8],
        table[..., 8:] if prep.aux is not None else None,
        background, cam, cfg,
    )


def _render_naive(prep: _Prepared, cam: Camera, background, cfg: RenderConfig):
    """All-pairs oracle: evaluate every (pixel, primitive) combination densely."""
    W, H = cam.width, cam.height
    P, n = H * W, prep.n
    if n == 0:
        return _background_only(cam, background, prep.aux.shape[1] if prep.aux is not None else None)
    if P * n > 4_000_000:
        raise ValueError("naive route is an oracle for small scenes only")
    dtype = prep.mean2d.dtype

    gy, gx = torch.meshgrid(torch.arange(H), torch.arange(W), indexing="ij")
    gx = gx.reshape(-1)
    gy = gy.reshape(-1)

    dx = (gx.to(dtype) + 0.5).unsqueeze(1) - prep.mean2d[:, 0].unsqueeze(0)
    dy = (gy.to(dtype) + 0.5).unsqueeze(1) - prep.mean2d[:, 1].unsqueeze(0)
    con = prep.conic
    alpha_full = _alpha_response(prep.opacity.unsqueeze(0),
                                 con[:, 0].unsqueeze(0), con[:, 1].unsqueeze(0),
                                 con[:, 2].unsqueeze(0), dx, dy, cfg)
    inside = (gx.unsqueeze(1) >= prep.x0.unsqueeze(0)) & (gx.unsqueeze(1) <= prep.x1.unsqueeze(0)) \
        & (gy.unsqueeze(1) >= prep.y0.unsqueeze(0)) & (gy.unsqueeze(1) <= prep.y1.unsqueeze(0))
    keep = inside & (alpha_full >= cfg.alpha_min)
    zero = torch.zeros((), dtype=dtype)
    alpha = torch.where(keep, alpha_full, zero)
    keep3 = keep.unsqueeze(-1)
    color = torch.where(keep3, prep.color.unsqueeze(0).expand(P, n, 3), zero)
    depth = torch.where(keep, prep.depth.unsqueeze(0).expand(P, n), zero)
    normal = torch.where(keep3, prep.normal.unsqueeze(0).expand(P, n, 3), zero)
    aux = None
    if prep.aux is not None:
        c = prep.aux.shape[1]
        aux = torch.where(keep.unsqueeze(-1), prep.aux.unsqueeze(0).expand(P, n, c), zero)
    return _composite(alpha, color, depth, normal, aux, background, cam, cfg)


def render(field: GaussianField, cam: Camera, background=(0.0, 0.0, 0.0),
           cfg: RenderConfig = DEFAULT_CONFIG, aux: torch.Tensor | None = None,
           route: str = "binned") -> RenderOutput:
    """Render a field. route="naive" is the brute-force oracle path."""
    dtype = field.mu.dtype if len(field) else torch.float32
    bg = torch.as_tensor(background, dtype=dtype)
    if len(field) == 0:
        return _background_only(cam, bg, aux.shape[1] if aux is not None else None)
    cam = cam.to(dtype)
    prep = _Prepared(field, cam, cfg, aux)
    if prep.n == 0:
        return _background_only(cam, bg, aux.shape[1] if aux is not None else None)
    if route == "binned":
        return _render_binned(prep, cam, bg, cfg)
    if route == "naive":
        return _render_naive(prep, cam, bg, cfg)
    raise ValueError(f"unknown route {route!r}")


def render_backward(field: GaussianField, cam: Camera, grad_rgb: torch.Tensor,
                    grad_depth: torch.Tensor | None = None,
                    grad_normal: torch.Tensor | None = None,
                    grad_acc: torch.Tensor | None = None,
                    background=(0.0, 0.0, 0.0),
                    cfg: RenderConfig = DEFAULT_CONFIG) -> GradientBundle:
    """Gradients of sum(out * upstream_grad) w.r.t. field parameters.

    The upstream rgb gradient applies to the pre-clamp compositing output.
    """
    for g in (grad_rgb, grad_depth, grad_normal, grad_acc):
        if g is not None and not bool(torch.isfinite(g).all()):
            raise ValueError("non-finite upstream gradient")

    leaves = {
        "mu": field.mu.detach().clone().requires_grad_(True),
        "rot": field.rot.detach().clone().requires_grad_(True),
        "scale": field.scale.detach().clone().requires_grad_(True),
        "opacity": field.opacity.detach().clone().requires_grad_(True),
        "sh": field.sh.detach().clone().requires_grad_(True),
    }
    f = GaussianField(mu=leaves["mu"], rot=leaves["rot"], scale=leaves["scale"],
                      density=field.density.detach(), opacity=leaves["opacity"],
                      sh=leaves["sh"], provenance=field.provenance)
    out = render(f, cam, background, cfg)
    loss = (out.rgb_linear * grad_rgb).sum()
    if grad_depth is not None:
        loss = loss + (out.depth * grad_depth).sum()
    if grad_normal is not None:
        loss = loss + (out.normal * grad_normal).sum()
    if grad_acc is not None:
        loss = loss + (out.acc * grad_acc).sum()
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    named = {k: (g if g is not None else torch.zeros_like(v))
             for (k, v), g in zip(leaves.items(), grads)}
    return GradientBundle(mu=named["mu"], rot=named["rot"], scale=named["scale"],
                          density=torch.zeros_like(field.density),
                          opacity=named["opacity"], sh=named["sh"])
