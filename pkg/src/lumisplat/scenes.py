"""Synthetic desk-scale scenes with analytic ground truth.

A scene is a handful of textured quads: a large back wall plus tilted
floating panels, all facing the camera arc.  Appearance ground truth comes
from closed-form ray-quad intersection against value-noise albedo textures;
geometric ground truth (depth, view normals) is analytic.  A dense Gaussian
field is fitted on the quad surfaces and must reproduce the analytic
appearance to the configured PSNR gate, which makes every later rendering
target achievable by a splat representation.

Images everywhere are display-referred float32 (H, W, 3) in [0, 1]; dark
variants are produced by the physical darkening transform at two levels per
scene (a strong one for inputs, a mild one for style supervision).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .darkening import DarknessParams, darken_image
from .gaussians import Camera, GaussianField, SH_C0, quat_from_rotmat, world_to_cam

GATE_DB = 35.0
GATE_SS = 3   # supersampling used for the generation-time appearance gate


@dataclass(frozen=True)
class SceneSpec:
    resolution: int = 64
    n_quads: int = 4
    radius: float = 4.0
    tex_cells: int = 5
    gt_density: float = 14.0   # fitted splats per scene unit along each axis
    n_targets: int = 3
    # depth bounds double as the disparity sweep range; keep them snug around
    # the orbit-to-surface distances or most candidates land off-scene
    near: float = 2.0
    far: float = 8.0
    fx_factor: float = 1.1
    d_high_range: tuple[float, float] = (0.6, 0.85)
    d_low_range: tuple[float, float] = (0.15, 0.35)
    separation_deg: tuple[float, float] = (5.0, 15.0)

    def __post_init__(self) -> None:
        if not 3 <= self.n_quads <= 6:
            raise ValueError("n_quads must be in [3, 6]")
        if self.resolution < 16 or self.gt_density <= 0 or self.n_targets < 1:
            raise ValueError("degenerate scene spec")
        if not self.near < self.radius < self.far:
            raise ValueError("camera orbit radius outside the depth range")
        lo, hi = self.separation_deg
        if not 0 < lo <= hi:
            raise ValueError("bad separation range")


@dataclass
class Quad:
    center: torch.Tensor   # (3,)
    e_u: torch.Tensor      # (3,) half-extent edge vector
    e_v: torch.Tensor      # (3,)
    normal: torch.Tensor   # (3,) unit, right-handed with (e_u, e_v)
    texture: torch.Tensor  # (T, T, 3) albedo


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    quads: list[Quad]
    gt_field: GaussianField
    cams_context: list[Camera]
    cams_target: list[Camera]
    d_high: float
    d_low: float
    bright: list[torch.Tensor]      # per cam, context first then targets
    dark_high: list[torch.Tensor]
    dark_low: list[torch.Tensor]
    fit_db: float                   # worst-view GT-field vs analytic PSNR

    @property
    def cams(self) -> list[Camera]:
        return self.cams_context + self.cams_target


def value_noise(cells: int, size: int, gen: torch.Generator) -> torch.Tensor:
    """Two-octave bilinear value noise in [0, 1], (size, size, 3)."""
    out = torch.zeros(3, size, size)
    amp, c = 1.0, cells
    for _ in range(2):
        grid = torch.rand(1, 3, c + 1, c + 1, generator=gen)
        up = torch.nn.functional.interpolate(grid, size=(size, size), mode="bilinear",
                                             align_corners=True)[0]
        out = out + amp * up
        amp, c = amp * 0.5, c * 2
    out = out / 1.5
    return (0.15 + 0.7 * out).permute(1, 2, 0).contiguous()


def look_at(pos: torch.Tensor, target: torch.Tensor, spec: SceneSpec) -> Camera:
    z = target - pos
    z = z / torch.linalg.norm(z)
    up = torch.tensor([0.0, 1.0, 0.0])
    x = torch.cross(up, z, dim=0)
    n = torch.linalg.norm(x)
    if float(n) < 1e-6:
        x = torch.tensor([1.0, 0.0, 0.0])
    else:
        x = x / n
    y = torch.cross(z, x, dim=0)
    R = torch.stack([x, y, z], dim=0)
    res = spec.resolution
    fx = res * spec.fx_factor
    return Camera(fx=fx, fy=fx, cx=res / 2, cy=res / 2, R=R, t=-(R @ pos),
                  width=res, height=res, near=spec.near, far=spec.far)


def validate_cameras(cams: list[Camera], center: torch.Tensor) -> None:
    """Every camera must see the scene center inside its frustum."""
    for i, cam in enumerate(cams):
        p = world_to_cam(center[None], cam)[0]
        z = float(p[2])
        if not cam.near < z < cam.far:
            raise ValueError(f"camera {i} outside scene depth bounds")
        u = float(cam.fx * p[0] / z + cam.cx)
        v = float(cam.fy * p[1] / z + cam.cy)
        if not (0 <= u < cam.width and 0 <= v < cam.height):
            raise ValueError(f"camera {i} does not look at the scene")


def _bilinear(tex: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample (T, T, 3) at continuous texel coords (y rows, x cols)."""
    t = tex.shape[0]
    x = x.clamp(0.0, t - 1.000001)
    y = y.clamp(0.0, t - 1.000001)
    x0 = x.floor().long()
    y0 = y.floor().long()
    fx = (x - x0.to(x.dtype)).unsqueeze(-1)
    fy = (y - y0.to(y.dtype)).unsqueeze(-1)
    c00 = tex[y0, x0]
    c01 = tex[y0, x0 + 1]
    c10 = tex[y0 + 1, x0]
    c11 = tex[y0 + 1, x0 + 1]
    return (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy


def _intersect(quads: list[Quad], origin: torch.Tensor, dirs: torch.Tensor):
    """Nearest-hit ray casting.  dirs (N, 3) world; returns per-ray (t, quad
    index or -1, local a, local b)."""
    n = dirs.shape[0]
    best_t = torch.full((n,), float("inf"))
    best_q = torch.full((n,), -1, dtype=torch.long)
    best_a = torch.zeros(n)
    best_b = torch.zeros(n)
    for qi, q in enumerate(quads):
        denom = dirs @ q.normal
        t = ((q.center - origin) @ q.normal) / torch.where(denom.abs() < 1e-9,
                                                           torch.full_like(denom, 1e-9),
                                                           denom)
        p = origin + t.unsqueeze(-1) * dirs
        rel = p - q.center
        a = (rel @ q.e_u) / (q.e_u @ q.e_u)
        b = (rel @ q.e_v) / (q.e_v @ q.e_v)
        hit = (t > 1e-4) & (a.abs() <= 1.0) & (b.abs() <= 1.0) & (t < best_t)
        best_t = torch.where(hit, t, best_t)
        best_q = torch.where(hit, torch.full_like(best_q, qi), best_q)
        best_a = torch.where(hit, a, best_a)
        best_b = torch.where(hit, b, best_b)
    return best_t, best_q, best_a, best_b


def _pixel_rays(cam: Camera, ss: int = 1) -> torch.Tensor:
    """World-space unit rays; ss > 1 yields ss*ss subpixel rays per pixel,
    ordered (H, W, ss*ss)."""
    base_y = torch.arange(cam.height, dtype=torch.float32)
    base_x = torch.arange(cam.width, dtype=torch.float32)
    off = (torch.arange(ss, dtype=torch.float32) + 0.5) / ss
    ys = (base_y[:, None] + off[None, :]).reshape(-1)
    xs = (base_x[:, None] + off[None, :]).reshape(-1)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    d = torch.stack([(xx - cam.cx) / cam.fx,
                     (yy - cam.cy) / cam.fy,
                     torch.ones_like(xx)], dim=-1).reshape(-1, 3)
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    return d @ cam.R   # rows are camera axes, so R^T d = d @ R


def analytic_render(scene_quads: list[Quad], cam: Camera, ss: int = 1) -> torch.Tensor:
    """Raycast reference image; ss*ss box supersampling per pixel."""
    dirs = _pixel_rays(cam, ss)
    origin = cam.position
    _, qi, a, b = _intersect(scene_quads, origin, dirs)
    rgb = torch.zeros(dirs.shape[0], 3)
    for idx, q in enumerate(scene_quads):
        m = qi == idx
        if not bool(m.any()):
            continue
        t = q.texture.shape[0]
        rgb[m] = _bilinear(q.texture, (a[m] + 1) * 0.5 * (t - 1), (b[m] + 1) * 0.5 * (t - 1))
    img = rgb.reshape(cam.height, ss, cam.width, ss, 3)
    return img.mean(dim=(1, 3))


def analytic_depth(scene_quads: list[Quad], cam: Camera) -> torch.Tensor:
    dirs = _pixel_rays(cam)
    t, qi, _, _ = _intersect(scene_quads, cam.position, dirs)
    p = cam.position + t.unsqueeze(-1) * dirs
    z = world_to_cam(p, cam)[:, 2]
    z = torch.where(qi >= 0, z, torch.full_like(z, cam.far))
    return z.reshape(cam.height, cam.width)


def analytic_normals(scene_quads: list[Quad], cam: Camera) -> torch.Tensor:
    """View-convention normals (+z toward camera); zeros where no surface."""
    dirs = _pixel_rays(cam)
    _, qi, _, _ = _intersect(scene_quads, cam.position, dirs)
    n = torch.zeros(dirs.shape[0], 3)
    for idx, q in enumerate(scene_quads):
        m = qi == idx
        if not bool(m.any()):
            continue
        facing = q.normal * (1.0 if float(q.normal @ (cam.position - q.center)) >= 0 else -1.0)
        n[m] = facing
    n_view = -(n @ cam.R.T)
    n_view = torch.where((qi >= 0).unsqueeze(-1), n_view, torch.zeros_like(n_view))
    return n_view.reshape(cam.height, cam.width, 3)


def _quad_frame(normal: torch.Tensor, phi: float) -> tuple[torch.Tensor, torch.Tensor]:
    ref = torch.tensor([0.0, 1.0, 0.0])
    u = torch.cross(ref, normal, dim=0)
    if float(torch.linalg.norm(u)) < 1e-6:
        u = torch.tensor([1.0, 0.0, 0.0])
    u = u / torch.linalg.norm(u)
    v = torch.cross(normal, u, dim=0)
    cu = math.cos(phi) * u + math.sin(phi) * v
    cv = -math.sin(phi) * u + math.cos(phi) * v
    return cu, cv


def _fit_gaussians(quads: list[Quad], density: float) -> GaussianField:
    """Dense surface-aligned Gaussians whose DC color copies the albedo.

    Grid pitch follows the quad extent so every surface gets roughly the
    same splats-per-unit density."""
    mus, rots, scales, shs = [], [], [], []
    opacity_val = 0.95
    for q in quads:
        len_u = float(torch.linalg.norm(q.e_u))
        len_v = float(torch.linalg.norm(q.e_v))
        # small quads show silhouette edges; tighter splats keep the edge
        # profile close to the rasterizer's own footprint floor
        sig = 0.5 if max(len_u, len_v) >= 1.5 else 0.4
        g_u = max(8, round(2 * len_u * density))
        g_v = max(8, round(2 * len_v * density))
        lin_u = torch.linspace(-1.0 + 1.0 / g_u, 1.0 - 1.0 / g_u, g_u)
        lin_v = torch.linspace(-1.0 + 1.0 / g_v, 1.0 - 1.0 / g_v, g_v)
        bb, aa = torch.meshgrid(lin_v, lin_u, indexing="ij")
        aa = aa.reshape(-1)
        bb = bb.reshape(-1)
        mu = q.center + aa[:, None] * q.e_u + bb[:, None] * q.e_v
        t = q.texture.shape[0]
        col = _bilinear(q.texture, (aa + 1) * 0.5 * (t - 1), (bb + 1) * 0.5 * (t - 1))
        u_hat = q.e_u / torch.linalg.norm(q.e_u)
        v_hat = q.e_v / torch.linalg.norm(q.e_v)
        R = torch.stack([u_hat, v_hat, q.normal], dim=-1)
        quat = quat_from_rotmat(R)
        su = len_u * (2.0 / g_u) * sig
        sv = len_v * (2.0 / g_v) * sig
        n = mu.shape[0]
        mus.append(mu)
        rots.append(quat[None].expand(n, 4))
        scales.append(torch.tensor([su, sv, 1e-3]).expand(n, 3))
        sh = torch.zeros(n, 3, 4)
        sh[:, :, 0] = col / SH_C0
        shs.append(sh)
    n_total = sum(m.shape[0] for m in mus)
    opacity = torch.full((n_total,), opacity_val)
    density = -torch.log1p(-opacity)
    field = GaussianField(mu=torch.cat(mus), rot=torch.cat(rots).contiguous(),
                          scale=torch.cat(scales).contiguous(), density=density,
                          opacity=opacity, sh=torch.cat(shs), provenance="dark")
    field.validate()
    return field


def _darken_stack(images: list[torch.Tensor], d: float) -> list[torch.Tensor]:
    out = []
    for img in images:
        arr = img.numpy().astype(np.float32)
        out.append(torch.from_numpy(darken_image(arr, DarknessParams(d=d))))
    return out


def make_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    """Deterministic scene; raises if the fitted field misses the appearance
    gate or a camera fails the visibility check."""
    from .rasterizer import render
    from .metrics import psnr

    gen = torch.Generator().manual_seed(seed)

    def u(lo: float, hi: float) -> float:
        return float(torch.rand((), generator=gen)) * (hi - lo) + lo

    tex_size = 33

    def cells_for(extent: float) -> int:
        # keep albedo features a similar screen-space size on every quad
        return max(2, round(spec.tex_cells * extent / 8.0))

    quads = [Quad(center=torch.tensor([0.0, 0.0, 1.2]),
                  e_u=torch.tensor([4.0, 0.0, 0.0]),
                  e_v=torch.tensor([0.0, 4.0, 0.0]),
                  normal=torch.tensor([0.0, 0.0, 1.0]),
                  texture=value_noise(cells_for(8.0), tex_size, gen))]
    for _ in range(spec.n_quads - 1):
        nrm = torch.tensor([u(-0.3, 0.3), u(-0.3, 0.3), -1.0])
        nrm = nrm / torch.linalg.norm(nrm)
        e_u, e_v = _quad_frame(nrm, u(0.0, math.pi))
        h_u, h_v = u(0.35, 0.55), u(0.35, 0.55)
        center = torch.tensor([u(-1.0, 1.0), u(-1.0, 1.0), u(0.0, 0.6)])
        nq = torch.cross(e_u, e_v, dim=0)
        nq = nq / torch.linalg.norm(nq)
        quads.append(Quad(center=center, e_u=e_u * h_u, e_v=e_v * h_v, normal=nq,
                          texture=value_noise(cells_for(2 * max(h_u, h_v)), tex_size, gen)))

    center = torch.zeros(3)
    sep = math.radians(u(*spec.separation_deg))
    theta0 = math.radians(u(-8.0, 8.0))
    heights = [u(-0.3, 0.3), u(-0.3, 0.3)]

    def orbit_cam(theta: float, height: float) -> Camera:
        pos = torch.tensor([spec.radius * math.sin(theta), height,
                            -spec.radius * math.cos(theta)])
        return look_at(pos, center, spec)

    cams_context = [orbit_cam(theta0 - sep / 2, heights[0]),
                    orbit_cam(theta0 + sep / 2, heights[1])]
    fracs = [(i + 1) / (spec.n_targets + 1) for i in range(spec.n_targets)]
    cams_target = [orbit_cam(theta0 - sep / 2 + f * sep,
                             heights[0] + f * (heights[1] - heights[0]))
                   for f in fracs]
    cams = cams_context + cams_target
    validate_cameras(cams, center)

    gt_field = _fit_gaussians(quads, spec.gt_density)
    bright, fit_db = [], float("inf")
    for cam in cams:
        ref = analytic_render(quads, cam, ss=GATE_SS)
        out = render(gt_field, cam)
        bright.append(out.rgb)
        fit_db = min(fit_db, psnr(out.rgb, ref))
    if fit_db < GATE_DB:
        raise ValueError(f"GT field fit {fit_db:.2f} dB below the {GATE_DB} dB gate")

    d_high = u(*spec.d_high_range)
    d_low = u(*spec.d_low_range)
    return SyntheticScene(spec=spec, seed=seed, quads=quads, gt_field=gt_field,
                          cams_context=cams_context, cams_target=cams_target,
                          d_high=d_high, d_low=d_low, bright=bright,
                          dark_high=_darken_stack(bright, d_high),
                          dark_low=_darken_stack(bright, d_low), fit_db=fit_db)
