"""Two-view feed-forward prediction of a dark Gaussian field.

A shared convolutional encoder-decoder distills each context view into a
1/4-resolution feature map.  A plane-sweep correlation volume over the pair
yields disparity and matching confidence, and two decoupled sub-pixel conv
heads decode per-pixel geometry and appearance channels.  One primitive is
assembled per image pixel per view, so a pair of HxW inputs produces exactly
H*W*2 primitives.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F

from .gaussians import Camera, GaussianField, concat_fields, num_sh_coeffs, unproject

ENCODER_CHANNELS = (16, 32, 64, 64)
# geometry channels: depth refine 1, scale 3, rotation 4, opacity logit 1
GEO_CHANNELS = 9
SCALE_FLOOR = 1e-4
# one feature cell covers a 4x4 pixel block; non-multiples pad right/bottom
FEATURE_STRIDE = 4
# fraction of the disparity candidate range the refinement channel may move
DISP_REFINE_SPAN = 0.05


def num_app_channels(sh_degree: int) -> int:
    return 3 * num_sh_coeffs(sh_degree)


@dataclass(frozen=True)
class PredictorConfig:
    """Architecture knobs; channel layout is fixed once a config is chosen."""

    sh_degree: int = 1
    num_depth_candidates: int = 32
    # world units per softplus unit; ~1-2 projected pixels for desk cameras
    scene_scale: float = 0.05
    latent_channels: int = 64
    head_hidden: int = 32

    def __post_init__(self) -> None:
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree outside 0..3")
        if self.num_depth_candidates < 2:
            raise ValueError("need at least 2 depth candidates")
        if self.scene_scale <= 0:
            raise ValueError("scene_scale must be positive")


def _conv_shapes(cfg: PredictorConfig) -> dict[str, tuple[int, int]]:
    c1, c2, c3, c4 = ENCODER_CHANNELS
    lat, hid = cfg.latent_channels, cfg.head_hidden
    return {
        "enc1a": (c1, 3), "enc1b": (c1, c1),
        "enc2a": (c2, c1), "enc2b": (c2, c2),
        "enc3a": (c3, c2), "enc3b": (c3, c3),
        "enc4a": (c4, c3), "enc4b": (c4, c4),
        "dec1": (c4, c4 + c3),
        "dec2": (lat, c4 + c2),
        "fuse": (lat, lat),
        # second head layer emits 16 sub-pixel copies per channel; a
        # pixel-shuffle then restores full image resolution
        "geo1": (hid, lat), "geo2": (GEO_CHANNELS * FEATURE_STRIDE ** 2, hid),
        "app1": (hid, lat),
        "app2": (num_app_channels(cfg.sh_degree) * FEATURE_STRIDE ** 2, hid),
    }


@dataclass
class PredictorParams:
    """All conv weights/biases keyed "<layer>.w" / "<layer>.b"."""

    tensors: dict[str, torch.Tensor]
    cfg: PredictorConfig

    LOW_LEVEL = ("enc1a", "enc1b")
    ENCODER = ("enc1a", "enc1b", "enc2a", "enc2b", "enc3a", "enc3b",
               "enc4a", "enc4b", "dec1", "dec2")
    GEOMETRY = ("geo1", "geo2")

    def trainable(self, freeze_low_level: bool = False, freeze_encoder: bool = False,
                  freeze_geometry: bool = False) -> dict[str, torch.Tensor]:
        """Parameters an optimizer may update under the given freeze flags."""
        skip: set[str] = set()
        if freeze_low_level:
            skip.update(self.LOW_LEVEL)
        if freeze_encoder:
            skip.update(self.ENCODER)
        if freeze_geometry:
            skip.update(self.GEOMETRY)
        return {k: v for k, v in self.tensors.items() if k.split(".")[0] not in skip}

    def to(self, dtype: torch.dtype) -> "PredictorParams":
        return PredictorParams({k: v.to(dtype) for k, v in self.tensors.items()}, self.cfg)

    def clone(self) -> "PredictorParams":
        return PredictorParams({k: v.clone() for k, v in self.tensors.items()}, self.cfg)


def init_predictor(cfg: PredictorConfig, seed: int = 0,
                   dtype: torch.dtype = torch.float32) -> PredictorParams:
    """Seeded uniform(+-1/sqrt(fan_in)) weights, zero biases.

    Exception: the DC color biases of the appearance head start at 0.5 so
    initial colors sit strictly inside the non-negative clamp and receive
    gradient from the first step.
    """
    gen = torch.Generator().manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}
    for name, (out_ch, in_ch) in _conv_shapes(cfg).items():
        bound = 1.0 / (in_ch * 9) ** 0.5
        w = torch.empty(out_ch, in_ch, 3, 3, dtype=torch.float64)
        w.uniform_(-bound, bound, generator=gen)
        tensors[f"{name}.w"] = w.to(dtype)
        tensors[f"{name}.b"] = torch.zeros(out_ch, dtype=dtype)
    n = num_sh_coeffs(cfg.sh_degree)
    sub = FEATURE_STRIDE ** 2
    for c in range(3):
        tensors["app2.b"][c * n * sub:(c * n + 1) * sub] = 0.5
    return PredictorParams(tensors, cfg)


def _conv(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor, stride: int = 1) -> torch.Tensor:
    return F.conv2d(x, w, b, stride=stride, padding=1)


def _up_to(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)


def _encode(x: torch.Tensor, t: dict[str, torch.Tensor]) -> torch.Tensor:
    """(1, 3, H, W) -> (1, latent_channels, H//4, W//4) feature map."""
    levels = []
    h = x
    for lv in ("enc1", "enc2", "enc3", "enc4"):
        h = torch.relu(_conv(h, t[f"{lv}a.w"], t[f"{lv}a.b"], stride=2))
        h = torch.relu(_conv(h, t[f"{lv}b.w"], t[f"{lv}b.b"]))
        levels.append(h)
    e1, e2, e3, e4 = levels
    d = torch.relu(_conv(torch.cat([_up_to(e4, e3), e3], dim=1), t["dec1.w"], t["dec1.b"]))
    d = torch.relu(_conv(torch.cat([_up_to(d, e2), e2], dim=1), t["dec2.w"], t["dec2.b"]))
    return d


def extract_features(images: list[torch.Tensor], cams: list[Camera],
                     params: PredictorParams) -> list[torch.Tensor]:
    """Per-view feature maps at 1/4 resolution (shared weights across views).

    Images are (H, W, 3) tensors; spatial dims not divisible by 4 are
    replicate-padded at the right/bottom edge so feature cell (i, j) always
    covers the image block [4i, 4i+4) x [4j, 4j+4) and tiny inputs still
    yield one primitive per original pixel downstream.
    """
    if len(images) != 2 or len(cams) != 2:
        raise ValueError("expected exactly two context views")
    if images[0].shape != images[1].shape:
        raise ValueError("context views must share one resolution")
    out = []
    for img, cam in zip(images, cams):
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ValueError("image must be (H, W, 3)")
        if (cam.height, cam.width) != tuple(img.shape[:2]):
            raise ValueError("camera dims do not match image")
        if not torch.isfinite(img).all():
            raise ValueError("non-finite image")
        x = img.permute(2, 0, 1)[None].to(params.tensors["enc1a.w"].dtype)
        ph = -img.shape[0] % FEATURE_STRIDE
        pw = -img.shape[1] % FEATURE_STRIDE
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        out.append(_encode(x, params.tensors)[0])
    return out


@dataclass(frozen=True)
class DepthPrediction:
    """Soft-argmax disparity and matching confidence at feature resolution."""

    disparity: torch.Tensor   # (H_f, W_f), within [disp_min, disp_max]
    confidence: torch.Tensor  # (H_f, W_f), max softmax weight, in [0, 1]
    disp_min: float
    disp_max: float
    step: float               # candidate spacing in disparity

    def __post_init__(self) -> None:
        if self.disparity.shape != self.confidence.shape:
            raise ValueError("disparity/confidence shape mismatch")
        if (self.disparity.min() < self.disp_min - 1e-5
                or self.disparity.max() > self.disp_max + 1e-5):
            raise ValueError("disparity outside candidate bounds")
        if self.confidence.min() < 0 or self.confidence.max() > 1 + 1e-6:
            raise ValueError("confidence outside [0, 1]")


def depth_candidates(near: float, far: float, n: int,
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Depth values whose reciprocals tile [1/far, 1/near] uniformly."""
    if n < 2:
        raise ValueError("need at least 2 depth candidates")
    if not 0 < near < far:
        raise ValueError("need 0 < near < far")
    disp = torch.linspace(1.0 / far, 1.0 / near, n, dtype=dtype)
    return 1.0 / disp


def _scaled_camera(cam: Camera, h_f: int, w_f: int) -> Camera:
    s = float(FEATURE_STRIDE)
    return Camera(cam.fx / s, cam.fy / s, cam.cx / s, cam.cy / s,
                  cam.R, cam.t, w_f, h_f, cam.near, cam.far)


def correlation_volume(feat_ref: torch.Tensor, feat_src: torch.Tensor,
                       cam_ref: Camera, cam_src: Camera,
                       depths: torch.Tensor) -> torch.Tensor:
    """Plane-sweep scores (D, H_f, W_f): dot product of unit-normalized
    reference features against unit-normalized source features warped to each
    candidate depth.  Scores live in [-1, 1] whatever the encoder gain, so the
    softmax over candidates keeps usable contrast from the first iteration.
    Out-of-view or behind-camera samples contribute zero."""
    c, h, w = feat_ref.shape
    dtype = feat_ref.dtype
    d = depths.numel()
    cam_r = _scaled_camera(cam_ref.to(dtype), h, w)
    cam_s = _scaled_camera(cam_src.to(dtype), h, w)

    u = (torch.arange(w, dtype=dtype) + 0.5 - cam_r.cx) / cam_r.fx
    v = (torch.arange(h, dtype=dtype) + 0.5 - cam_r.cy) / cam_r.fy
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    rays = torch.stack([uu, vv, torch.ones_like(uu)], dim=-1)       # (H, W, 3)
    pts = rays[None] * depths.to(dtype).reshape(d, 1, 1, 1)         # (D, H, W, 3)
    world = (pts - cam_r.t) @ cam_r.R
    in_src = world @ cam_s.R.T + cam_s.t
    z = in_src[..., 2]
    zc = z.clamp(min=1e-6)
    u2 = cam_s.fx * in_src[..., 0] / zc + cam_s.cx
    v2 = cam_s.fy * in_src[..., 1] / zc + cam_s.cy
    off = torch.full_like(u2, -1e4)
    u2 = torch.where(z > 1e-6, u2, off)
    v2 = torch.where(z > 1e-6, v2, off)
    grid = torch.stack([2.0 * u2 / w - 1.0, 2.0 * v2 / h - 1.0], dim=-1)
    warped = F.grid_sample(feat_src[None], grid.reshape(1, d * h, w, 2),
                           mode="bilinear", padding_mode="zeros",
                           align_corners=False)
    warped = warped.reshape(c, d, h, w)
    ref_n = feat_ref / feat_ref.norm(dim=0, keepdim=True).clamp(min=1e-8)
    warped_n = warped / warped.norm(dim=0, keepdim=True).clamp(min=1e-8)
    return (ref_n[:, None] * warped_n).sum(dim=0)


def predict_depth(features: list[torch.Tensor], cams: list[Camera],
                  depths: torch.Tensor) -> list[DepthPrediction]:
    """Per-view soft-argmax disparity over the plane-sweep volume.

    Softmax temperature is 1; confidence is the winning softmax weight, so a
    zero-baseline pair degrades to flat 1/D confidence rather than failing.
    """
    if len(features) != 2 or len(cams) != 2:
        raise ValueError("expected exactly two views")
    if features[0].shape != features[1].shape:
        raise ValueError("feature maps must share one shape")
    if depths.ndim != 1 or depths.numel() < 2:
        raise ValueError("need at least 2 depth candidates")
    if torch.any(depths <= 0) or not torch.isfinite(depths).all():
        raise ValueError("depth candidates must be positive and finite")
    disp = 1.0 / depths.to(features[0].dtype)
    if not (torch.all(disp.diff() > 0) or torch.all(disp.diff() < 0)):
        raise ValueError("candidates must be strictly monotone in disparity")
    lo, hi = float(disp.min()), float(disp.max())
    step = (hi - lo) / (depths.numel() - 1)

    out = []
    for r in (0, 1):
        vol = correlation_volume(features[r], features[1 - r], cams[r], cams[1 - r], depths)
        weights = torch.softmax(vol, dim=0)
        soft = (weights * disp.reshape(-1, 1, 1)).sum(dim=0)
        conf = weights.max(dim=0).values
        out.append(DepthPrediction(soft.clamp(lo, hi), conf, lo, hi, step))
    return out


@dataclass(frozen=True)
class RawGaussianTensor:
    """Concatenated head output for one view, (C, H, W) at image resolution.

    Channel layout:
      0     depth refinement (tanh-bounded disparity nudge)
      1:4   scale (softplus * scene_scale + floor)
      4:8   rotation quaternion offset from identity
      8     opacity logit (sigmoid, scaled by matching confidence)
      9:    SH coefficients, color-major: 9 + c*n_coeffs + k
    """

    tensor: torch.Tensor
    sh_degree: int

    def __post_init__(self) -> None:
        want = GEO_CHANNELS + num_app_channels(self.sh_degree)
        if self.tensor.ndim != 3 or self.tensor.shape[0] != want:
            raise ValueError(f"raw tensor must have {want} channels")

    @property
    def geo(self) -> torch.Tensor:
        return self.tensor[:GEO_CHANNELS]

    @property
    def app(self) -> torch.Tensor:
        return self.tensor[GEO_CHANNELS:]


def latent_features(feature: torch.Tensor, params: PredictorParams) -> torch.Tensor:
    """Shared fuse conv producing the latent both heads consume."""
    t = params.tensors
    return torch.relu(_conv(feature[None], t["fuse.w"], t["fuse.b"]))[0]


def _head(latent: torch.Tensor, t: dict[str, torch.Tensor], name: str,
          out_hw: tuple[int, int]) -> torch.Tensor:
    """One head: conv stack at feature rate, sub-pixel shuffle to image rate.

    The shuffled map covers the padded grid; cropping to out_hw keeps the
    primitive count at exactly one per original pixel.
    """
    x = _conv(torch.relu(_conv(latent[None], t[f"{name}1.w"], t[f"{name}1.b"])),
              t[f"{name}2.w"], t[f"{name}2.b"])
    x = F.pixel_shuffle(x, FEATURE_STRIDE)[0]
    if x.shape[1] < out_hw[0] or x.shape[2] < out_hw[1]:
        raise ValueError("head output smaller than requested resolution")
    return x[:, :out_hw[0], :out_hw[1]]


def dual_head(latent: torch.Tensor, params: PredictorParams,
              out_hw: tuple[int, int] | None = None) -> RawGaussianTensor:
    """Decoupled geometry/appearance heads; no shared weights past the latent."""
    t = params.tensors
    if out_hw is None:
        out_hw = (latent.shape[1] * FEATURE_STRIDE, latent.shape[2] * FEATURE_STRIDE)
    geo = _head(latent, t, "geo", out_hw)
    app = _head(latent, t, "app", out_hw)
    return RawGaussianTensor(torch.cat([geo, app], dim=0), params.cfg.sh_degree)


def upsample_depth(dp: DepthPrediction, out_hw: tuple[int, int]) -> DepthPrediction:
    """Bilinear lift of a feature-rate depth prediction to image rate.

    Interpolation is convex, so the disparity stays inside the candidate
    bounds and the confidence inside [0, 1]; validation re-checks both.
    """
    def up(m: torch.Tensor) -> torch.Tensor:
        big = F.interpolate(m[None, None], scale_factor=FEATURE_STRIDE,
                            mode="bilinear", align_corners=False)[0, 0]
        if big.shape[0] < out_hw[0] or big.shape[1] < out_hw[1]:
            raise ValueError("depth map smaller than requested resolution")
        return big[:out_hw[0], :out_hw[1]]

    return replace(dp, disparity=up(dp.disparity), confidence=up(dp.confidence))


def assemble_dark_field(raws: list[RawGaussianTensor], depths: list[DepthPrediction],
                        cams: list[Camera], scene_scale: float) -> GaussianField:
    """Decode raw channels into one primitive per image pixel per view.

    Centers come from unprojecting each pixel center at the refined depth,
    clamped just inside the frustum.  Density is initialized as
    -ln(1 - alpha), the exact inverse of the downstream opacity map, so
    enhancement stages that re-derive alpha from density start consistent.
    """
    if not raws or not len(raws) == len(depths) == len(cams):
        raise ValueError("need one raw tensor, depth map and camera per view")
    fields = []
    for raw, dp, cam in zip(raws, depths, cams):
        t = raw.tensor
        if not torch.isfinite(t).all():
            raise ValueError("non-finite raw gaussian tensor")
        _, h, w = t.shape
        if dp.disparity.shape != (h, w):
            raise ValueError("depth map does not match raw tensor")
        if (cam.height, cam.width) != (h, w):
            raise ValueError("raw tensor does not match camera pixel grid")
        cam = cam.to(t.dtype)
        n = h * w

        span = dp.disp_max - dp.disp_min
        disp = dp.disparity + DISP_REFINE_SPAN * span * torch.tanh(t[0])
        disp = disp.clamp(dp.disp_min, dp.disp_max)
        z = (1.0 / disp).clamp(cam.near * (1 + 1e-4), cam.far * (1 - 1e-4))

        u = torch.arange(w, dtype=t.dtype) + 0.5
        v = torch.arange(h, dtype=t.dtype) + 0.5
        vv, uu = torch.meshgrid(v, u, indexing="ij")
        px = torch.stack([uu, vv], dim=-1).reshape(n, 2)
        mu = unproject(px, z.reshape(n), cam)

        scale = scene_scale * F.softplus(t[1:4]) + SCALE_FLOOR
        scale = scale.permute(1, 2, 0).reshape(n, 3)
        q = t[4:8].permute(1, 2, 0).reshape(n, 4)
        q = q + torch.tensor([1.0, 0, 0, 0], dtype=t.dtype)
        q = q / torch.linalg.norm(q, dim=-1, keepdim=True).clamp(min=1e-8)
        alpha = torch.sigmoid(t[8]).reshape(n) * dp.confidence.reshape(n).to(t.dtype)
        density = -torch.log1p(-alpha.clamp(max=1 - 1e-6))
        sh = t[GEO_CHANNELS:].reshape(3, num_sh_coeffs(raw.sh_degree), h, w)
        sh = sh.permute(2, 3, 0, 1).reshape(n, 3, -1)
        fields.append(GaussianField(mu, q, scale, density, alpha, sh, provenance="dark"))
    return concat_fields(fields, provenance="dark").validate()


@dataclass
class PredictorOutput:
    field: GaussianField
    features: list[torch.Tensor]   # per-view f_refine, consumed by enhancement
    latents: list[torch.Tensor]
    depths: list[DepthPrediction]  # feature rate; assembly upsamples
    raws: list[RawGaussianTensor]


@dataclass
class ContextCache:
    """Frozen per-scene intermediates for the stage-II/III training regime.

    Everything the frozen encoder, fuse conv, geometry head and plane sweep
    produce is deterministic per scene once those weights stop updating, so
    it is computed once and detached; per-iteration work then reduces to the
    appearance head and field assembly.
    """

    features: list[torch.Tensor]
    latents: list[torch.Tensor]
    depths: list[DepthPrediction]
    geo_raws: list[torch.Tensor]   # (GEO_CHANNELS, H, W) per view, detached


def build_context_cache(images: list[torch.Tensor], cams: list[Camera],
                        params: PredictorParams,
                        depths: torch.Tensor | None = None) -> ContextCache:
    with torch.no_grad():
        out = predict_gaussians(images, cams, params, depths=depths)
    return ContextCache(features=[f.detach() for f in out.features],
                        latents=[l.detach() for l in out.latents],
                        depths=[replace(p, disparity=p.disparity.detach(),
                                        confidence=p.confidence.detach())
                                for p in out.depths],
                        geo_raws=[r.geo.detach() for r in out.raws])


def predict_gaussians(images: list[torch.Tensor], cams: list[Camera],
                      params: PredictorParams, depths: torch.Tensor | None = None,
                      freeze_geometry: bool = False,
                      cache: ContextCache | None = None) -> PredictorOutput:
    """Full two-view pipeline: features -> depth -> heads -> dark field.

    With freeze_geometry set, the geometry channels and the depth maps are
    detached, so appearance losses reach the appearance head and encoder but
    leave every geometry-head parameter with exactly zero gradient.  A cache
    (implies frozen geometry) skips the encoder, plane sweep and geometry
    head entirely and recomputes only the appearance head.
    """
    cfg = params.cfg
    out_hws = [(cam.height, cam.width) for cam in cams]
    if cache is not None:
        if not freeze_geometry:
            raise ValueError("cached prediction requires freeze_geometry")
        feats, latents, preds = cache.features, cache.latents, cache.depths
        raws = [RawGaussianTensor(
                    torch.cat([geo, _head(lat, params.tensors, "app", hw)], dim=0),
                    cfg.sh_degree)
                for geo, lat, hw in zip(cache.geo_raws, latents, out_hws)]
    else:
        feats = extract_features(images, cams, params)
        if depths is None:
            near = max(cams[0].near, cams[1].near)
            far = min(cams[0].far, cams[1].far)
            depths = depth_candidates(near, far, cfg.num_depth_candidates,
                                      dtype=feats[0].dtype)
        preds = predict_depth(feats, cams, depths)
        latents = [latent_features(f, params) for f in feats]
        raws = [dual_head(lat, params, hw) for lat, hw in zip(latents, out_hws)]
        if freeze_geometry:
            raws = [RawGaussianTensor(torch.cat([r.geo.detach(), r.app], dim=0),
                                      r.sh_degree) for r in raws]
            preds = [replace(p, disparity=p.disparity.detach(),
                             confidence=p.confidence.detach()) for p in preds]
    pixel_preds = [upsample_depth(p, hw) for p, hw in zip(preds, out_hws)]
    field = assemble_dark_field(raws, pixel_preds, cams, cfg.scene_scale)
    return PredictorOutput(field, feats, latents, preds, raws)
