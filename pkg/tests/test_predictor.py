"""Predictor tests: feature extraction, plane-sweep depth, head decoupling,
field assembly, and end-to-end differentiability.

The depth oracle synthesizes a fronto-parallel textured plane by closed-form
ray-plane intersection (no shared code with the warp under test), feeds
zero-mean patch descriptors into the correlation volume, and checks that the
per-pixel winning candidate matches the known depth bin.
"""
import pytest
import torch
from scipy.ndimage import gaussian_filter, map_coordinates

from lumisplat.gaussians import Camera
from lumisplat.predictor import (
    DISP_REFINE_SPAN,
    GEO_CHANNELS,
    DepthPrediction,
    PredictorConfig,
    RawGaussianTensor,
    assemble_dark_field,
    correlation_volume,
    depth_candidates,
    dual_head,
    extract_features,
    init_predictor,
    latent_features,
    num_app_channels,
    predict_depth,
    predict_gaussians,
)
from lumisplat.rasterizer import RenderConfig, render

from oracle_utils import rel_err


def _cam(width, height, fx=None, cx=None, cy=None, center_x=0.0,
         near=2.0, far=100.0, dtype=torch.float32):
    fx = fx if fx is not None else float(width)
    cx = cx if cx is not None else width / 2.0
    cy = cy if cy is not None else height / 2.0
    t = torch.tensor([-center_x, 0.0, 0.0], dtype=dtype)
    return Camera(fx, fx, cx, cy, torch.eye(3, dtype=dtype), t,
                  width, height, near, far)


def _smooth_images(seed, h, w, n=2):
    rng = torch.Generator().manual_seed(seed)
    imgs = []
    for _ in range(n):
        x = torch.rand(h, w, 3, generator=rng)
        x = torch.from_numpy(gaussian_filter(x.numpy(), sigma=(2, 2, 0)))
        imgs.append(x.clamp(0, 1))
    return imgs


# ---------------------------------------------------------------- features

def test_extract_features_quarter_resolution_padded():
    params = init_predictor(PredictorConfig(), seed=0)
    imgs = _smooth_images(0, 66, 70)
    cams = [_cam(70, 66), _cam(70, 66, center_x=0.1)]
    feats = extract_features(imgs, cams, params)
    # 66x70 pads to 68x72 so every pixel belongs to a feature cell
    assert feats[0].shape == (64, 17, 18)
    assert feats[1].shape == (64, 17, 18)
    assert torch.isfinite(feats[0]).all()


def test_extract_features_duplicate_views_identical():
    params = init_predictor(PredictorConfig(), seed=1)
    img = _smooth_images(1, 32, 32, n=1)[0]
    cams = [_cam(32, 32), _cam(32, 32)]
    f0, f1 = extract_features([img, img.clone()], cams, params)
    assert torch.equal(f0, f1)


def test_extract_features_mismatched_resolution_rejected():
    params = init_predictor(PredictorConfig(), seed=0)
    a = torch.zeros(32, 32, 3)
    b = torch.zeros(32, 36, 3)
    with pytest.raises(ValueError, match="resolution"):
        extract_features([a, b], [_cam(32, 32), _cam(36, 32)], params)


def test_trainable_respects_freeze_flags():
    params = init_predictor(PredictorConfig(), seed=0)
    full = params.trainable()
    assert set(full) == set(params.tensors)

    low = params.trainable(freeze_low_level=True)
    assert "enc1a.w" not in low and "enc1b.b" not in low
    assert "enc2a.w" in low

    geo = params.trainable(freeze_geometry=True)
    assert "geo1.w" not in geo and "geo2.b" not in geo
    assert "app1.w" in geo

    enc = params.trainable(freeze_encoder=True)
    assert "dec2.w" not in enc and "enc4a.w" not in enc
    assert "fuse.w" in enc and "geo1.w" in enc


def test_frozen_low_level_unchanged_by_update_step():
    params = init_predictor(PredictorConfig(), seed=2)
    before = {k: v.clone() for k, v in params.tensors.items()}
    with torch.no_grad():
        for key, value in params.trainable(freeze_low_level=True).items():
            value -= 0.01
    for key in ("enc1a.w", "enc1a.b", "enc1b.w", "enc1b.b"):
        assert torch.equal(params.tensors[key], before[key])
    assert not torch.equal(params.tensors["enc2a.w"], before["enc2a.w"])


# ---------------------------------------------------------------- dual head

def test_dual_head_zero_latent_is_bias_constant():
    cfg = PredictorConfig(sh_degree=1)
    params = init_predictor(cfg, seed=3)
    raw = dual_head(torch.zeros(cfg.latent_channels, 5, 7), params)
    assert torch.isfinite(raw.tensor).all()
    # bias-determined output is constant across space
    flat = raw.tensor.reshape(raw.tensor.shape[0], -1)
    assert (flat - flat[:, :1]).abs().max() == 0
    n = num_app_channels(1) // 3
    for c in range(3):
        assert flat[GEO_CHANNELS + c * n, 0] == pytest.approx(0.5)


def test_dual_head_appearance_perturbation_leaves_geometry_bitwise():
    cfg = PredictorConfig(sh_degree=1)
    params = init_predictor(cfg, seed=4)
    latent = torch.randn(cfg.latent_channels, 6, 6,
                         generator=torch.Generator().manual_seed(0))
    base = dual_head(latent, params)
    with torch.no_grad():
        params.tensors["app1.w"] += 0.5
        params.tensors["app2.b"] += 1.0
    bumped = dual_head(latent, params)
    assert torch.equal(base.geo, bumped.geo)
    assert not torch.equal(base.app, bumped.app)


def test_dual_head_channel_count():
    for deg in (0, 1, 2):
        cfg = PredictorConfig(sh_degree=deg)
        params = init_predictor(cfg, seed=0)
        raw = dual_head(torch.zeros(cfg.latent_channels, 4, 4), params)
        assert raw.tensor.shape[0] == GEO_CHANNELS + num_app_channels(deg)


# ---------------------------------------------------------------- depth

def test_depth_candidates_uniform_in_disparity():
    d = depth_candidates(2.0, 100.0, 16)
    disp = 1.0 / d
    steps = disp.diff()
    assert torch.allclose(steps, steps[0].expand_as(steps), atol=1e-7)
    assert disp[0] == pytest.approx(0.01)
    assert disp[-1] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        depth_candidates(2.0, 100.0, 1)


def _plane_pair(z_star, baseline, h=160, w=160, fx=160.0, seed=7):
    """Two views of an infinite textured plane at depth z_star, rendered by
    ray-plane intersection against a shared world-space albedo grid."""
    rng = torch.Generator().manual_seed(seed)
    step_t = 0.02
    half = 9.0
    side = int(2 * half / step_t) + 1
    tex = torch.rand(side, side, 3, generator=rng).numpy()
    tex = gaussian_filter(tex, sigma=(12, 12, 0))
    tex = (tex - tex.min()) / (tex.max() - tex.min())

    views = []
    for center_x in (0.0, baseline):
        cam = _cam(w, h, fx=fx, center_x=center_x)
        u = torch.arange(w, dtype=torch.float64) + 0.5
        v = torch.arange(h, dtype=torch.float64) + 0.5
        vv, uu = torch.meshgrid(v, u, indexing="ij")
        x_world = (uu - cam.cx) / cam.fx * z_star + center_x
        y_world = (vv - cam.cy) / cam.fx * z_star
        tx = ((x_world + half) / step_t).numpy()
        ty = ((y_world + half) / step_t).numpy()
        chans = [map_coordinates(tex[:, :, c], [ty, tx], order=1, mode="nearest")
                 for c in range(3)]
        img = torch.from_numpy(
            torch.stack([torch.from_numpy(ch) for ch in chans], dim=-1).numpy()
        ).float()
        views.append((img, cam))
    return views


def _patch_descriptors(img):
    """Zero-mean 5x5 patch descriptors at feature resolution (75 channels).

    Reflect padding keeps edge descriptors texture-like; zero padding would
    corrupt the outer two columns in both views and poison the edge matches.
    """
    pooled = torch.nn.functional.avg_pool2d(img.permute(2, 0, 1)[None], 4)
    padded = torch.nn.functional.pad(pooled, (2, 2, 2, 2), mode="reflect")
    patches = torch.nn.functional.unfold(padded, kernel_size=5)
    c, hw = patches.shape[1] // 25, patches.shape[2]
    patches = patches.reshape(1, c, 25, hw)
    patches = patches - patches.mean(dim=2, keepdim=True)
    h, w = pooled.shape[-2:]
    return patches.reshape(c * 25, h, w)


def test_plane_sweep_selects_known_depth_bin():
    depths = depth_candidates(2.0, 100.0, 16)
    k_star = 2
    z_star = float(depths[k_star])
    (img_r, cam_r), (img_s, cam_s) = _plane_pair(z_star, baseline=0.574)

    feats = [_patch_descriptors(img_r), _patch_descriptors(img_s)]
    for ref, src, cr, cs in ((0, 1, cam_r, cam_s), (1, 0, cam_s, cam_r)):
        vol = correlation_volume(feats[ref], feats[src], cr, cs, depths)
        bins = vol.argmax(dim=0)
        frac = ((bins - k_star).abs() <= 1).float().mean()
        assert frac >= 0.9, f"view {ref}: only {frac:.2%} within one bin"

    preds = predict_depth(feats, [cam_r, cam_s], depths)
    for p in preds:
        assert torch.isfinite(p.disparity).all()
        assert p.disp_min - 1e-6 <= p.disparity.min()
        assert p.disparity.max() <= p.disp_max + 1e-6


def test_predict_depth_zero_baseline_flat_confidence():
    img = _smooth_images(5, 64, 64, n=1)[0]
    cams = [_cam(64, 64, near=0.5, far=20.0), _cam(64, 64, near=0.5, far=20.0)]
    pooled = torch.nn.functional.avg_pool2d(img.permute(2, 0, 1)[None], 4)[0]
    depths = depth_candidates(0.5, 20.0, 8)
    preds = predict_depth([pooled, pooled.clone()], cams, depths)
    for p in preds:
        assert torch.isfinite(p.disparity).all()
        assert (p.confidence - 1.0 / 8).abs().max() < 1e-4


def test_predict_depth_disparity_within_bounds_property():
    cams = [_cam(24, 24, near=1.0, far=30.0), _cam(24, 24, near=1.0, far=30.0, center_x=0.4)]
    depths = depth_candidates(1.0, 30.0, 7)
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        feats = [torch.randn(16, 6, 6, generator=g) * 3 for _ in range(2)]
        for p in predict_depth(feats, cams, depths):
            assert p.disparity.min() >= p.disp_min - 1e-6
            assert p.disparity.max() <= p.disp_max + 1e-6
            assert p.confidence.min() >= 0 and p.confidence.max() <= 1


def test_predict_depth_too_few_candidates_rejected():
    feats = [torch.zeros(4, 4, 4), torch.zeros(4, 4, 4)]
    cams = [_cam(16, 16), _cam(16, 16)]
    with pytest.raises(ValueError, match="candidates"):
        predict_depth(feats, cams, torch.tensor([5.0]))


# ---------------------------------------------------------------- assembly

def _manual_raw(h, w, sh_degree=1, fill=0.0):
    t = torch.full((GEO_CHANNELS + num_app_channels(sh_degree), h, w), fill)
    return RawGaussianTensor(t, sh_degree)


def _manual_depth(h, w, disp=0.25, conf=0.8):
    return DepthPrediction(torch.full((h, w), disp), torch.full((h, w), conf),
                           0.1, 0.5, 0.1)


def test_assemble_count_contract():
    # one primitive per pixel per view: 2x2 inputs from 2 views -> 8
    cams = [_cam(2, 2, near=1.0, far=20.0), _cam(2, 2, near=1.0, far=20.0, center_x=0.2)]
    raws = [_manual_raw(2, 2), _manual_raw(2, 2)]
    depths = [_manual_depth(2, 2), _manual_depth(2, 2)]
    field = assemble_dark_field(raws, depths, cams, scene_scale=0.05)
    assert len(field) == 8
    assert field.provenance == "dark"


def test_assemble_principal_point_on_axis():
    # pixel (1, 1) center is (1.5, 1.5) = the principal point
    cam = _cam(2, 2, cx=1.5, cy=1.5, near=1.0, far=20.0)
    field = assemble_dark_field([_manual_raw(2, 2)], [_manual_depth(2, 2)],
                                [cam], scene_scale=0.05)
    mu = field.mu.reshape(2, 2, 3)
    assert mu[1, 1, :2].abs().max() < 1e-12
    assert mu[1, 1, 2] == pytest.approx(4.0)  # 1/0.25


def test_assemble_camera_grid_mismatch_rejected():
    cam = _cam(8, 8, near=1.0, far=20.0)
    with pytest.raises(ValueError, match="camera pixel grid"):
        assemble_dark_field([_manual_raw(2, 2)], [_manual_depth(2, 2)],
                            [cam], scene_scale=0.05)


def test_assemble_zero_logit_alpha_and_density_map():
    cam = _cam(2, 2, near=1.0, far=20.0)
    field = assemble_dark_field([_manual_raw(2, 2)], [_manual_depth(2, 2, conf=1.0)],
                                [cam], scene_scale=0.05)
    assert torch.allclose(field.opacity, torch.full((4,), 0.5))
    # density is the exact inverse of alpha = 1 - exp(-rho)
    assert torch.allclose(1.0 - torch.exp(-field.density), field.opacity, atol=1e-6)

    half = assemble_dark_field([_manual_raw(2, 2)], [_manual_depth(2, 2, conf=0.5)],
                               [cam], scene_scale=0.05)
    assert torch.allclose(half.opacity, torch.full((4,), 0.25))


def test_assemble_depth_refinement_bounded():
    cam = _cam(2, 2, near=1.0, far=20.0)
    raw = _manual_raw(2, 2)
    raw.tensor[0] = 100.0  # tanh saturates at +1
    field = assemble_dark_field([raw], [_manual_depth(2, 2)], [cam], scene_scale=0.05)
    want = 1.0 / (0.25 + DISP_REFINE_SPAN * 0.4)
    assert field.mu[:, 2].allclose(torch.full((4,), want), atol=1e-5)

    raw.tensor[0] = 1e6  # clamp at disp_max even for absurd refinements
    field = assemble_dark_field([raw], [_manual_depth(2, 2, disp=0.49)],
                                [cam], scene_scale=0.05)
    assert field.mu[:, 2].min() >= 2.0 - 1e-5


def test_assemble_nan_rejected():
    cam = _cam(2, 2, near=1.0, far=20.0)
    raw = _manual_raw(2, 2)
    raw.tensor[3, 0, 1] = float("nan")
    with pytest.raises(ValueError, match="finite"):
        assemble_dark_field([raw], [_manual_depth(2, 2)], [cam], scene_scale=0.05)


# ---------------------------------------------------------------- end to end

def _tiny_setup(dtype=torch.float32, seed=11, size=24):
    cfg = PredictorConfig(sh_degree=1, num_depth_candidates=8, scene_scale=0.05)
    params = init_predictor(cfg, seed=seed, dtype=dtype)
    imgs = [img.to(dtype) for img in _smooth_images(seed, size, size)]
    cams = [_cam(size, size, fx=size * 1.2, near=0.5, far=10.0, dtype=dtype),
            _cam(size, size, fx=size * 1.2, near=0.5, far=10.0, center_x=0.2, dtype=dtype)]
    return cfg, params, imgs, cams


def test_predict_gaussians_smoke():
    _, params, imgs, cams = _tiny_setup()
    out = predict_gaussians(imgs, cams, params)
    assert len(out.field) == 2 * 24 * 24
    assert out.field.provenance == "dark"
    out.field.validate()
    res = render(out.field, cams[0], cfg=RenderConfig(r_max=8))
    assert torch.isfinite(res.rgb).all()
    assert res.acc.max() <= 1 + 1e-6


def test_freeze_geometry_zeroes_geometry_head_gradients():
    _, params, imgs, cams = _tiny_setup(seed=13)
    for key in ("geo1.w", "geo2.w", "app2.w", "enc3a.w"):
        params.tensors[key].requires_grad_(True)
    out = predict_gaussians(imgs, cams, params, freeze_geometry=True)
    res = render(out.field, cams[0], cfg=RenderConfig(r_max=8))
    loss = res.rgb_linear.sum()
    grads = torch.autograd.grad(
        loss,
        [params.tensors[k] for k in ("geo1.w", "geo2.w", "app2.w", "enc3a.w")],
        allow_unused=True)
    assert grads[0] is None or grads[0].abs().max() == 0
    assert grads[1] is None or grads[1].abs().max() == 0
    assert grads[2] is not None and grads[2].abs().max() > 0
    # encoder still learns through the appearance path
    assert grads[3] is not None and grads[3].abs().max() > 0


def test_end_to_end_finite_difference_on_encoder_weight():
    _, params, imgs, cams = _tiny_setup(dtype=torch.float64, seed=17)
    gmap = torch.randn(24, 24, 3, generator=torch.Generator().manual_seed(3),
                       dtype=torch.float64)
    # smooth configuration: per-pixel splats make the default response cutoff,
    # bbox boundaries and early-termination index near-certain to flip inside
    # a finite-difference window, so the probe drops all three
    rcfg = RenderConfig(alpha_min=0.0, termination=0.0, r_max=8)

    def loss_fn():
        out = predict_gaussians(imgs, cams, params)
        res = render(out.field, cams[1], cfg=rcfg, route="naive")
        return (res.rgb_linear * gmap).sum()

    weight = params.tensors["enc2a.w"]
    weight.requires_grad_(True)
    analytic = torch.autograd.grad(loss_fn(), weight)[0]
    weight.requires_grad_(False)

    # probe the strongest-gradient weight plus a mid-magnitude one; depth-order
    # swaps between the 1152 splats put hard micro-jumps within ~1e-6 of the
    # start point, so the window must stay narrower than that
    idx_max = tuple(int(v) for v in
                    torch.unravel_index(analytic.abs().flatten().argmax(), analytic.shape))
    assert analytic[3, 7, 1, 2] != 0
    eps = 1e-7
    for idx in [idx_max, (3, 7, 1, 2)]:
        with torch.no_grad():
            weight[idx] += eps
            hi = loss_fn()
            weight[idx] -= 2 * eps
            lo = loss_fn()
            weight[idx] += eps
        fd = (hi - lo) / (2 * eps)
        assert rel_err(float(analytic[idx]), float(fd)) < 1e-2
