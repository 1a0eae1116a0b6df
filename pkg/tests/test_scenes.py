"""Synthetic scene generator and image metrics."""
import math

import pytest
import torch

from lumisplat.gaussians import Camera, quat_from_rotmat, quat_to_rotmat
from lumisplat.metrics import PSNR_CAP, evaluate_views, psnr, ssim
from lumisplat.scenes import (Quad, SceneSpec, SyntheticScene, analytic_depth,
                              analytic_normals, analytic_render, look_at,
                              make_scene, validate_cameras, value_noise)

torch.set_num_threads(1)


# ---------------------------------------------------------------- rotations

def test_quat_rotmat_round_trip():
    g = torch.Generator().manual_seed(3)
    q = torch.randn(200, 4, generator=g, dtype=torch.float64)
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    q = torch.where(q[:, 0:1] < 0, -q, q)
    back = quat_from_rotmat(quat_to_rotmat(q))
    assert torch.allclose(back, q, atol=1e-9)


def test_quat_from_rotmat_degenerate_traces():
    # 180 degree rotations exercise every Shepperd branch.
    mats = [torch.eye(3, dtype=torch.float64)]
    for axis in range(3):
        d = -torch.ones(3, dtype=torch.float64)
        d[axis] = 1.0
        mats.append(torch.diag(d))
    for R in mats:
        q = quat_from_rotmat(R)
        assert torch.allclose(quat_to_rotmat(q), R, atol=1e-9)
        assert float(q[0]) >= 0.0


# ------------------------------------------------------------------ metrics

def test_psnr_identical_hits_cap():
    a = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(0))
    assert psnr(a, a) == PSNR_CAP


def test_psnr_uniform_offset_exact_20db():
    a = torch.full((16, 16, 3), 0.3)
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6


def test_psnr_symmetric_and_capped():
    g = torch.Generator().manual_seed(1)
    a = torch.rand(12, 12, 3, generator=g)
    b = torch.rand(12, 12, 3, generator=g)
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a, a + 1e-6) == PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(torch.zeros(4, 4, 3), torch.zeros(5, 4, 3))


def _textured(size: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return value_noise(4, size, gen)


def test_ssim_self_is_one():
    x = _textured(32, 7)
    assert abs(ssim(x, x) - 1.0) < 1e-9


def test_ssim_inverted_below_half():
    x = _textured(32, 8)
    assert ssim(x, 1.0 - x) < 0.5


def test_ssim_constant_shift_invariance():
    # Pair built with matching per-window means: the luminance term stays at
    # one, so adding the same constant to both sides cannot move the score.
    x = _textured(32, 9)[..., 0]
    ys, xs = torch.meshgrid(torch.arange(32), torch.arange(32), indexing="ij")
    checker = ((-1.0) ** (ys + xs)).to(torch.float32)
    y = x + 0.05 * checker
    base = ssim(x, y)
    shifted = ssim(x + 0.07, y + 0.07)
    assert abs(base - shifted) < 1e-6


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError):
        ssim(torch.zeros(10, 10), torch.zeros(10, 10))


def test_ssim_color_uses_bt601_gray():
    a = _textured(24, 10)
    b = _textured(24, 11)
    w = torch.tensor([0.299, 0.587, 0.114])
    assert abs(ssim(a, b) - ssim(a @ w, b @ w)) < 1e-12


def test_evaluate_views_report():
    a = [_textured(16, 1), _textured(16, 2)]
    rep = evaluate_views(a, [im.clone() for im in a])
    assert rep.psnr == PSNR_CAP and abs(rep.ssim - 1.0) < 1e-9
    assert len(rep.per_view) == 2


# --------------------------------------------------------- analytic raycast

def _single_quad(z: float = 2.0, seed: int = 5) -> Quad:
    gen = torch.Generator().manual_seed(seed)
    return Quad(center=torch.tensor([0.0, 0.0, z]),
                e_u=torch.tensor([2.0, 0.0, 0.0]),
                e_v=torch.tensor([0.0, 2.0, 0.0]),
                normal=torch.tensor([0.0, 0.0, 1.0]),
                texture=value_noise(4, 17, gen))


def _identity_cam(res: int = 32) -> Camera:
    return Camera(fx=40.0, fy=40.0, cx=res / 2, cy=res / 2,
                  R=torch.eye(3), t=torch.zeros(3), width=res, height=res,
                  near=0.1, far=10.0)


def test_fronto_parallel_plane_depth_and_normals():
    q = _single_quad(z=2.0)
    cam = _identity_cam()
    depth = analytic_depth([q], cam)
    normals = analytic_normals([q], cam)
    hit = depth < cam.far - 1e-3
    assert bool(hit.all())
    assert torch.allclose(depth, torch.full_like(depth, 2.0), atol=1e-6)
    expect = torch.tensor([0.0, 0.0, 1.0]).expand(32, 32, 3)
    assert torch.allclose(normals, expect, atol=1e-6)


def test_analytic_render_center_matches_texture_center():
    q = _single_quad(z=2.0)
    cam = _identity_cam()
    img = analytic_render([q], cam)
    # the ray through the image center hits the quad center (texel grid mid)
    mid = q.texture[8, 8]
    assert torch.allclose(img[16, 16], mid, atol=0.08)
    assert img.shape == (32, 32, 3)


def test_nearest_quad_wins():
    far_q = _single_quad(z=4.0, seed=1)
    near_q = _single_quad(z=2.0, seed=2)
    cam = _identity_cam()
    d = analytic_depth([far_q, near_q], cam)
    assert torch.allclose(d, torch.full_like(d, 2.0), atol=1e-6)


def test_validate_cameras_rejects_looking_away():
    spec = SceneSpec()
    cam = look_at(torch.tensor([0.0, 0.0, -4.0]), torch.tensor([0.0, 0.0, -8.0]), spec)
    with pytest.raises(ValueError):
        validate_cameras([cam], torch.zeros(3))


def test_scene_spec_bounds_checked():
    with pytest.raises(ValueError):
        SceneSpec(radius=25.0)   # orbit beyond the far plane
    with pytest.raises(ValueError):
        SceneSpec(n_quads=2)


# ------------------------------------------------------------- scene maker

@pytest.fixture(scope="module")
def scene() -> SyntheticScene:
    return make_scene(SceneSpec(), seed=0)


def test_make_scene_deterministic(scene):
    again = make_scene(SceneSpec(), seed=0)
    assert torch.equal(again.gt_field.mu, scene.gt_field.mu)
    assert torch.equal(again.gt_field.sh, scene.gt_field.sh)
    for a, b in zip(again.bright, scene.bright):
        assert torch.equal(a, b)
    assert again.d_high == scene.d_high and again.d_low == scene.d_low
    other = make_scene(SceneSpec(), seed=1)
    assert not torch.equal(other.bright[0], scene.bright[0])


def test_scene_passes_fit_gate(scene):
    from lumisplat.scenes import GATE_SS
    assert scene.fit_db >= 35.0
    for cam, img in zip(scene.cams, scene.bright):
        ref = analytic_render(scene.quads, cam, ss=GATE_SS)
        assert psnr(img, ref) >= 35.0


def test_scene_shapes_and_ranges(scene):
    assert len(scene.cams_context) == 2 and len(scene.cams_target) == 3
    assert len(scene.bright) == len(scene.dark_high) == len(scene.dark_low) == 5
    for stack in (scene.bright, scene.dark_high, scene.dark_low):
        for img in stack:
            assert img.shape == (64, 64, 3)
            assert img.dtype == torch.float32
            assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0
    assert 0.0 < scene.d_low < scene.d_high <= 1.0


def test_scene_darkness_ordering(scene):
    w = torch.tensor([0.299, 0.587, 0.114])
    lum = lambda img: float((img @ w).mean())
    assert lum(scene.dark_high[0]) < lum(scene.dark_low[0]) < lum(scene.bright[0])


def test_scene_gt_field_valid(scene):
    f = scene.gt_field
    f.validate()
    assert f.provenance == "dark"
    assert f.sh_degree == 1
    assert torch.all(f.opacity > 0.9)


def test_context_cameras_separated(scene):
    p0 = scene.cams_context[0].position
    p1 = scene.cams_context[1].position
    c0 = p0 / torch.linalg.norm(p0)
    c1 = p1 / torch.linalg.norm(p1)
    ang = math.degrees(math.acos(float((c0 @ c1).clamp(-1, 1))))
    assert 3.0 <= ang <= 17.0   # spec separation plus height wobble


def test_target_cameras_between_context(scene):
    xs = [float(c.position[0]) for c in scene.cams]
    lo, hi = min(xs[0], xs[1]), max(xs[0], xs[1])
    for x in xs[2:]:
        assert lo - 1e-6 <= x <= hi + 1e-6


def test_value_noise_properties():
    gen = torch.Generator().manual_seed(0)
    tex = value_noise(5, 33, gen)
    assert tex.shape == (33, 33, 3)
    assert float(tex.min()) >= 0.1 and float(tex.max()) <= 0.9
    gen2 = torch.Generator().manual_seed(0)
    assert torch.equal(value_noise(5, 33, gen2), tex)
