"""End-to-end model pipeline tests.

Covers the chained enhancement invariants the service and CLI rely on: the
brightness override touches only the global stage, the local stage is a
bitwise no-op at init, the per-primitive DC shift is monotone in the
brightness scalar, and checkpoints restore the model exactly.
"""
import dataclasses

import torch
import pytest

from lumisplat.gaussians import Camera
from lumisplat.model import (
    S_BRIGHT_RANGE, SWEEP_POINTS, ModelConfig, brightness_sweep, enhance,
    init_model, mean_style,
)
from lumisplat.icm import StyleCode, density_to_opacity
from lumisplat.rasterizer import render
from lumisplat.scenes import SceneSpec, make_scene
from lumisplat.training import load_checkpoint, save_checkpoint
from lumisplat.optim import init_optim, adam_step

torch.set_num_threads(1)

SMALL = ModelConfig(feature_channels=32, num_depth_candidates=8,
                    window_count=4)


@pytest.fixture(scope="module")
def scene():
    return make_scene(SceneSpec(), seed=0)


@pytest.fixture(scope="module")
def model():
    return init_model(SMALL, seed=5)


@pytest.fixture(scope="module")
def context(scene):
    n = len(scene.cams_context)
    return scene.dark_high[:n], list(scene.cams_context)


@pytest.fixture(scope="module")
def base_out(model, context):
    images, cams = context
    with torch.no_grad():
        return enhance(model, images, cams)


def test_enhance_provenance_chain(base_out):
    assert base_out.field_dark.provenance == "dark"
    assert base_out.field_global.provenance == "global-enhanced"
    assert base_out.field_bright.provenance == "bright"
    assert base_out.final_field is base_out.field_bright


def test_enhance_counts_consistent(base_out, context):
    images, _ = context
    n = base_out.field_dark.mu.shape[0]
    assert base_out.field_global.mu.shape[0] == n
    assert base_out.field_bright.mu.shape[0] == n
    assert len(base_out.styles) == len(images)
    assert len(base_out.mods) == len(images)
    assert base_out.factor_channels().shape == (n, 3)


def test_local_stage_safe_start(base_out):
    """Zero-init residual heads: SH passes through bitwise, geometry is
    untouched, and opacity is exactly the shared density map."""
    g, b = base_out.field_global, base_out.field_bright
    assert torch.equal(b.sh, g.sh)
    assert torch.equal(b.mu, g.mu)
    assert torch.equal(b.rot, g.rot)
    assert torch.equal(b.scale, g.scale)
    assert torch.equal(b.density, g.density)
    assert torch.equal(b.opacity, density_to_opacity(g.density))
    for band in base_out.residuals.bands:
        assert not band.any()
    assert not base_out.residuals.dalpha.any()


def test_local_noop_renders_match_mapped_global(base_out, scene):
    """With zero residuals the local render equals the global field rendered
    through the same density->opacity map."""
    g = base_out.field_global
    mapped = dataclasses.replace(g, opacity=density_to_opacity(g.density),
                                 provenance="bright")
    cam = scene.cams_target[0]
    with torch.no_grad():
        rg = render(mapped, cam)
        rb = render(base_out.field_bright, cam)
    assert torch.equal(rb.rgb, rg.rgb)
    assert torch.equal(rb.depth, rg.depth)


def test_override_leaves_prediction_and_residuals_unchanged(model, context, base_out):
    """The brightness override must only reach the global modulation."""
    images, cams = context
    with torch.no_grad():
        out = enhance(model, images, cams, s_override=1.2)
    assert torch.equal(out.field_dark.mu, base_out.field_dark.mu)
    assert torch.equal(out.field_dark.sh, base_out.field_dark.sh)
    # predicted styles are reported, not the applied override
    for a, b in zip(out.styles, base_out.styles):
        assert torch.equal(a.s_bright, b.s_bright)
    for a, b in zip(out.residuals.bands, base_out.residuals.bands):
        assert torch.equal(a, b)
    assert torch.equal(out.residuals.dalpha, base_out.residuals.dalpha)
    # geometry-side outputs identical, appearance shifted
    assert torch.equal(out.field_bright.mu, base_out.field_bright.mu)
    assert torch.equal(out.field_bright.density, base_out.field_bright.density)
    assert not torch.equal(out.field_bright.sh, base_out.field_bright.sh)


def test_dc_strictly_monotone_in_override(model, context):
    images, cams = context
    with torch.no_grad():
        lo = enhance(model, images, cams, s_override=0.2)
        hi = enhance(model, images, cams, s_override=0.9)
    diff = hi.field_bright.sh[:, :, 0] - lo.field_bright.sh[:, :, 0]
    assert (diff > 0).all()
    # higher-order coefficients never move with the scalar
    assert torch.equal(hi.field_bright.sh[:, :, 1:], lo.field_bright.sh[:, :, 1:])


def test_enhance_without_local_stage(model, context):
    images, cams = context
    with torch.no_grad():
        out = enhance(model, images, cams, use_arm=False)
    assert out.field_bright is None
    assert out.residuals is None
    assert out.final_field is out.field_global
    with pytest.raises(ValueError):
        out.factor_channels()


def test_sweep_monotone(model, context, scene):
    images, cams = context
    res = brightness_sweep(model, images, cams, scene.cams_target[1])
    assert res.s_values == SWEEP_POINTS
    assert len(res.renders) == len(SWEEP_POINTS)
    assert res.renders[0].rgb.shape == (64, 64, 3)
    for a, b in zip(res.mean_luminance, res.mean_luminance[1:]):
        assert b >= a
    for lo, hi in zip(res.dc_shift, res.dc_shift[1:]):
        assert (hi - lo > 0).all()


def test_sweep_points_span_slider_range():
    assert SWEEP_POINTS[0] == S_BRIGHT_RANGE[0]
    assert SWEEP_POINTS[-1] == S_BRIGHT_RANGE[1]
    assert list(SWEEP_POINTS) == sorted(SWEEP_POINTS)


def test_mean_style_averages():
    a = StyleCode(torch.tensor(0.2), torch.zeros(8))
    b = StyleCode(torch.tensor(0.6), torch.ones(8))
    m = mean_style([a, b])
    assert torch.allclose(m.s_bright, torch.tensor(0.4))
    assert torch.allclose(m.s_latent, torch.full((8,), 0.5))
    with pytest.raises(ValueError):
        mean_style([])


def test_trainable_stage_sets(model):
    s1 = model.trainable(1)
    s2 = model.trainable(2)
    s3 = model.trainable(3)
    assert all(k.startswith("pred.") for k in s1)
    assert any(k.startswith("pred.geo") for k in s1)
    assert not any(k.startswith("pred.geo") for k in s2)
    assert any(k.startswith("icm.") for k in s2)
    assert not any(k.startswith("arm.") for k in s2)
    assert any(k.startswith("arm.") for k in s3)
    for keys in (s1, s2, s3):
        assert not any(k.startswith("perc.") for k in keys)
    # optimizer updates in place, so these must be the model's own tensors
    full = model.all_tensors()
    for k, t in s3.items():
        assert t is full[k]


def test_trainable_rejects_bad_stage(model):
    with pytest.raises(ValueError):
        model.trainable(0)
    with pytest.raises(ValueError):
        model.trainable(4)


def test_checkpoint_round_trip(model, tmp_path, context):
    images, cams = context
    optim = init_optim(model.trainable(3), lr=1e-4, horizon=100)
    # a real step so the moments are nonzero
    with torch.enable_grad():
        for t in model.trainable(3).values():
            t.requires_grad_(True)
        out = enhance(model, images, cams)
        loss = out.final_field.sh.square().mean()
        loss.backward()
        grads = {k: t.grad for k, t in model.trainable(3).items()}
        rejected = adam_step(optim, model.trainable(3), grads)
        assert rejected == []
        for t in model.trainable(3).values():
            t.grad = None
            t.requires_grad_(False)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, model, optim, iteration=7, stage=2)
    loaded, optim2, iteration, stage = load_checkpoint(path)
    assert (iteration, stage) == (7, 2)
    assert optim2.step == optim.step
    assert optim2.lr0 == optim.lr0
    la, lb = model.all_tensors(), loaded.all_tensors()
    assert la.keys() == lb.keys()
    for k in la:
        assert torch.equal(la[k], lb[k]), k
    for k in optim.m:
        assert torch.equal(optim.m[k], optim2.m[k])
        assert torch.equal(optim.v[k], optim2.v[k])
    assert loaded.cfg == model.cfg


def test_checkpoint_without_optimizer(model, tmp_path):
    path = tmp_path / "plain.pt"
    save_checkpoint(path, model, None, iteration=0, stage=1)
    loaded, optim, iteration, stage = load_checkpoint(path)
    assert optim is None
    assert (iteration, stage) == (0, 1)
    assert torch.equal(loaded.all_tensors()["perc.perc1.w"],
                       model.all_tensors()["perc.perc1.w"])
