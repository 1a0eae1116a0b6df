"""Pipeline assembly: prediction -> global enhancement -> local refinement.

One Model bundles the three parameter sets plus the frozen perceptual-proxy
filters.  `enhance` runs the full forward pass; `brightness_sweep` reuses one
set of local residuals across brightness values, since the local module is
conditioned on the predicted style, never on the user's override.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .arm import (ArmConfig, ArmParams, FactorOutput, LocalResiduals, apply_local,
                  init_arm, refine_field)
from .gaussians import Camera, GaussianField
from .icm import (GlobalModulation, IcmParams, StyleCode, apply_global,
                  concat_modulations, global_enhance, init_icm,
                  low_frequency_features, predict_style)
from .losses import init_lpips_proxy
from .predictor import (ContextCache, PredictorConfig, PredictorOutput,
                        PredictorParams, init_predictor, predict_gaussians)
from .rasterizer import RenderOutput, render

SWEEP_POINTS = (-1.0, -0.5, 0.0, 0.5, 1.0, 1.5)
S_BRIGHT_RANGE = (-1.0, 1.5)


@dataclass(frozen=True)
class ModelConfig:
    sh_degree: int = 1
    feature_channels: int = 64
    num_depth_candidates: int = 32
    scene_scale: float = 0.05
    window_count: int = 8
    levels: int = 2
    heads: int = 2

    def predictor(self) -> PredictorConfig:
        return PredictorConfig(sh_degree=self.sh_degree,
                               num_depth_candidates=self.num_depth_candidates,
                               scene_scale=self.scene_scale,
                               latent_channels=self.feature_channels)

    def arm(self) -> ArmConfig:
        return ArmConfig(feature_channels=self.feature_channels,
                         sh_degree=self.sh_degree, levels=self.levels,
                         window_count=self.window_count, heads=self.heads)


@dataclass
class Model:
    predictor: PredictorParams
    icm: IcmParams
    arm: ArmParams
    perc: dict[str, torch.Tensor]
    cfg: ModelConfig

    def trainable(self, stage: int) -> dict[str, torch.Tensor]:
        """Stage-prefixed parameter dict.

        Past stage one everything that positions a primitive is frozen: the
        geometry head and depth path per the freeze flag, and also the shared
        encoder and fuse conv, whose drift would silently move the plane-sweep
        matching that geometry was trained on.  Only the appearance head keeps
        refining the dark branch.
        """
        if stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        out = {}
        freeze = stage >= 2
        pred = self.predictor.trainable(freeze_encoder=freeze,
                                        freeze_geometry=freeze)
        for k, v in pred.items():
            if freeze and k.split(".")[0] == "fuse":
                continue
            out[f"pred.{k}"] = v
        if stage >= 2:
            for k, v in self.icm.trainable().items():
                out[f"icm.{k}"] = v
        if stage >= 3:
            for k, v in self.arm.trainable().items():
                out[f"arm.{k}"] = v
        return out

    def all_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, tensors in (("pred", self.predictor.tensors),
                                ("icm", self.icm.tensors),
                                ("arm", self.arm.tensors), ("perc", self.perc)):
            for k, v in tensors.items():
                out[f"{prefix}.{k}"] = v
        return out


def init_model(cfg: ModelConfig, seed: int = 0,
               dtype: torch.dtype = torch.float32) -> Model:
    return Model(
        predictor=init_predictor(cfg.predictor(), seed=seed, dtype=dtype),
        icm=init_icm(cfg.feature_channels, cfg.sh_degree, seed=seed + 101,
                     dtype=dtype, heads=cfg.heads),
        arm=init_arm(cfg.arm(), seed=seed + 202, dtype=dtype),
        perc=init_lpips_proxy(seed=seed + 303, dtype=dtype),
        cfg=cfg,
    )


def mean_style(styles: list[StyleCode]) -> StyleCode:
    if not styles:
        raise ValueError("no styles")
    s = torch.stack([st.s_bright for st in styles]).mean()
    lat = torch.stack([st.s_latent for st in styles]).mean(dim=0)
    return StyleCode(s, lat)


@dataclass
class EnhanceOutput:
    pred: PredictorOutput
    styles: list[StyleCode]            # predicted per context view
    mods: list[GlobalModulation]
    field_global: GaussianField
    field_bright: GaussianField | None
    residuals: LocalResiduals | None
    factors: FactorOutput | None

    @property
    def field_dark(self) -> GaussianField:
        return self.pred.field

    @property
    def final_field(self) -> GaussianField:
        return self.field_bright if self.field_bright is not None else self.field_global

    def factor_channels(self) -> torch.Tensor:
        """(N, 3) per-primitive [A_L, A_M, A_X] for aux splatting."""
        if self.factors is None:
            raise ValueError("no local factors in this output")
        return torch.stack([self.factors.a_l, self.factors.a_m, self.factors.a_x], dim=-1)


def enhance(model: Model, images: list[torch.Tensor], cams: list[Camera],
            s_override: float | None = None, use_arm: bool = True,
            freeze_geometry: bool = False,
            cache: ContextCache | None = None) -> EnhanceOutput:
    """Dark context views -> dark field -> globally then locally enhanced field.

    s_override replaces the predicted brightness scalar in the global stage
    only; the local stage always conditions on the prediction, so its
    residuals stay valid across a brightness sweep.
    """
    pred = predict_gaussians(images, cams, model.predictor,
                             freeze_geometry=freeze_geometry, cache=cache)
    styles = [predict_style(img, None, model.icm) for img in images]
    applied = styles if s_override is None else [st.with_bright(s_override) for st in styles]
    mods = [global_enhance(low_frequency_features(f, model.icm), st, f, model.icm,
                           out_hw=(cam.height, cam.width))
            for f, st, cam in zip(pred.features, applied, cams)]
    field_global = apply_global(pred.field, concat_modulations(mods))
    if not use_arm:
        return EnhanceOutput(pred, styles, mods, field_global, None, None, None)
    bright, residuals, factors = refine_field(field_global, mean_style(styles),
                                              pred.features, cams, model.arm)
    return EnhanceOutput(pred, styles, mods, field_global, bright, residuals, factors)


def apply_residuals(field_global: GaussianField, residuals: LocalResiduals) -> GaussianField:
    return apply_local(field_global, residuals)


def enhanced_field_at(model: Model, base: EnhanceOutput, cams: list[Camera],
                      s: float | None) -> GaussianField:
    """Bright field at an override brightness from an existing enhancement.

    Only the global modulation is recomputed; the prediction and the local
    residuals are reused as-is.  This is the per-request path of the render
    service and the inner step of a brightness sweep.
    """
    applied = base.styles if s is None else [st.with_bright(s) for st in base.styles]
    mods = [global_enhance(low_frequency_features(f, model.icm), st, f, model.icm,
                           out_hw=(cam.height, cam.width))
            for f, st, cam in zip(base.pred.features, applied, cams)]
    f_glob = apply_global(base.pred.field, concat_modulations(mods))
    if base.residuals is None:
        return f_glob
    return apply_residuals(f_glob, base.residuals)


@dataclass
class SweepResult:
    s_values: tuple[float, ...]
    renders: list[RenderOutput]
    mean_luminance: list[float]
    dc_shift: list[torch.Tensor]   # per-primitive pre-clamp DC of each field


def brightness_sweep(model: Model, images: list[torch.Tensor], cams: list[Camera],
                     render_cam: Camera, s_values: tuple[float, ...] = SWEEP_POINTS,
                     background=(0.0, 0.0, 0.0)) -> SweepResult:
    """Render the same inputs at several brightness settings.

    The prediction and the local residuals are computed once; only the global
    modulation is recomputed per value, mirroring the render service.
    """
    from .losses import luminance

    with torch.no_grad():
        base = enhance(model, images, cams)
        renders, lums, dcs = [], [], []
        for s in s_values:
            f_bright = enhanced_field_at(model, base, cams, s)
            out = render(f_bright, render_cam, background=background)
            renders.append(out)
            lums.append(float(luminance(out.rgb).mean()))
            dcs.append(f_bright.sh[:, :, 0].detach().clone())
    return SweepResult(tuple(s_values), renders, lums, dcs)
