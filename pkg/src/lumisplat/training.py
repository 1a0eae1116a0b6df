"""Three-stage training loop, checkpointing, and model evaluation.

Stage one fits geometry and dark appearance; stage two enables the global
illumination module with geometry frozen; stage three adds the local
refinement module.  Every iteration appends one JSON line of loss components
to the metrics log, and the whole loop is bitwise deterministic for a fixed
seed: scene/camera draws come from a dedicated generator and no wall-clock
values enter the log.
"""
from __future__ import annotations

import dataclasses
import json
import os

import torch

from .config import TrainConfig, config_to_dict, save_config
from .gaussians import GaussianField
from .icm import IcmParams, predict_style
from .losses import (DecompositionTargets, LossWeights, decomposition_oracle,
                     loss_appearance, loss_geo, loss_global, loss_phys, luminance)
from .metrics import evaluate_views, psnr
from .model import Model, ModelConfig, enhance, init_model
from .optim import OptimState, adam_step, cosine_lr, init_optim
from .predictor import (ContextCache, PredictorParams, build_context_cache,
                        predict_gaussians)
from .arm import ArmParams
from .rasterizer import render
from .scenes import SceneSpec, SyntheticScene, analytic_normals, make_scene


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient; carries the rescue path."""

    def __init__(self, message: str, checkpoint_path: str):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclasses.dataclass
class TrainScene:
    """A synthetic scene plus everything precomputed for loss evaluation."""

    scene: SyntheticScene
    normals: list[torch.Tensor]            # per cam, view-frame unit vectors
    decomp: list[DecompositionTargets]     # per cam, dark-vs-bright oracle
    lum_bright: list[float]
    lum_dark_high: list[float]
    lum_dark_low: list[float]


def build_dataset(cfg: TrainConfig) -> list[TrainScene]:
    out = []
    for i in range(cfg.n_scenes):
        sc = make_scene(cfg.scene, seed=cfg.seed * 1000 + i)
        normals = [analytic_normals(sc.quads, cam) for cam in sc.cams]
        decomp = [decomposition_oracle(d, b) for d, b in zip(sc.dark_high, sc.bright)]
        out.append(TrainScene(
            scene=sc, normals=normals, decomp=decomp,
            lum_bright=[float(luminance(im).mean()) for im in sc.bright],
            lum_dark_high=[float(luminance(im).mean()) for im in sc.dark_high],
            lum_dark_low=[float(luminance(im).mean()) for im in sc.dark_low]))
    return out


def stage_of(iteration: int, stages: tuple[int, int, int]) -> int:
    if iteration < stages[0]:
        return 1
    if iteration < stages[1]:
        return 2
    return 3


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path: str, model: Model, optim: OptimState | None,
                    iteration: int, stage: int) -> None:
    payload = {
        "model_cfg": dataclasses.asdict(model.cfg),
        "tensors": {k: v.detach().clone() for k, v in model.all_tensors().items()},
        "iteration": iteration,
        "stage": stage,
    }
    if optim is not None:
        payload["optim"] = {
            "m": {k: v.clone() for k, v in optim.m.items()},
            "v": {k: v.clone() for k, v in optim.v.items()},
            "step": optim.step, "lr0": optim.lr0, "horizon": optim.horizon,
        }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[Model, OptimState | None, int, int]:
    payload = torch.load(path, weights_only=True)
    cfg = ModelConfig(**payload["model_cfg"])
    groups: dict[str, dict[str, torch.Tensor]] = {"pred": {}, "icm": {}, "arm": {}, "perc": {}}
    for key, t in payload["tensors"].items():
        prefix, name = key.split(".", 1)
        groups[prefix][name] = t
    model = Model(
        predictor=PredictorParams(groups["pred"], cfg.predictor()),
        icm=IcmParams(groups["icm"], cfg.feature_channels, cfg.sh_degree,
                      heads=cfg.heads),
        arm=ArmParams(groups["arm"], cfg.arm()),
        perc=groups["perc"], cfg=cfg)
    optim = None
    if "optim" in payload:
        o = payload["optim"]
        optim = OptimState(m=o["m"], v=o["v"], step=o["step"], lr0=o["lr0"],
                           horizon=o["horizon"])
    return model, optim, payload["iteration"], payload["stage"]


def _carry_moments(old: OptimState, params: dict[str, torch.Tensor]) -> OptimState:
    """Fresh state for a new trainable set, keeping moments of shared names."""
    m = {k: old.m[k].clone() if k in old.m else torch.zeros_like(v)
         for k, v in params.items()}
    v = {k: old.v[k].clone() if k in old.v else torch.zeros_like(t)
         for k, t in params.items()}
    return OptimState(m=m, v=v, step=old.step, lr0=old.lr0, horizon=old.horizon)


# ------------------------------------------------------------ loss plumbing

def _style_entries(model: Model, ts: TrainScene, styles: list) -> tuple[list, list, list]:
    """Per-view (high, low, diff) style supervision rows for one scene."""
    sc = ts.scene
    s_rows, d_rows, dlum_rows = [], [], []
    for v in range(2):
        s_high = styles[v].s_bright
        s_low = predict_style(sc.dark_low[v], None, model.icm).s_bright
        s_rows += [s_high, s_low, s_high - s_low]
        d_rows += [sc.d_high, sc.d_low, sc.d_high - sc.d_low]
        dlum_rows += [ts.lum_bright[v] - ts.lum_dark_high[v],
                      ts.lum_bright[v] - ts.lum_dark_low[v],
                      ts.lum_dark_low[v] - ts.lum_dark_high[v]]
    return s_rows, d_rows, dlum_rows


def compute_losses(model: Model, batch: list[TrainScene], tgt: list[int],
                   stage: int, w: LossWeights,
                   caches: list[ContextCache | None] | None = None,
                   ) -> tuple[torch.Tensor, dict[str, float]]:
    """Mean loss over the batch for the given stage, plus logged components."""
    total = torch.zeros(())
    comps: dict[str, float] = {}
    if caches is None:
        caches = [None] * len(batch)

    def add(c: dict[str, float]) -> None:
        for k, val in c.items():
            comps[k] = comps.get(k, 0.0) + val / len(batch)

    s_rows, d_rows, dlum_rows, all_mods = [], [], [], []
    for ts, t, cache in zip(batch, tgt, caches):
        sc = ts.scene
        imgs = [sc.dark_high[0], sc.dark_high[1]]
        cam_t = sc.cams[t]
        if stage == 1:
            pred = predict_gaussians(imgs, sc.cams_context, model.predictor)
            rd = render(pred.field, cam_t)
            geo, c = loss_geo(rd, sc.dark_high[t], ts.normals[t], cam_t, w)
            total = total + geo / len(batch)
            add(c)
            continue

        out = enhance(model, imgs, sc.cams_context, use_arm=(stage == 3),
                      freeze_geometry=True, cache=cache)
        rd = render(out.field_dark, cam_t)
        geo, c_geo = loss_geo(rd, sc.dark_high[t], ts.normals[t], cam_t, w)
        if stage == 3:
            rb = render(out.final_field, cam_t, aux=out.factor_channels())
        else:
            rb = render(out.final_field, cam_t)
        app, c_app = loss_appearance(rd.rgb_linear, rb.rgb_linear,
                                     sc.dark_high[t], sc.bright[t], w, model.perc)
        scene_loss = geo + app
        add(c_geo)
        add(c_app)
        if stage == 3:
            phys, c_phys = loss_phys(rb.aux[..., 0], rb.aux[..., 1], rb.aux[..., 2],
                                     ts.decomp[t], w)
            scene_loss = scene_loss + phys
            add(c_phys)
        total = total + scene_loss / len(batch)

        s, d, dl = _style_entries(model, ts, out.styles)
        s_rows += s
        d_rows += d
        dlum_rows += dl
        all_mods += out.mods

    if stage >= 2:
        s_t = torch.stack(s_rows)
        d_t = torch.tensor(d_rows, dtype=s_t.dtype)
        dl_t = torch.tensor(dlum_rows, dtype=s_t.dtype)
        glob, c_glob = loss_global(s_t, d_t, dl_t, all_mods, w)
        total = total + glob
        comps.update(c_glob)
    return total, comps


# ------------------------------------------------------------ training loop

def run_training(cfg: TrainConfig, dataset: list[TrainScene] | None = None,
                 max_iters: int | None = None) -> dict:
    """Full three-stage run; returns a summary dict.

    max_iters optionally truncates the run (used by smoke tests); stage
    boundaries still follow the config.
    """
    torch.set_num_threads(1)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_config(cfg, os.path.join(cfg.out_dir, "config.yaml"))
    if dataset is None:
        dataset = build_dataset(cfg)

    model = init_model(cfg.model, seed=cfg.seed)
    stage = 1
    params = model.trainable(stage)
    optim = init_optim(params, lr=cfg.lr, horizon=cfg.stages[-1])
    rng = torch.Generator().manual_seed(cfg.seed + 7919)
    total_iters = cfg.stages[-1] if max_iters is None else min(max_iters, cfg.stages[-1])
    log_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    rescue_path = os.path.join(cfg.out_dir, "last_good.ckpt")
    # valid from the stage-2 switch on: every producer is frozen from there
    cache_store: dict[int, ContextCache] = {}

    with open(log_path, "w") as log:
        for it in range(total_iters):
            new_stage = stage_of(it, cfg.stages)
            if new_stage != stage:
                save_checkpoint(os.path.join(cfg.out_dir, f"stage{stage}.ckpt"),
                                model, optim, it, stage)
                stage = new_stage
                params = model.trainable(stage)
                optim = _carry_moments(optim, params)

            idx = [int(i) for i in torch.randint(len(dataset), (cfg.batch_scenes,),
                                                 generator=rng)]
            cams = torch.randint(len(dataset[0].scene.cams), (cfg.batch_scenes,),
                                 generator=rng)
            batch = [dataset[i] for i in idx]
            caches: list[ContextCache | None] = [None] * len(batch)
            if stage >= 2:
                for j, i in enumerate(idx):
                    if i not in cache_store:
                        sc = dataset[i].scene
                        cache_store[i] = build_context_cache(
                            [sc.dark_high[0], sc.dark_high[1]],
                            sc.cams_context, model.predictor)
                    caches[j] = cache_store[i]

            for p in params.values():
                p.requires_grad_(True)
            try:
                total, comps = compute_losses(model, batch, [int(c) for c in cams],
                                              stage, cfg.weights, caches)
                if not torch.isfinite(total):
                    save_checkpoint(rescue_path, model, optim, it, stage)
                    raise TrainingAborted(f"non-finite loss at iteration {it}",
                                          rescue_path)
                total.backward()
            finally:
                for p in params.values():
                    p.requires_grad_(False)
            grads = {k: p.grad for k, p in params.items()}
            lr_used = cosine_lr(optim)
            rejected = adam_step(optim, params, grads)
            for p in params.values():
                p.grad = None
            if rejected:
                save_checkpoint(rescue_path, model, optim, it, stage)
                raise TrainingAborted(
                    f"non-finite gradients at iteration {it}: {rejected[:4]}",
                    rescue_path)

            if it % cfg.log_every == 0:
                line = {"iter": it, "stage": stage, "lr": lr_used,
                        "total": float(total.detach())}
                line.update(comps)
                log.write(json.dumps(line) + "\n")

    final_path = os.path.join(cfg.out_dir, "final.ckpt")
    save_checkpoint(final_path, model, optim, total_iters, stage)
    report = evaluate_model(model, dataset)
    report["checkpoint"] = final_path
    report["metrics_log"] = log_path
    with open(os.path.join(cfg.out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    return report


# -------------------------------------------------------------- evaluation

def evaluate_model(model: Model, dataset: list[TrainScene]) -> dict:
    """Novel-view quality on each scene's target cameras."""
    enh_pred, enh_ref, dark_db = [], [], []
    with torch.no_grad():
        for ts in dataset:
            sc = ts.scene
            out = enhance(model, [sc.dark_high[0], sc.dark_high[1]], sc.cams_context)
            for k, cam in enumerate(sc.cams_target):
                t = 2 + k
                rb = render(out.final_field, cam)
                rd = render(out.field_dark, cam)
                enh_pred.append(rb.rgb)
                enh_ref.append(sc.bright[t])
                dark_db.append(psnr(rd.rgb, sc.dark_high[t]))
    rep = evaluate_views(enh_pred, enh_ref)
    return {
        "enhanced_psnr": rep.psnr,
        "enhanced_ssim": rep.ssim,
        "dark_psnr": sum(dark_db) / len(dark_db),
        "per_view_psnr": [r[0] for r in rep.per_view],
    }
