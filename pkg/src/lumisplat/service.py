"""HTTP render service: one enhanced scene behind three endpoints.

The expensive work (field prediction, style extraction, local residuals)
happens once at startup and lives in an immutable snapshot; every request
recomputes only the global brightness modulation for its s_bright and
rasterizes.  Reloading a field swaps the snapshot attribute atomically, so
in-flight requests finish against the old one.
"""
from __future__ import annotations

import dataclasses
import math

import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

import numpy as np

from .config import TrainConfig, load_config
from .fieldfile import load_field_file
from .gaussians import Camera
from .image import mean_luminance, png_bytes
from .model import (EnhanceOutput, Model, S_BRIGHT_RANGE, SWEEP_POINTS,
                    enhance, enhanced_field_at)
from .rasterizer import render
from .scenes import SyntheticScene, make_scene
from .training import load_checkpoint

DEFAULT_RESOLUTION = 128
MAX_RESOLUTION = 256


# ------------------------------------------------------------ wire format

class RenderRequest(BaseModel):
    """Camera plus brightness control; matches the CLI render flags."""

    pose: list[float] = Field(description="row-major 3x4 world-to-camera")
    intrinsics: list[float] = Field(description="fx, fy, cx, cy in pixels")
    resolution: tuple[int, int] = Field(description="width, height")
    s_bright: float = 0.0
    encoding: str = "png"


def camera_from_wire(pose: list[float], intrinsics: list[float],
                     width: int, height: int, near: float, far: float) -> Camera:
    if len(pose) != 12:
        raise ValueError("pose must hold 12 floats (row-major 3x4)")
    if len(intrinsics) != 4:
        raise ValueError("intrinsics must hold 4 floats (fx, fy, cx, cy)")
    m = torch.tensor(pose, dtype=torch.float32).reshape(3, 4)
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, R=m[:, :3].contiguous(),
                  t=m[:, 3].contiguous(), width=width, height=height,
                  near=near, far=far)


def camera_to_wire(cam: Camera) -> dict:
    pose = torch.cat([cam.R, cam.t.unsqueeze(1)], dim=1).reshape(-1)
    return {
        "pose": [float(v) for v in pose],
        "intrinsics": [cam.fx, cam.fy, cam.cx, cam.cy],
        "resolution": [cam.width, cam.height],
    }


def scale_camera(cam: Camera, width: int, height: int) -> Camera:
    """Same view frustum at a different pixel grid."""
    sx, sy = width / cam.width, height / cam.height
    return dataclasses.replace(cam, fx=cam.fx * sx, fy=cam.fy * sy,
                               cx=cam.cx * sx, cy=cam.cy * sy,
                               width=width, height=height)


# -------------------------------------------------------------- snapshot

@dataclasses.dataclass(frozen=True)
class Snapshot:
    """Everything a request needs, read-only after construction."""

    model: Model
    base: EnhanceOutput
    cams_context: list[Camera]
    default_camera: Camera
    file_count: int
    file_degree: int
    file_provenance: str
    max_resolution: int = MAX_RESOLUTION


def load_snapshot(checkpoint: str, field: str | None, cfg: TrainConfig | str,
                  scene_index: int = 0,
                  resolution: int = DEFAULT_RESOLUTION,
                  max_resolution: int = MAX_RESOLUTION) -> Snapshot:
    """Load model and field, enhance the scene once, fail fast on mismatch.

    Without a field file the pipeline's own dark field supplies the metadata;
    the CLI render path uses that, the service always pins a file.
    """
    if isinstance(cfg, str):
        cfg = load_config(cfg)
    model, _, _, _ = load_checkpoint(checkpoint)
    scene = scene_for(cfg, scene_index)
    with torch.no_grad():
        base = enhance(model, [scene.dark_high[0], scene.dark_high[1]],
                       scene.cams_context)
    stored = load_field_file(field) if field is not None else base.field_dark
    if len(base.field_dark) != len(stored):
        raise ValueError(
            f"field file holds {len(stored)} primitives but the checkpoint "
            f"predicts {len(base.field_dark)} for scene {scene_index}")
    default_cam = scale_camera(scene.cams_target[len(scene.cams_target) // 2],
                               resolution, resolution)
    return Snapshot(model=model, base=base, cams_context=scene.cams_context,
                    default_camera=default_cam, file_count=len(stored),
                    file_degree=stored.sh_degree,
                    file_provenance=stored.provenance,
                    max_resolution=max_resolution)


def scene_for(cfg: TrainConfig, index: int) -> SyntheticScene:
    """The training scene at this index (same seed convention as the loop)."""
    if not 0 <= index < cfg.n_scenes:
        raise ValueError(f"scene index must be in [0, {cfg.n_scenes})")
    return make_scene(cfg.scene, seed=cfg.seed * 1000 + index)


def render_frame(snap: Snapshot, cam: Camera, s_bright: float) -> bytes:
    """PNG of the enhanced field at this brightness; the CLI shares this."""
    with torch.no_grad():
        field = enhanced_field_at(snap.model, snap.base, snap.cams_context,
                                  s_bright)
        out = render(field, cam)
    return png_bytes(out.rgb.numpy())


def frame_luminance(snap: Snapshot, cam: Camera, s_bright: float) -> float:
    """Mean luma of the frame as a PNG consumer would measure it."""
    with torch.no_grad():
        field = enhanced_field_at(snap.model, snap.base, snap.cams_context,
                                  s_bright)
        out = render(field, cam)
    quantized = np.clip(np.round(out.rgb.numpy() * 255.0), 0, 255) / 255.0
    return mean_luminance(quantized)


# ------------------------------------------------------------------ app

def create_app(snapshot: Snapshot) -> FastAPI:
    app = FastAPI(title="lumisplat render service")
    app.state.snapshot = snapshot

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"error": "malformed request",
                                     "detail": exc.errors()})

    @app.get("/meta")
    def meta():
        snap: Snapshot = app.state.snapshot
        field = snap.base.field_dark
        return {
            "primitive_count": snap.file_count,
            "sh_degree": snap.file_degree,
            "provenance": snap.file_provenance,
            "s_bright_range": list(S_BRIGHT_RANGE),
            "sweep_points": list(SWEEP_POINTS),
            "default_camera": camera_to_wire(snap.default_camera),
            "max_resolution": snap.max_resolution,
            "field": {
                "center": [float(v) for v in field.mu.mean(dim=0)],
                "extent": [float(v) for v in
                           (field.mu.max(dim=0).values - field.mu.min(dim=0).values)],
            },
        }

    @app.post("/render")
    def render_endpoint(req: RenderRequest):
        snap: Snapshot = app.state.snapshot
        if req.encoding != "png":
            return JSONResponse(status_code=400,
                                content={"error": "malformed request",
                                         "detail": "png is the only encoding"})
        w, h = req.resolution
        if not (16 <= w <= snap.max_resolution and 16 <= h <= snap.max_resolution):
            return JSONResponse(status_code=400,
                                content={"error": "malformed request",
                                         "detail": f"resolution outside [16, {snap.max_resolution}]"})
        if not math.isfinite(req.s_bright):
            return JSONResponse(status_code=400,
                                content={"error": "malformed request",
                                         "detail": "s_bright must be finite"})
        try:
            cam = camera_from_wire(req.pose, req.intrinsics, w, h,
                                   snap.default_camera.near,
                                   snap.default_camera.far)
        except ValueError as e:
            return JSONResponse(status_code=400,
                                content={"error": "malformed request",
                                         "detail": str(e)})
        try:
            data = render_frame(snap, cam, req.s_bright)
        except Exception as e:  # pure render path; any failure is server-side
            return JSONResponse(status_code=500,
                                content={"error": "render failure",
                                         "detail": str(e)})
        return Response(content=data, media_type="image/png")

    @app.get("/sweep")
    def sweep(n: int = len(SWEEP_POINTS)):
        snap: Snapshot = app.state.snapshot
        if not 2 <= n <= 32:
            return JSONResponse(status_code=400,
                                content={"error": "malformed request",
                                         "detail": "n must be in [2, 32]"})
        lo, hi = S_BRIGHT_RANGE
        entries = []
        for i in range(n):
            s = lo + (hi - lo) * i / (n - 1)
            entries.append({"s": s,
                            "mean_luminance": frame_luminance(
                                snap, snap.default_camera, s)})
        return {"entries": entries}

    return app


def swap_field(app: FastAPI, snapshot: Snapshot) -> None:
    """Atomic snapshot replacement; in-flight requests keep the old one."""
    app.state.snapshot = snapshot
