"""Command-line front end.

Every subcommand is a thin shim over the library: parse flags, call one or
two functions, write files, print a machine-readable JSON record to stdout.
The render and sweep paths share the service's frame helper so a CLI render
and an HTTP render of the same camera produce byte-identical PNGs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import load_config, toy_config
from .darkening import DarknessParams, darken_image, sample_pair
from .fieldfile import FieldFileError, save_field_file
from .image import load_png, mean_luminance, save_png
from .metrics import psnr, ssim
from .model import SWEEP_POINTS
from .scenes import SceneSpec, make_scene
from .service import (DEFAULT_RESOLUTION, Snapshot, camera_from_wire,
                      camera_to_wire, create_app, load_snapshot, render_frame,
                      scale_camera)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def _resolution(text: str) -> tuple[int, int]:
    w, h = text.lower().split("x")
    return int(w), int(h)


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _request_camera(args: argparse.Namespace, snap: Snapshot):
    """Camera from --pose/--intrinsics/--resolution, defaulting per field."""
    cam = snap.default_camera
    if args.resolution is not None:
        cam = scale_camera(cam, *args.resolution)
    if args.pose is not None or args.intrinsics is not None:
        pose = args.pose if args.pose is not None \
            else camera_to_wire(cam)["pose"]
        intr = args.intrinsics if args.intrinsics is not None \
            else camera_to_wire(cam)["intrinsics"]
        cam = camera_from_wire(pose, intr, cam.width, cam.height,
                               cam.near, cam.far)
    return cam


# ---------------------------------------------------------- subcommands

def cmd_synth_data(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.scenes):
        seed = args.seed * 1000 + i
        scene = make_scene(SceneSpec(), seed=seed)
        sdir = out / f"scene_{i:03d}"
        sdir.mkdir(exist_ok=True)
        names = [f"context_{k}" for k in range(len(scene.cams_context))] + \
                [f"target_{k}" for k in range(len(scene.cams_target))]
        for name, cam, bright, dh, dl in zip(names, scene.cams, scene.bright,
                                             scene.dark_high, scene.dark_low):
            save_png(sdir / f"{name}_bright.png", bright.numpy())
            save_png(sdir / f"{name}_dark_high.png", dh.numpy())
            save_png(sdir / f"{name}_dark_low.png", dl.numpy())
        cams = [camera_to_wire(c) for c in scene.cams]
        (sdir / "cams.json").write_text(json.dumps(cams, indent=1))
        entries.append({
            "dir": sdir.name, "seed": seed, "views": len(scene.cams),
            "d_high": scene.d_high, "d_low": scene.d_low,
            "mean_luminance_bright": float(np.mean(
                [mean_luminance(b.numpy()) for b in scene.bright])),
            "mean_luminance_dark_high": float(np.mean(
                [mean_luminance(b.numpy()) for b in scene.dark_high])),
        })
    manifest = {"seed": args.seed, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    _emit({"command": "synth-data", "out": str(out), "scenes": len(entries)})
    return 0


def cmd_darken(args: argparse.Namespace) -> int:
    img = load_png(args.input)
    if args.pair:
        low, high, d_low, d_high = sample_pair(img, args.d_low, args.d,
                                               seed=args.seed)
        stem = Path(args.out)
        p_low = stem.with_name(stem.stem + "_low" + stem.suffix)
        p_high = stem.with_name(stem.stem + "_high" + stem.suffix)
        save_png(p_low, low)
        save_png(p_high, high)
        _emit({"command": "darken", "pair": True, "d_low": d_low,
               "d_high": d_high, "out_low": str(p_low), "out_high": str(p_high)})
        return 0
    dark = darken_image(img, DarknessParams(d=args.d), seed=args.seed)
    save_png(args.out, dark)
    _emit({"command": "darken", "d": args.d, "seed": args.seed,
           "out": args.out,
           "luminance_in": mean_luminance(img),
           "luminance_out": mean_luminance(dark)})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .training import run_training

    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = toy_config()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    report = run_training(cfg, max_iters=args.max_iters)
    _emit({"command": "train", "out_dir": cfg.out_dir, **report})
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    snap = load_snapshot(args.checkpoint, args.field, args.config, args.scene)
    cam = _request_camera(args, snap)
    data = render_frame(snap, cam, args.s)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(data)
    _emit({"command": "render", "out": args.out, "s_bright": args.s,
           "resolution": [cam.width, cam.height],
           "mean_luminance": mean_luminance(load_png(args.out))})
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    snap = load_snapshot(args.checkpoint, args.field, args.config, args.scene)
    cam = _request_camera(args, snap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(args.s):
        path = out / f"sweep_{i:02d}.png"
        path.write_bytes(render_frame(snap, cam, s))
        entries.append({"s": s, "file": path.name,
                        "mean_luminance": mean_luminance(load_png(path))})
    manifest = {"resolution": [cam.width, cam.height], "entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    _emit({"command": "sweep", "out": str(out),
           "s_values": args.s,
           "mean_luminance": [e["mean_luminance"] for e in entries]})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    import torch

    pred = torch.from_numpy(load_png(args.pred))
    target = torch.from_numpy(load_png(args.target))
    record = {"command": "eval", "pred": args.pred, "target": args.target,
              "psnr": psnr(pred, target), "ssim": ssim(pred, target)}
    if args.out is not None:
        Path(args.out).write_text(json.dumps(record, sort_keys=True))
    _emit(record)
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    from .model import enhanced_field_at

    snap = load_snapshot(args.checkpoint, None, args.config, args.scene)
    if args.stage == "dark":
        field = snap.base.field_dark
    elif args.stage == "global":
        field = snap.base.field_global
    else:
        import torch
        with torch.no_grad():
            field = enhanced_field_at(snap.model, snap.base,
                                      snap.cams_context, args.s)
    save_field_file(field, args.out)
    _emit({"command": "export", "out": args.out, "stage": args.stage,
           "count": len(field), "sh_degree": field.sh_degree,
           "provenance": field.provenance})
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    snap = load_snapshot(args.checkpoint, args.field, args.config, args.scene,
                         resolution=args.resolution)
    app = create_app(snap)
    _emit({"command": "serve", "host": args.host, "port": args.port,
           "primitives": snap.file_count})
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -------------------------------------------------------------- parser

def _add_model_source(p: argparse.ArgumentParser, field_required: bool = False,
                      field_allowed: bool = True) -> None:
    p.add_argument("--checkpoint", required=True, help="trained .ckpt file")
    p.add_argument("--config", required=True,
                   help="training config.yaml; supplies the scene recipe")
    p.add_argument("--scene", type=int, default=0,
                   help="training scene index for the context views")
    if field_allowed:
        p.add_argument("--field", required=field_required, default=None,
                       help=".splb field file" +
                            ("" if field_required else " (optional cross-check)"))


def _add_camera_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pose", type=_floats, default=None,
                   help="12 floats, row-major 3x4 world-to-camera")
    p.add_argument("--intrinsics", type=_floats, default=None,
                   help="fx,fy,cx,cy in pixels")
    p.add_argument("--resolution", type=_resolution, default=None,
                   help="WxH, e.g. 128x128")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lumisplat",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic scene corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("darken", help="apply the darkening operator to a PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=float, default=0.7, help="darkness level in [0, 1]")
    p.add_argument("--d-low", type=float, default=0.3,
                   help="second level when --pair is set")
    p.add_argument("--pair", action="store_true",
                   help="write a correlated low/high pair instead")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_darken)

    p = sub.add_parser("train", help="run the three-stage training loop")
    p.add_argument("--config", default=None, help="YAML config; toy defaults if omitted")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="override the run directory")
    p.add_argument("--max-iters", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render one enhanced view to PNG")
    _add_model_source(p)
    _add_camera_flags(p)
    p.add_argument("--s", type=float, default=0.0, help="brightness override")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("sweep", help="render a brightness sweep plus manifest")
    _add_model_source(p)
    _add_camera_flags(p)
    p.add_argument("--s", type=_floats, default=list(SWEEP_POINTS),
                   help="comma-separated brightness values")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="PSNR and SSIM between two PNGs")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", default=None, help="also write the JSON record here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export", help="write a field to a .splb file")
    _add_model_source(p, field_allowed=False)
    p.add_argument("--stage", choices=["dark", "global", "bright"],
                   default="dark")
    p.add_argument("--s", type=float, default=None,
                   help="brightness override for --stage bright")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("serve", help="serve the render HTTP API")
    _add_model_source(p, field_required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION,
                   help="default camera resolution advertised by /meta")
    p.set_defaults(fn=cmd_serve)

    return ap


def _glue_s_values(argv: list[str]) -> list[str]:
    """Rewrite "--s -1.0,0,1.5" to "--s=-1.0,0,1.5".

    argparse reads a leading dash as an option; gluing keeps negative
    brightness values usable in the documented space-separated form.
    """
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--s" and i + 1 < len(argv):
            out.append("--s=" + argv[i + 1])
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    args = build_parser().parse_args(_glue_s_values(argv))
    try:
        return args.fn(args)
    except (ValueError, OSError, FieldFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
