"""Ceiling probe: with geometry frozen at the stage-2 checkpoint, how well can
a raw per-primitive SH delta fit the bright targets?  Measures representation
headroom independent of the ICM/ARM networks."""
import dataclasses, json, math, sys, time
sys.path.insert(0, "/root/pkg/src")
import torch
torch.set_num_threads(1)

from lumisplat.config import toy_config
from lumisplat.training import build_dataset, load_checkpoint
from lumisplat.model import enhance
from lumisplat.rasterizer import render
from lumisplat.metrics import psnr

cfg = dataclasses.replace(toy_config(out_dir="/tmp/x"), n_scenes=2)
ds = build_dataset(cfg)
model, _, _, _ = load_checkpoint("/root/pkg/.trial/run2/stage2.ckpt")

results = []
for ts in ds:
    sc = ts.scene
    with torch.no_grad():
        out = enhance(model, [sc.dark_high[0], sc.dark_high[1]], sc.cams_context,
                      use_arm=False)
        base = out.field_global
        start = [float(psnr(render(base, c).rgb, sc.bright[2 + k]))
                 for k, c in enumerate(sc.cams_target)]
    delta = torch.zeros_like(base.sh, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=2e-2)
    t0 = time.time()
    for it in range(240):
        opt.zero_grad()
        field = dataclasses.replace(base, sh=base.sh + delta)
        loss = torch.zeros(())
        for k, cam in enumerate(sc.cams):
            tgt = sc.bright[k]
            loss = loss + ((render(field, cam).rgb_linear - tgt) ** 2).mean()
        loss.backward()
        opt.step()
    with torch.no_grad():
        field = dataclasses.replace(base, sh=base.sh + delta)
        end = [float(psnr(render(field, c).rgb, sc.bright[2 + k]))
               for k, c in enumerate(sc.cams_target)]
    results.append({"start_psnr": start, "probe_psnr": end,
                    "minutes": (time.time() - t0) / 60})
    print(json.dumps(results[-1]))

print("MEAN start", sum(sum(r["start_psnr"]) for r in results) / (3 * len(results)))
print("MEAN probe", sum(sum(r["probe_psnr"]) for r in results) / (3 * len(results)))
