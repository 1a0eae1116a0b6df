import dataclasses, json, time, torch
torch.set_num_threads(1)
from lumisplat.config import toy_config
from lumisplat.training import run_training, build_dataset, evaluate_model, load_checkpoint

cfg = dataclasses.replace(toy_config(out_dir="/root/pkg/.trial/run"), stages=(200, 800, 3000))
t0 = time.time()
ds = build_dataset(cfg)
rep = run_training(cfg, dataset=ds)
rep["minutes"] = round((time.time() - t0) / 60, 1)
# also evaluate the stage-1 checkpoint for a geometry-drift comparison
m1, _, _, _ = load_checkpoint("/root/pkg/.trial/run/stage1.ckpt")
rep1 = evaluate_model(m1, ds)
rep["stage1_dark_psnr"] = rep1["dark_psnr"]
with open("/root/pkg/.trial/summary.json", "w") as f:
    json.dump(rep, f, indent=2)
print(json.dumps(rep, indent=2))
