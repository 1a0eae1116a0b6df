import dataclasses, json, sys, time
sys.path.insert(0, "/root/pkg/src")
import torch
torch.set_num_threads(1)
from lumisplat.config import toy_config
from lumisplat.training import run_training

cfg = dataclasses.replace(toy_config(out_dir="/root/pkg/.trial/run2", seed=0),
                          stages=(500, 1500, 4000), log_every=10)
t0 = time.time()
report = run_training(cfg)
report["wall_seconds"] = time.time() - t0
with open("/root/pkg/.trial/summary2.json", "w") as f:
    json.dump(report, f, indent=2)
print(json.dumps(report, indent=2))
