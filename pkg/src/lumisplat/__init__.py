"""lumisplat: dark-to-bright novel view synthesis with 3D Gaussian fields."""

import torch

# single-threaded math keeps loss logs bitwise-reproducible across runs
torch.set_num_threads(1)

__version__ = "0.1.0"
