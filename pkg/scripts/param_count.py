"""Print parameter counts per module group for a few channel layouts."""
import math
from collections import Counter

from chadet.net import StageConfig, param_count, param_layout

LAYOUTS = {"default": [16, 32, 64, 128], "wide": [32, 64, 128, 256], "narrow": [8, 16, 32, 64]}

for name, channels in LAYOUTS.items():
    cfg = StageConfig(channels=channels)
    groups = Counter()
    for key, (shape, _, _) in param_layout(cfg).items():
        groups[key.split(".")[0]] += math.prod(shape)
    print(f"{name:8s} {channels}  total {param_count(cfg):>10,}")
    for g, n in sorted(groups.items()):
        print(f"    {g:9s} {n:>10,}")
