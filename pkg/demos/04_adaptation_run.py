"""A small end-to-end adaptation run (about a minute on a laptop CPU).

Trains the source-only baseline and the globally-adapted model on a reduced
version of the benchmark, then scores both on held-out target images. The
full-size protocol lives in the acceptance tests and the CLI.
"""

import numpy as np

from segadapt.config import DatasetConfig
from segadapt.data import SplitPlan, make_splits
from segadapt.networks import ModelConfig
from segadapt.training import TrainConfig, train

base = DatasetConfig()
plan = SplitPlan(n_source=120, n_target_labeled=10, n_target_unlabeled=60, n_target_val=40, seed=0)
bundle = make_splits(plan, base.source, base.target, base.resolution)
model = ModelConfig(feature_channels=32, generator_widths=(16, 32, 32), semantic_hidden=256)

results = {}
for mode in ("source_only", "global", "semantic_conv"):
    cfg = TrainConfig(mode=mode, max_iterations=600, eval_every=150, seed=0, generator_lr=0.005)
    result = train(cfg, bundle, model_config=model)
    results[mode] = result
    trail = " -> ".join(f"{r['miou']:.3f}" for r in result.metrics if "miou" in r)
    print(f"{mode:13s} target-val mIoU {trail}")

print("\nfinal target-val mIoU")
for mode, result in results.items():
    print(f"  {mode:13s} {result.final_miou:.3f} (best {result.best_miou:.3f})")
print("\nper-class IoU of the semantic run:")
last = results["semantic_conv"].metrics[-1]["per_class_iou"]
for k in sorted(last, key=int):
    print(f"  class {k}: {last[k]:.3f}")
