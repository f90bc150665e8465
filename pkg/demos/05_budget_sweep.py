"""Driving the labeled-budget sweep through the command line.

Equivalent shell session:

    segadapt sweep --config demo.yaml --axis budget --values 0,10 \
        --modes source_only,global --seeds 0 --out sweep_demo

The sweep writes one run directory per cell plus summary.csv (axis value x
mode table of final mIoU) and a monotonicity report for budget axes.
"""

import tempfile
from pathlib import Path

import yaml

from segadapt.cli import main

config = {
    "dataset": {
        "resolution": [32, 32],
        "plan": {"n_source": 80, "n_target_labeled": 10, "n_target_unlabeled": 40, "n_target_val": 25, "seed": 0},
    },
    "model": {"feature_channels": 16, "generator_widths": [12, 16, 16], "semantic_hidden": 64},
    "training": {"max_iterations": 300, "eval_every": 100, "generator_lr": 0.005},
}

workdir = Path(tempfile.mkdtemp(prefix="segadapt_demo_"))
cfg_path = workdir / "demo.yaml"
cfg_path.write_text(yaml.safe_dump(config))

code = main([
    "sweep", "--config", str(cfg_path),
    "--axis", "budget", "--values", "0,10",
    "--modes", "source_only,global",
    "--seeds", "0",
    "--out", str(workdir / "sweep_demo"),
])
assert code == 0

print("\nsummary.csv:")
print((workdir / "sweep_demo" / "summary.csv").read_text())
print(f"artifacts under {workdir}/sweep_demo (runs/, runs.csv, monotonicity.txt)")
