"""Overfit four synthetic RGB-D scenes and save the predicted masks.

Run: python demos/02_overfit_synthetic.py [out_dir]   (about three minutes)
"""

import sys
from pathlib import Path

import numpy as np

from dipformer import ModelConfig
from dipformer.cli import colorize
from dipformer.data import SynthSpec, generate_synthetic, stack, write_rgb_png
from dipformer.model import predict
from dipformer.trainer import TrainConfig, run_training

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/overfit")
out.mkdir(parents=True, exist_ok=True)

scenes = generate_synthetic(SynthSpec(image_size=(64, 64), count=4, seed=0))
cfg = ModelConfig(n_cls=5)
tcfg = TrainConfig(lr0=1e-3, warmup_steps=20, total_steps=300, eval_every=50)

result = run_training(cfg, tcfg, scenes, history_path=out / "history.csv")
for step, loss, miou in result.history:
    print(f"step {step:>4}  loss {loss:.4f}  train mIoU {miou:6.2f}")

rgb, depth, labels = stack(scenes)
pred = predict(rgb, depth, cfg, result.params)
for i in range(len(scenes)):
    # input | ground truth | prediction, side by side
    row = np.concatenate([np.moveaxis(rgb[i], 0, -1) * 255, colorize(labels[i], 5), colorize(pred[i], 5)], axis=1)
    write_rgb_png(out / f"scene{i}.png", row.astype(np.uint8))
print(f"pixel accuracy {100 * (pred == labels).mean():.2f}%, masks in {out}")
