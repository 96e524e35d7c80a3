"""Two classes share one color and differ only in depth. Which arms can tell them apart?

The RGB-only bound is the best pair IoU any color-only per-pixel rule can reach.
Arms that route depth through the encoder should clear it comfortably.

Run: python demos/03_depth_ablation.py   (a few minutes on a laptop CPU)
"""

from dipformer import ModelConfig
from dipformer.data import SynthSpec, generate_synthetic, rgb_only_bayes_accuracy, rgb_only_iou_bound
from dipformer.trainer import TrainConfig, run_ablation

scenes = generate_synthetic(SynthSpec(image_size=(32, 32), count=120, seed=7))
train, test = scenes[:96], scenes[96:]
pair = (2, 3)
print(f"RGB-only accuracy on classes {pair}: {100 * rgb_only_bayes_accuracy(test, pair):.1f}%")
print(f"RGB-only pair IoU bound: {rgb_only_iou_bound(test, pair):.1f}\n")

base = ModelConfig(stage_channels=(16, 32, 32, 64), stage_heads=(1, 2, 2, 4), n_cls=5,
                   decoder_channels=32, decoder_hidden=32, image_size=(32, 32))
tcfg = TrainConfig(lr0=2e-3, warmup_steps=15, total_steps=300, batch_size=8, eval_every=300)
table = run_ablation(["baseline", "+sao", "+lca", "+sao&lca", "pe=depth_add"], base, tcfg, train, test, pair)
print(table.to_text())
