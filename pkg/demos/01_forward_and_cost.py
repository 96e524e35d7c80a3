"""Build the model, look at the feature pyramid, and count where the work goes.

Run: python demos/01_forward_and_cost.py
"""

import numpy as np

from dipformer import ModelConfig, arm_config, init_params, no_grad
from dipformer.cli import bench_counts
from dipformer.model import forward_trace, parameter_count
from dipformer.tensor import Tensor

cfg = ModelConfig(n_cls=19, image_size=(64, 64))
params = init_params(cfg)
rng = np.random.default_rng(0)
rgb = Tensor(rng.random((1, 3, 64, 64)))
depth = Tensor(rng.random((1, 1, 64, 64)))

with no_grad():
    trace = forward_trace(rgb, depth, cfg, params)

print("fused features per stage:")
for l, f in enumerate(trace.features, start=1):
    print(f"  stage {l}: {f.shape[1]:>3} channels at {f.shape[2]}x{f.shape[3]}")
print(f"decoder logits {trace.decoder_logits.shape}, upsampled {trace.logits.shape}")

# the four ablation arms differ only in how depth enters the encoder
print("\nparameters per arm:")
for arm in ("baseline", "+sao", "+lca", "+sao&lca"):
    print(f"  {arm:<10} {parameter_count(init_params(arm_config(cfg, arm))):>9,d}")

# pooled key/value tokens stay at P*P, so cross-attention grows linearly in pixels
print("\nmultiply-adds (millions) by input side:")
print(f"  {'size':>5} {'sao':>9} {'lca':>9} {'scores':>9} {'decoder':>9} {'total':>9}  kv tokens per stage")
for size in (64, 128, 256):
    c = bench_counts(cfg, size)
    kv = [int(c[f"kv_tokens_s{l}"]) for l in range(1, 5)]
    row = " ".join(f"{c[k] / 1e6:>9.2f}" for k in ("sao", "lca", "lca_scores", "decoder", "total"))
    print(f"  {size:>5} {row}  {kv}")
