"""Where does one depth query look among the pooled RGB tokens?

Trains briefly on synthetic scenes, then saves the cross-attention weights of a
query pixel at each stage as a P x P heatmap next to the scene.

Run: python demos/04_attention_map.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from dipformer import ModelConfig, no_grad
from dipformer.cli import heatmap
from dipformer.data import SynthSpec, generate_synthetic, write_rgb_png
from dipformer.lca import lca_attention_map
from dipformer.model import forward_trace
from dipformer.tensor import Tensor
from dipformer.trainer import TrainConfig, run_training

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/attention")
out.mkdir(parents=True, exist_ok=True)

scenes = generate_synthetic(SynthSpec(image_size=(64, 64), count=8, seed=3))
cfg = ModelConfig(n_cls=5, stage_channels=(16, 32, 32, 64), stage_heads=(1, 2, 2, 4),
                  decoder_channels=32, decoder_hidden=32)
params = run_training(cfg, TrainConfig(lr0=1e-3, total_steps=60, eval_every=60), scenes).params

s = scenes[0]
c, y0, y1, x0, x1 = s.regions[-1]  # the front-most object
print(f"query: centre of a class-{c} object at rows {y0}:{y1}, cols {x0}:{x1}")
write_rgb_png(out / "scene.png", s.rgb)
with no_grad():
    trace = forward_trace(Tensor(s.rgb[None]), Tensor(s.depth[None]), cfg, params)
for l, (pair, lp) in enumerate(zip(trace.stages, trace.lca_params), start=1):
    stride = 2**l
    h, w = pair.r_f.shape[2:]
    q = min((y0 + y1) // 2 // stride, h - 1) * w + min((x0 + x1) // 2 // stride, w - 1)
    attn = lca_attention_map(pair, lp, q)
    peak = tuple(int(i) for i in np.unravel_index(np.argmax(attn), attn.shape))
    print(f"stage {l}: {attn.shape[0]}x{attn.shape[1]} RGB tokens, peak at {peak}, weight {attn.max():.3f}")
    write_rgb_png(out / f"attn_stage{l}.png", heatmap(attn))
print(f"heatmaps in {out}")
