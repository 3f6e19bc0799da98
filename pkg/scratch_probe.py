"""Scratch: capacity/LR probe for the toy autoencoder (not part of the package)."""
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, "tests")
from synthetic import write_corpus

from aict.codec import AICTModel
from aict.config import CodecConfig
from aict.train import TrainSpec, load_corpus, sample_crops, train_step

corpus_dir = Path("/tmp/toy_corpus2")
if not corpus_dir.exists():
    write_corpus(corpus_dir, 24, 192, 192, kind="smooth")

CONFIGS = {
    "skinny_lr1": (dict(filters=(16, 24, 32, 40, 24, 24), charm_embed=32,
                        depths=(1, 1, 1, 1, 1, 1, 1, 1)), 1e-4),
    "skinny_lr3": (dict(filters=(16, 24, 32, 40, 24, 24), charm_embed=32,
                        depths=(1, 1, 1, 1, 1, 1, 1, 1)), 3e-4),
    "wide_lr3": (dict(filters=(32, 48, 64, 80, 48, 48), charm_embed=64,
                      depths=(1, 1, 1, 2, 1, 1, 1, 1)), 3e-4),
}

name = sys.argv[1]
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 1500
kw, lr = CONFIGS[name]
cfg = CodecConfig(slice_count=5, scale_module_enabled=False, lrp_enabled=True, **kw)
spec = TrainSpec(steps=steps, lmbda=0.002, batch_size=4, crop=64,
                 final_phase_steps=max(1, steps // 10), seed=7, lr_main=lr)
torch.manual_seed(7)
model = AICTModel(cfg)
opt = torch.optim.Adam(model.parameters(), lr=spec.lr_main)
rng = np.random.default_rng(7)
images = load_corpus(corpus_dir, spec.crop)
t0 = time.time()
best = float("inf")
for step in range(spec.steps):
    lr_now = spec.lr_main if step < spec.steps - spec.final_phase_steps else spec.lr_final
    for g in opt.param_groups:
        g["lr"] = lr_now
    batch = sample_crops(images, spec.crop, spec.batch_size, rng)
    m = train_step(batch, model, opt, spec.effective_lmbda, spec.grad_clip)
    best = min(best, m["D"])
    if step % 200 == 0 or step == spec.steps - 1:
        print(f"[{name}] step {step:5d} D={m['D']:8.2f} R={m['R']:.4f} "
              f"best={best:8.2f} ({time.time()-t0:.0f}s)", flush=True)
