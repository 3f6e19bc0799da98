"""Scratch: full toy training via the real train loop (not part of the package)."""
import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, "tests")
from synthetic import write_corpus

from aict.codec import AICTModel
from aict.config import CodecConfig, LAMBDA_PRESETS
from aict.train import TrainSpec, train

quality = sys.argv[1]
steps = int(sys.argv[2])
out = Path(sys.argv[3])

corpus = Path("/tmp/toy_corpus_mix")
if not corpus.exists():
    write_corpus(corpus, 16, 192, 192, kind="smooth", seed0=0)
    write_corpus(corpus, 8, 192, 192, kind="medium", seed0=100)

cfg = CodecConfig(
    filters=(16, 24, 32, 40, 24, 24),
    depths=(1, 1, 1, 1, 1, 1, 1, 1),
    slice_count=5,
    charm_embed=32,
    scale_module_enabled=True,
    lrp_enabled=True,
    lmbda=LAMBDA_PRESETS[quality],
)
spec = TrainSpec(steps=steps, lmbda=cfg.lmbda, batch_size=2, crop=128,
                 final_phase_steps=max(1, steps // 10), seed=11)
torch.manual_seed(11)
model = AICTModel(cfg)
t0 = time.time()
result = train(model, spec, corpus, out, quality=quality, log_every=200)
print(f"{quality} done in {time.time()-t0:.0f}s: {result}", flush=True)
