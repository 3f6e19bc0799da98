"""Scratch: calibrate toy-training step budgets (not part of the package)."""
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, "tests")
from synthetic import held_out_images, write_corpus

from aict.codec import AICTModel
from aict.config import CodecConfig, LAMBDA_PRESETS
from aict.evaluation import psnr
from aict.train import TrainSpec, load_corpus, sample_crops, train_step

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 400
QUALITIES = sys.argv[2].split(",") if len(sys.argv) > 2 else ["q2"]

corpus_dir = Path("/tmp/toy_corpus")
if not corpus_dir.exists():
    write_corpus(corpus_dir, 24, 192, 192, kind="smooth")

def toy_cfg():
    return CodecConfig(
        filters=(16, 24, 32, 40, 24, 24),
        depths=(1, 1, 1, 1, 1, 1, 1, 1),
        slice_count=5,
        charm_embed=32,
        scale_module_enabled=True,
        lrp_enabled=True,
    )

held = held_out_images(10)

for q in QUALITIES:
    lmbda = LAMBDA_PRESETS[q]
    spec = TrainSpec(steps=STEPS, lmbda=lmbda, batch_size=2, crop=128,
                     final_phase_steps=max(1, STEPS // 10), seed=7)
    torch.manual_seed(7)
    model = AICTModel(toy_cfg())
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr_main,
                           betas=(spec.adam_beta1, spec.adam_beta2))
    rng = np.random.default_rng(7)
    images = load_corpus(corpus_dir, spec.crop)
    t0 = time.time()
    for step in range(spec.steps):
        lr = spec.lr_main if step < spec.steps - spec.final_phase_steps else spec.lr_final
        for g in opt.param_groups:
            g["lr"] = lr
        batch = sample_crops(images, spec.crop, spec.batch_size, rng)
        m = train_step(batch, model, opt, spec.effective_lmbda, spec.grad_clip)
        if step % 150 == 0 or step == spec.steps - 1:
            el = time.time() - t0
            print(f"[{q}] step {step:5d} loss={m['loss']:9.2f} D={m['D']:8.2f} "
                  f"R={m['R']:.3f} s={m.get('s_mean', 1):.3f} ({el:.0f}s)", flush=True)
    model.eval()
    model.update_tables(force=True)
    bpps, psnrs, ss = [], [], []
    for img in held:
        data, stats = model.encode_image(img)
        rec, _ = model.decode_image(data)
        bpps.append(stats["bpp_actual"])
        psnrs.append(psnr(img, rec))
        ss.append(stats["s"])
    print(f"== {q}: mean bpp={np.mean(bpps):.4f} mean psnr={np.mean(psnrs):.2f} "
          f"mean s={np.mean(ss):.3f} time={time.time()-t0:.0f}s", flush=True)
    torch.save({"q": q}, f"/tmp/done_{q}.pt")
