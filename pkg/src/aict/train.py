"""Rate-distortion training: loss, schedule, data sampling, gradient checks."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import AICTModel, save_checkpoint
from .quant import bits_per_pixel, rate_estimate

__all__ = [
    "TrainSpec",
    "RATE_CALIBRATION",
    "rd_loss",
    "lr_schedule",
    "load_corpus",
    "sample_crops",
    "train_step",
    "train",
    "gradient_check",
]

# Pixel-scale calibration between the [0,255]^2 distortion and the bpp rate
# term.  The published rate weights balance a [0,1]-scale squared error
# against bits per pixel; multiplying the rate weight by 255^2 keeps that
# balance while distortion is reported on the PSNR-friendly scale.
RATE_CALIBRATION = 255.0 ** 2


@dataclass
class TrainSpec:
    steps: int
    lmbda: float
    batch_size: int = 8
    crop: int = 256
    lr_main: float = 1e-4
    lr_final: float = 1e-5
    final_phase_steps: int = 200_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    grad_clip: float = 1.0
    rate_calibration: float = RATE_CALIBRATION

    def __post_init__(self):
        if self.final_phase_steps > self.steps:
            raise ValueError("final_phase_steps must not exceed steps")
        if self.crop % 64:
            raise ValueError("crop must be a multiple of 64")
        if self.batch_size <= 0 or self.lmbda <= 0:
            raise ValueError("batch_size and lmbda must be positive")

    @property
    def effective_lmbda(self) -> float:
        return self.lmbda * self.rate_calibration


def rd_loss(x: torch.Tensor, x_hat: torch.Tensor, total_bits, pixel_count: int,
            lmbda: float):
    """Lagrangian ``D + lmbda * R``.

    ``D`` is the mean squared error with pixels scaled to [0, 255]; ``R`` is
    bits per pixel over both latent streams.
    """
    if x.shape != x_hat.shape:
        raise ValueError("original and reconstruction must share a shape")
    distortion = (((x - x_hat) * 255.0) ** 2).mean()
    rate = bits_per_pixel(total_bits, pixel_count)
    return distortion + lmbda * rate, distortion, rate


def lr_schedule(step: int, spec: TrainSpec) -> float:
    """Step schedule: the main rate until the final phase begins, then the
    final rate (closed interval at the boundary)."""
    if not 0 <= step < spec.steps:
        raise ValueError(f"step {step} outside [0, {spec.steps})")
    return spec.lr_final if step >= spec.steps - spec.final_phase_steps else spec.lr_main


def load_corpus(directory, crop: int) -> list[np.ndarray]:
    """Load every usable RGB image under ``directory``.

    Images smaller than the crop in either extent are skipped with a warning.
    """
    from PIL import Image

    usable = []
    paths = sorted(
        p for p in Path(directory).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".ppm")
    )
    for path in paths:
        try:
            img = np.asarray(Image.open(path).convert("RGB"))
        except Exception as err:  # unreadable file
            warnings.warn(f"skipping unreadable corpus image {path}: {err}")
            continue
        if img.shape[0] < crop or img.shape[1] < crop:
            warnings.warn(f"skipping {path}: smaller than the {crop}px crop")
            continue
        usable.append(img)
    if not usable:
        raise ValueError(f"no corpus image under {directory} admits a {crop}px crop")
    return usable


def sample_crops(images: list[np.ndarray], crop: int, batch_size: int,
                 rng: np.random.Generator) -> torch.Tensor:
    """Uniform random crops scaled to [0, 1], shaped (B, 3, crop, crop)."""
    batch = np.empty((batch_size, crop, crop, 3), dtype=np.float32)
    for b in range(batch_size):
        img = images[rng.integers(len(images))]
        top = rng.integers(img.shape[0] - crop + 1)
        left = rng.integers(img.shape[1] - crop + 1)
        batch[b] = img[top : top + crop, left : left + crop] / 255.0
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


def _model_rate_bits(out: dict) -> torch.Tensor:
    return rate_estimate(*out["y_masses"], out["z_masses"])


def train_step(batch: torch.Tensor, model: AICTModel, optimizer, lmbda: float,
               grad_clip: float = 1.0) -> dict:
    """One optimizer update; returns finite metrics or aborts with a dump."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(batch)
    pixels = batch.shape[0] * batch.shape[2] * batch.shape[3]
    total_bits = _model_rate_bits(out)
    loss, distortion, rate = rd_loss(batch, out["x_hat"], total_bits, pixels, lmbda)
    if not torch.isfinite(loss):
        raise RuntimeError(
            "non-finite training loss: "
            f"D={float(distortion)!r} R={float(rate)!r} "
            f"bits={float(total_bits)!r} "
            f"x_hat_range=({float(out['x_hat'].min())}, {float(out['x_hat'].max())})"
        )
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    model.invalidate_tables()
    metrics = {
        "loss": loss.item(),
        "D": distortion.item(),
        "R": rate.item(),
        "grad_norm": grad_norm.item(),
    }
    if out["s"] is not None:
        metrics["s_mean"] = out["s"].detach().mean().item()
    return metrics


def train(model: AICTModel, spec: TrainSpec, corpus_dir, out_dir,
          quality: str | None = None, log_every: int = 50) -> dict:
    """Full training loop; writes line-delimited metrics and a checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    images = load_corpus(corpus_dir, spec.crop)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=spec.lr_main, betas=(spec.adam_beta1, spec.adam_beta2)
    )
    metrics_path = out_dir / "metrics.jsonl"
    last = {}
    with open(metrics_path, "w") as metrics_file:
        for step in range(spec.steps):
            lr = lr_schedule(step, spec)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = sample_crops(images, spec.crop, spec.batch_size, rng)
            last = train_step(batch, model, optimizer, spec.effective_lmbda,
                              spec.grad_clip)
            if step % log_every == 0 or step == spec.steps - 1:
                record = {"step": step, "lr": lr, **last}
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
    ckpt = out_dir / "model.npz"
    save_checkpoint(model, ckpt, quality=quality, extra={"steps": spec.steps})
    return {"checkpoint": str(ckpt), "metrics": str(metrics_path), **last}


def gradient_check(model: AICTModel, tolerance: float = 1e-3, input_size: int = 64,
                   samples_per_tensor: int = 1, seed: int = 0,
                   param_filter=None, max_tensors: int | None = None) -> dict:
    """Compare autodiff against central differences on the full RD loss.

    The model runs in double precision with frozen quantization noise (the
    seed pins every draw) and with every straight-through rounding replaced
    by its noise surrogate, so the loss is smooth in the parameters and the
    comparison is well-posed.  Returns a report with the worst relative error
    per parameter tensor; parameters that receive no gradient are reported
    rather than failed, so detached negative controls are visible.
    """
    model = model.double()
    torch.manual_seed(seed)
    x = torch.rand(1, 3, input_size, input_size, dtype=torch.float64)
    lmbda = 0.002 * RATE_CALIBRATION

    def loss_value() -> torch.Tensor:
        torch.manual_seed(seed + 1)  # freeze the additive-noise draws
        out = model(x, smooth_quant=True)
        pixels = x.shape[0] * x.shape[2] * x.shape[3]
        bits = _model_rate_bits(out)
        loss = rd_loss(x, out["x_hat"], bits, pixels, lmbda)[0]
        # O(1) loss scale keeps finite-difference roundoff far below the
        # gradients being verified
        return loss / RATE_CALIBRATION

    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    frozen = [n for n, p in model.named_parameters() if not p.requires_grad]
    if param_filter is not None:
        trainable = [(n, p) for n, p in trainable if param_filter(n)]
    if max_tensors is not None and len(trainable) > max_tensors:
        # round-robin across top-level modules so every path stays covered
        groups: dict[str, list] = {}
        for item in trainable:
            groups.setdefault(item[0].split(".")[0], []).append(item)
        sub_rng = np.random.default_rng(seed + 7)
        for g in groups.values():
            sub_rng.shuffle(g)
        picked, gi = [], 0
        names = list(groups)
        while len(picked) < max_tensors and any(groups.values()):
            g = groups[names[gi % len(names)]]
            if g:
                picked.append(g.pop())
            gi += 1
        trainable = picked
    base = loss_value()
    grads = torch.autograd.grad(base, [p for _, p in trainable], allow_unused=True)

    rng = np.random.default_rng(seed)
    report = {"max_rel_err": 0.0, "worst_param": None,
              "zero_grad_params": list(frozen), "checked": 0, "params": {}}
    h = 1e-4
    for (name, param), grad in zip(trainable, grads):
        if grad is None:
            report["zero_grad_params"].append(name)
            continue
        flat = param.data.view(-1)
        idxs = rng.choice(flat.numel(), size=min(samples_per_tensor, flat.numel()),
                          replace=False)
        worst = 0.0
        for idx in idxs:
            idx = int(idx)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss_value().item()
            flat[idx] = orig - h
            down = loss_value().item()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            ad = grad.view(-1)[idx].item()
            # relative error with an absolute floor: below ~1e-5 the
            # comparison is dominated by evaluation roundoff
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-5)
            worst = max(worst, rel)
            report["checked"] += 1
        report["params"][name] = worst
        if worst > report["max_rel_err"]:
            report["max_rel_err"] = worst
            report["worst_param"] = name
    report["passed"] = report["max_rel_err"] <= tolerance
    if not report["passed"]:
        report["failure"] = (
            f"parameter {report['worst_param']} exceeds tolerance: "
            f"{report['max_rel_err']:.3e} > {tolerance:.0e}"
        )
    return report
