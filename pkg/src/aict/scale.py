"""Adaptive spatial resolution: resize-factor prediction, differentiable
bicubic resampling on an explicit sampling grid, and the learnable
pre-/post-processors sandwiching the resampler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bitstream import s_to_u16, u16_to_s
from .config import ceil_to
from .layers import ConvNeXtBlock, ResBlock

__all__ = [
    "S_MIN",
    "ResizeDecision",
    "decision_from_s",
    "ResizeParamNet",
    "make_grid",
    "bicubic_resample",
    "PrePostProcessor",
    "ScaleAdapter",
]

# Lower bound on the resize factor; the raw sigmoid output may reach values
# that collapse the coded image to nothing.
S_MIN = 0.25

# Reference factor anchoring the smooth verification grids.
_S_REF = 0.5


@dataclass(frozen=True)
class ResizeDecision:
    """Resize factor and the target extents both codec sides derive from it."""

    s_u16: int
    target_height: int
    target_width: int
    padded_height: int
    padded_width: int
    skipped: bool

    @property
    def s(self) -> float:
        return u16_to_s(self.s_u16)


def decision_from_s(s_u16: int, padded_height: int, padded_width: int) -> ResizeDecision:
    """Deterministic targets from the header-grid resize factor.

    Encoder and decoder both call this with identical integers, so the skip
    rule and target sizes agree exactly on both sides.
    """
    s = u16_to_s(s_u16)
    th = ceil_to(max(1, math.ceil(s * padded_height)), 64)
    tw = ceil_to(max(1, math.ceil(s * padded_width)), 64)
    skipped = (th, tw) == (padded_height, padded_width)
    return ResizeDecision(
        s_u16=s_u16,
        target_height=th,
        target_width=tw,
        padded_height=padded_height,
        padded_width=padded_width,
        skipped=skipped,
    )


class ResizeParamNet(nn.Module):
    """Small conv net regressing the scalar resize factor in (0, 1).

    Stem conv, three stages of residual block plus stride-2 downsampling
    over a (16, 32, 64) channel ladder, global average pool, dense, sigmoid.
    """

    def __init__(self):
        super().__init__()
        ladder = (16, 32, 64)
        self.stem = nn.Conv2d(3, ladder[0], 3, padding=1)
        stages = []
        for i, ch in enumerate(ladder):
            nxt = ladder[min(i + 1, len(ladder) - 1)]
            stages.append(nn.Sequential(ResBlock(ch), nn.Conv2d(ch, nxt, 3, stride=2, padding=1)))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(ladder[-1], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Raw resize factor per batch item, shaped (B,)."""
        f = self.stages(F.relu(self.stem(x)))
        pooled = f.mean(dim=(2, 3))
        return torch.sigmoid(self.head(pooled)).squeeze(1)


def make_grid(scale: torch.Tensor | float, in_size: int, out_size: int) -> torch.Tensor:
    """Input sampling coordinates along one axis for ``out_size`` outputs.

    ``scale`` is the number of input pixels covered per output pixel; the
    sampled span is centered and corner-aligned when ``out_size * scale``
    equals ``in_size``.  Differentiable with respect to ``scale`` (the
    integer sizes are gradient constants).
    """
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    scale = scale if torch.is_tensor(scale) else torch.tensor(float(scale))
    idx = torch.arange(out_size, dtype=scale.dtype, device=scale.device)
    center_in = (in_size - 1) / 2.0
    center_out = (out_size - 1) / 2.0
    if out_size == 1:
        return center_in + 0.0 * scale.reshape(())
    step = (out_size * scale - 1.0) / (out_size - 1)
    return center_in + (idx - center_out) * step


def _keys_weights(t: torch.Tensor) -> torch.Tensor:
    """Keys cubic kernel with a = -0.5 evaluated at |t|."""
    a = -0.5
    t = t.abs()
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return torch.where(t <= 1, near, torch.where(t < 2, far, torch.zeros_like(t)))


def _resample_axis(x: torch.Tensor, coords: torch.Tensor, axis: int) -> torch.Tensor:
    n = x.shape[axis]
    base = torch.floor(coords).detach()
    taps = []
    weights = []
    for k in range(-1, 3):
        idx = (base + k).clamp(0, n - 1).long()
        taps.append(torch.index_select(x, axis, idx))
        weights.append(_keys_weights(coords - (base + k)))
    shape = [1] * x.dim()
    shape[axis] = coords.shape[0]
    out = None
    for tap, w in zip(taps, weights):
        term = tap * w.reshape(shape)
        out = term if out is None else out + term
    return out


def bicubic_resample(x: torch.Tensor, grid_y: torch.Tensor, grid_x: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, H, W) at the separable grid coordinates.

    Reads are edge-clamped; the result is differentiable with respect to the
    pixels and to the grid coordinates (through the kernel weights).
    """
    out = _resample_axis(x, grid_y, 2)
    return _resample_axis(out, grid_x, 3)


class PrePostProcessor(nn.Module):
    """ConvNeXt feature path concatenated with the raw input, projected to RGB.

    The final projection is zero-initialized, so the module starts as the
    exact identity.
    """

    def __init__(self, depth: int):
        super().__init__()
        self.blocks = nn.Sequential(*[ConvNeXtBlock(3) for _ in range(depth)])
        self.proj = nn.Conv2d(6, 3, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.proj(torch.cat([x, self.blocks(x)], dim=1))


class ScaleAdapter(nn.Module):
    """RPN plus the pre-resampler and post-resampler processors."""

    def __init__(self, depth: int, s_min: float = S_MIN):
        super().__init__()
        self.rpn = ResizeParamNet()
        self.pre = PrePostProcessor(depth)
        self.post = PrePostProcessor(depth)
        self.s_min = s_min

    def predict_resize(self, x: torch.Tensor) -> ResizeDecision:
        """Inference-time decision for a single padded image (B=1)."""
        if x.shape[0] != 1:
            raise ValueError("predict_resize decides for one image at a time")
        with torch.no_grad():
            raw = self.rpn(x).item()
        s = max(raw, self.s_min)
        return decision_from_s(s_to_u16(s), x.shape[2], x.shape[3])

    def adapt_down(self, x: torch.Tensor, decision: ResizeDecision) -> torch.Tensor:
        """Pre-process then resample to the decision's target size."""
        x = self.pre(x)
        if decision.skipped:
            return x
        h, w = x.shape[2], x.shape[3]
        gy = make_grid(h / decision.target_height, h, decision.target_height)
        gx = make_grid(w / decision.target_width, w, decision.target_width)
        return bicubic_resample(x, gy.to(x.dtype), gx.to(x.dtype))

    def adapt_up(self, x_d: torch.Tensor, decision: ResizeDecision) -> torch.Tensor:
        """Resample back to the padded size, then post-process.

        The caller crops to the original extents afterwards.
        """
        if x_d.shape[2] != decision.target_height or x_d.shape[3] != decision.target_width:
            raise ValueError(
                f"decoded extents {tuple(x_d.shape[2:])} do not match the header "
                f"decision {(decision.target_height, decision.target_width)}"
            )
        if not decision.skipped:
            ph, pw = decision.padded_height, decision.padded_width
            gy = make_grid(decision.target_height / ph, x_d.shape[2], ph)
            gx = make_grid(decision.target_width / pw, x_d.shape[3], pw)
            x_d = bicubic_resample(x_d, gy.to(x_d.dtype), gx.to(x_d.dtype))
        return self.post(x_d)

    def soft_resize(self, x: torch.Tensor,
                    smooth_s: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        """Training path: always resample, with gradients flowing into the RPN.

        The per-image resize factors steer the grid; the common target size
        comes from the batch mean factor and is treated as a constant.  The
        factors pass through the header grid with a straight-through estimator
        so training sees the same quantization as inference; ``smooth_s``
        bypasses that snap for finite-difference verification.
        """
        raw = self.rpn(x)
        s = raw.clamp(min=self.s_min)
        h, w = x.shape[2], x.shape[3]
        if smooth_s:
            # true function of s around a fixed reference: no quantization,
            # no snapped-size detach, so finite differences see the RPN
            th = ceil_to(max(1, math.ceil(_S_REF * h)), 64)
            tw = ceil_to(max(1, math.ceil(_S_REF * w)), 64)
            ratios = [_S_REF / s[i] for i in range(x.shape[0])]
        else:
            s = s + (torch.round(s * 65535.0) / 65535.0 - s).detach()
            mean_s = s.detach().mean()
            th = ceil_to(max(1, math.ceil(float(mean_s) * h)), 64)
            tw = ceil_to(max(1, math.ceil(float(mean_s) * w)), 64)
            # downscale grid covers a span of (out / s) input pixels; anchoring
            # at the batch-mean factor keeps the forward pass sensitive to each
            # image's own s even when the snapped target size does not move
            ratios = [mean_s / s[i] for i in range(x.shape[0])]
        x = self.pre(x)
        outs = []
        for i, ratio in enumerate(ratios):
            gy = make_grid(h / th * ratio, h, th)
            gx = make_grid(w / tw * ratio, w, tw)
            outs.append(bicubic_resample(x[i : i + 1], gy.to(x.dtype), gx.to(x.dtype)))
        return torch.cat(outs, dim=0), s

    def soft_upsize(self, x_d: torch.Tensor, s: torch.Tensor, out_h: int, out_w: int,
                    smooth_s: bool = False) -> torch.Tensor:
        """Training-path inverse of :meth:`soft_resize`."""
        h, w = x_d.shape[2], x_d.shape[3]
        mean_s = s.detach().mean()
        outs = []
        for i in range(x_d.shape[0]):
            # upscale grid covers a span of (out * s) decoded pixels
            ratio = s[i] / _S_REF if smooth_s else s[i] / mean_s
            gy = make_grid(h / out_h * ratio, h, out_h)
            gx = make_grid(w / out_w * ratio, w, out_w)
            outs.append(bicubic_resample(x_d[i : i + 1], gy.to(x_d.dtype), gx.to(x_d.dtype)))
        return self.post(torch.cat(outs, dim=0))
