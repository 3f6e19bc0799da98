"""Nonlinear analysis/synthesis transforms and their hyper counterparts.

Each main stage pairs a patch merge (or expand) with a run of windowed
attention blocks; four stages give a total downsampling of 16, the hyper
path adds another factor of 4.  Per-stage attention windows shrink (by
halving) to divide whatever grid the 64-aligned input produces.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import CodecConfig
from .layers import PatchExpand, PatchMerge, SwinBlock, SwinBlockSpec, effective_window, num_heads_for

__all__ = [
    "AnalysisTransform",
    "SynthesisTransform",
    "HyperAnalysis",
    "HyperSynthesis",
]


def _blocks(dim: int, depth: int, window: int) -> nn.ModuleList:
    specs = [
        SwinBlockSpec(
            embed_dim=dim,
            num_heads=num_heads_for(dim),
            window_size=window,
            shifted=bool(i % 2),
        )
        for i in range(depth)
    ]
    return nn.ModuleList(SwinBlock(s) for s in specs)


def _run_blocks(blocks: nn.ModuleList, x: torch.Tensor, window: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    win = min(effective_window(h, window), effective_window(w, window))
    for block in blocks:
        x = block(x, window=win)
    return x


class AnalysisTransform(nn.Module):
    """Image (B, 3, H, W) to latent (B, C4, H/16, W/16); H, W multiples of 16."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        c1, c2, c3, c4 = config.filters[:4]
        d = config.depths
        self.window = config.window_size_main
        widths = [(3, c1), (c1, c2), (c2, c3), (c3, c4)]
        self.merges = nn.ModuleList(PatchMerge(a, b) for a, b in widths)
        self.stages = nn.ModuleList(
            _blocks(b, d[i + 1], self.window) for i, (_, b) in enumerate(widths)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"analysis input extents must be multiples of 16, got {(h, w)}")
        for merge, stage in zip(self.merges, self.stages):
            x = merge(x)
            x = _run_blocks(stage, x, self.window)
        return x


class SynthesisTransform(nn.Module):
    """Latent (B, C4, h, w) back to an image (B, 3, 16h, 16w)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        c1, c2, c3, c4 = config.filters[:4]
        d = config.depths
        self.latent_channels = c4
        self.window = config.window_size_main
        widths = [(c4, c3), (c3, c2), (c2, c1), (c1, 3)]
        depths = [d[4], d[3], d[2], d[1]]
        self.stages = nn.ModuleList(
            _blocks(a, depth, self.window) for (a, _), depth in zip(widths, depths)
        )
        self.expands = nn.ModuleList(PatchExpand(a, b) for a, b in widths)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[1] != self.latent_channels:
            raise ValueError(
                f"synthesis expects {self.latent_channels} latent channels, got {y.shape[1]}"
            )
        x = y
        for stage, expand in zip(self.stages, self.expands):
            x = _run_blocks(stage, x, self.window)
            x = expand(x)
        return x


class HyperAnalysis(nn.Module):
    """Latent (B, C4, h, w) to hyper-latent (B, C6, h/4, w/4)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        c4, c5, c6 = config.filters[3], config.filters[4], config.filters[5]
        d = config.depths
        self.latent_channels = c4
        self.window = config.window_size_hyper
        self.merges = nn.ModuleList([PatchMerge(c4, c5), PatchMerge(c5, c6)])
        self.stages = nn.ModuleList(
            [_blocks(c5, d[5], self.window), _blocks(c6, d[6], self.window)]
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[1] != self.latent_channels:
            raise ValueError(f"hyper-analysis expects {self.latent_channels} channels")
        h, w = y.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"hyper-analysis extents must be multiples of 4, got {(h, w)}")
        x = y
        for merge, stage in zip(self.merges, self.stages):
            x = merge(x)
            x = _run_blocks(stage, x, self.window)
        return x


class HyperSynthesis(nn.Module):
    """Hyper-latent (B, C6, h, w) to entropy features (B, 2*C4, 4h, 4w).

    The doubled width carries separate location and scale feature halves for
    the channel context model.  Stage depths are (d7, d5), falling back to
    the mirrored hyper-analysis depth when d7 is absent.
    """

    def __init__(self, config: CodecConfig):
        super().__init__()
        c4, c5, c6 = config.filters[3], config.filters[4], config.filters[5]
        d = config.depths
        self.hyper_channels = c6
        self.window = config.window_size_hyper
        first_depth = d[7] if d[7] > 0 else d[6]
        self.stages = nn.ModuleList(
            [_blocks(c6, first_depth, self.window), _blocks(c5, d[5], self.window)]
        )
        self.expands = nn.ModuleList([PatchExpand(c6, c5), PatchExpand(c5, 2 * c4)])

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.hyper_channels:
            raise ValueError(f"hyper-synthesis expects {self.hyper_channels} channels")
        x = z
        for stage, expand in zip(self.stages, self.expands):
            x = _run_blocks(stage, x, self.window)
            x = expand(x)
        return x
