"""Spatio-channel autoregressive entropy model.

The latent is split into contiguous channel slices coded in order; each
slice's entropy parameters come from its group of hyper-synthesis features
plus all previously decoded slices, run through a small two-block windowed
attention transform.  An optional bounded residual head refines each
dequantized slice.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.init import trunc_normal_

from .config import CodecConfig
from .layers import SwinBlock, SwinBlockSpec, effective_window, num_heads_for
from .quant import gaussian_likelihood, quantize, scale_to_index, ste_round

__all__ = ["split_slices", "merge_slices", "SliceContext", "ChannelContext"]

CHARM_WINDOW = 4


class CausalityError(RuntimeError):
    """Raised when a slice is given the wrong decoded prefix."""


def split_slices(y: torch.Tensor, slice_count: int) -> list[torch.Tensor]:
    """Uniform contiguous channel partition of (B, C, H, W)."""
    channels = y.shape[1]
    if channels % slice_count:
        raise ValueError(f"{channels} channels not divisible into {slice_count} slices")
    return list(torch.chunk(y, slice_count, dim=1))


def merge_slices(slices: list[torch.Tensor]) -> torch.Tensor:
    return torch.cat(slices, dim=1)


class SliceContext(nn.Module):
    """Entropy-parameter head for one slice.

    input projection -> two windowed attention blocks -> projection to
    (mu, raw sigma); sigma passes through softplus and is clamped to the
    scale-table floor.
    """

    def __init__(self, hyper_channels: int, prefix_channels: int, slice_channels: int,
                 embed: int, sigma_floor: float, lrp_enabled: bool):
        super().__init__()
        self.in_channels = hyper_channels + prefix_channels
        self.slice_channels = slice_channels
        self.sigma_floor = sigma_floor
        self.input_proj = nn.Conv2d(self.in_channels, embed, 1)
        specs = [
            SwinBlockSpec(embed, num_heads_for(embed), CHARM_WINDOW, shifted=bool(i))
            for i in range(2)
        ]
        self.blocks = nn.ModuleList(SwinBlock(s) for s in specs)
        self.out_proj = nn.Conv2d(embed, 2 * slice_channels, 1)
        trunc_normal_(self.input_proj.weight, std=0.02)
        trunc_normal_(self.out_proj.weight, std=0.02)
        nn.init.zeros_(self.input_proj.bias)
        nn.init.zeros_(self.out_proj.bias)
        if lrp_enabled:
            self.lrp_head = nn.Conv2d(embed + slice_channels, slice_channels, 1)
            nn.init.zeros_(self.lrp_head.weight)
            nn.init.zeros_(self.lrp_head.bias)
        else:
            self.lrp_head = None

    def context_features(self, hyper_group: torch.Tensor,
                         decoded_prefix: list[torch.Tensor]) -> torch.Tensor:
        x = torch.cat([hyper_group, *decoded_prefix], dim=1)
        if x.shape[1] != self.in_channels:
            raise CausalityError(
                f"slice context expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        x = self.input_proj(x)
        h, w = x.shape[-2:]
        win = min(effective_window(h, CHARM_WINDOW), effective_window(w, CHARM_WINDOW))
        for block in self.blocks:
            x = block(x, window=win)
        return x

    def entropy_parameters(self, ctx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, raw_sigma = self.out_proj(ctx).chunk(2, dim=1)
        sigma = F.softplus(raw_sigma).clamp(min=self.sigma_floor)
        return mu, sigma

    def latent_residual(self, ctx: torch.Tensor, quantized_slice: torch.Tensor) -> torch.Tensor:
        """Bounded rounding-error correction, |r| <= 0.5 per element."""
        if self.lrp_head is None:
            return torch.zeros_like(quantized_slice)
        r = self.lrp_head(torch.cat([ctx, quantized_slice], dim=1))
        return 0.5 * torch.tanh(r)


class ChannelContext(nn.Module):
    """All slice contexts plus the autoregressive pass over a latent."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        if config.mixture_K != 1:
            raise NotImplementedError(
                "the channel context codes a single mean-scale Gaussian per "
                f"element; mixture_K={config.mixture_K} is not supported"
            )
        self.slice_count = config.slice_count
        self.slice_channels = config.slice_channels
        hyper_total = 2 * config.latent_channels
        if hyper_total % config.slice_count:
            raise ValueError("hyper features must split evenly across slices")
        self.hyper_group_channels = hyper_total // config.slice_count
        self.register_buffer(
            "scale_table", torch.tensor(config.scale_table, dtype=torch.float32)
        )
        self.contexts = nn.ModuleList(
            SliceContext(
                hyper_channels=self.hyper_group_channels,
                prefix_channels=i * self.slice_channels,
                slice_channels=self.slice_channels,
                embed=config.charm_embed,
                sigma_floor=config.sigma_floor,
                lrp_enabled=config.lrp_enabled,
            )
            for i in range(config.slice_count)
        )

    def hyper_groups(self, hyper_features: torch.Tensor) -> list[torch.Tensor]:
        return split_slices(hyper_features, self.slice_count)

    def slice_entropy_params(self, hyper_features: torch.Tensor,
                             decoded_prefix: list[torch.Tensor],
                             slice_index: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Entropy parameters (mu, sigma) for 1-based ``slice_index``."""
        if not 1 <= slice_index <= self.slice_count:
            raise ValueError(f"slice_index must be in 1..{self.slice_count}")
        if len(decoded_prefix) != slice_index - 1:
            raise CausalityError(
                f"slice {slice_index} requires exactly {slice_index - 1} decoded "
                f"slices, got {len(decoded_prefix)}"
            )
        group = self.hyper_groups(hyper_features)[slice_index - 1]
        ctx = self.contexts[slice_index - 1].context_features(group, decoded_prefix)
        return self.contexts[slice_index - 1].entropy_parameters(ctx)

    def forward(self, y: torch.Tensor, hyper_features: torch.Tensor,
                smooth_quant: bool = False):
        """Training pass: returns (y_hat, per-slice params, per-slice rate masses).

        ``smooth_quant`` replaces the straight-through rounding of the decoder
        path with the additive-noise draw, making the whole pass smooth for
        finite-difference verification.
        """
        slices = split_slices(y, self.slice_count)
        groups = self.hyper_groups(hyper_features)
        decoded: list[torch.Tensor] = []
        params, masses = [], []
        for i, (y_slice, group) in enumerate(zip(slices, groups)):
            ctx = self.contexts[i].context_features(group, decoded)
            mu, sigma = self.contexts[i].entropy_parameters(ctx)
            noisy, _ = quantize(y_slice, mu, "additive_noise")
            masses.append(gaussian_likelihood(noisy, mu, sigma))
            if smooth_quant:
                y_hat_slice = noisy
            else:
                y_hat_slice = ste_round(y_slice - mu) + mu
            y_hat_slice = y_hat_slice + self.contexts[i].latent_residual(ctx, y_hat_slice)
            decoded.append(y_hat_slice)
            params.append((mu, sigma))
        return merge_slices(decoded), params, masses

    @torch.no_grad()
    def encode(self, y: torch.Tensor, hyper_features: torch.Tensor, slice_coder):
        """Code each slice in order; returns (y_hat, params, substreams, symbols)."""
        slices = split_slices(y, self.slice_count)
        groups = self.hyper_groups(hyper_features)
        decoded: list[torch.Tensor] = []
        params, substreams, all_symbols = [], [], []
        for i, (y_slice, group) in enumerate(zip(slices, groups)):
            ctx = self.contexts[i].context_features(group, decoded)
            mu, sigma = self.contexts[i].entropy_parameters(ctx)
            _, symbols = quantize(y_slice, mu, "round")
            indexes = scale_to_index(sigma, self.scale_table)
            substreams.append(slice_coder.encode(symbols, indexes))
            y_hat_slice = symbols.to(y.dtype) + mu
            y_hat_slice = y_hat_slice + self.contexts[i].latent_residual(ctx, y_hat_slice)
            decoded.append(y_hat_slice)
            params.append((mu, sigma))
            all_symbols.append(symbols)
        return merge_slices(decoded), params, substreams, all_symbols

    @torch.no_grad()
    def decode(self, hyper_features: torch.Tensor, substreams: list[bytes], slice_coder):
        """Inverse of :meth:`encode` given the per-slice substreams."""
        if len(substreams) != self.slice_count:
            raise ValueError(f"expected {self.slice_count} substreams, got {len(substreams)}")
        groups = self.hyper_groups(hyper_features)
        b, _, h, w = hyper_features.shape
        decoded: list[torch.Tensor] = []
        params = []
        for i, group in enumerate(groups):
            ctx = self.contexts[i].context_features(group, decoded)
            mu, sigma = self.contexts[i].entropy_parameters(ctx)
            indexes = scale_to_index(sigma, self.scale_table)
            symbols = slice_coder.decode(substreams[i], indexes,
                                         (b, self.slice_channels, h, w))
            y_hat_slice = symbols.to(mu.dtype) + mu
            y_hat_slice = y_hat_slice + self.contexts[i].latent_residual(ctx, y_hat_slice)
            decoded.append(y_hat_slice)
            params.append((mu, sigma))
        return merge_slices(decoded), params
