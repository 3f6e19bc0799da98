"""Shared neural building blocks: windowed attention, patch resampling, conv blocks."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.init import trunc_normal_

__all__ = [
    "SwinBlockSpec",
    "SwinBlock",
    "WindowAttention",
    "PatchMerge",
    "PatchExpand",
    "ConvNeXtBlock",
    "ResBlock",
    "effective_window",
    "num_heads_for",
]


def effective_window(extent: int, window: int) -> int:
    """Largest halving of ``window`` that divides ``extent`` (>= 1).

    Staying on the power-of-two chain keeps windows from different axes
    mutually compatible: the smaller of two halvings divides both extents.
    """
    w = window
    while w > 1 and extent % w:
        w //= 2
    return w


def num_heads_for(dim: int) -> int:
    """One attention head per 32 channels, falling back to a divisor of dim."""
    h = max(1, dim // 32)
    while dim % h:
        h -= 1
    return h


@dataclass(frozen=True)
class SwinBlockSpec:
    """Static shape of one windowed-attention block."""

    embed_dim: int
    num_heads: int
    window_size: int
    shifted: bool
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")


def _window_partition(x: torch.Tensor, wh: int, ww: int) -> torch.Tensor:
    # (B, H, W, C) -> (B * nWindows, wh * ww, C)
    b, h, w, c = x.shape
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)


def _window_reverse(windows: torch.Tensor, wh: int, ww: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // wh) * (w // ww))
    x = windows.view(b, h // wh, w // ww, wh, ww, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


@lru_cache(maxsize=256)
def _relative_position_index(wh: int, ww: int, max_window: int) -> torch.Tensor:
    """Flat index into the (2M-1)^2 bias table for every position pair."""
    coords = torch.stack(
        torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")
    ).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]  # (2, L, L)
    return (rel[0] + max_window - 1) * (2 * max_window - 1) + (rel[1] + max_window - 1)


@lru_cache(maxsize=256)
def _shift_attention_mask(h: int, w: int, wh: int, ww: int, sh: int, sw: int) -> torch.Tensor:
    """Standard mask hiding cross-boundary pairs inside shifted windows."""
    img_mask = torch.zeros(1, h, w, 1)
    region = 0
    h_slices = (slice(0, -wh), slice(-wh, -sh), slice(-sh, None)) if sh else (slice(None),)
    w_slices = (slice(0, -ww), slice(-ww, -sw), slice(-sw, None)) if sw else (slice(None),)
    for hs in h_slices:
        for ws in w_slices:
            img_mask[:, hs, ws, :] = region
            region += 1
    mask_windows = _window_partition(img_mask, wh, ww).squeeze(-1)
    attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return attn_mask.masked_fill(attn_mask != 0, -100.0)


class WindowAttention(nn.Module):
    """Multi-head self-attention within (possibly shifted) local windows."""

    def __init__(self, dim: int, num_heads: int, max_window: int):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.max_window = max_window
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias = nn.Parameter(
            torch.zeros((2 * max_window - 1) ** 2, num_heads)
        )
        trunc_normal_(self.qkv.weight, std=0.02)
        trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.qkv.bias)
        nn.init.zeros_(self.proj.bias)

    def forward(self, windows: torch.Tensor, wh: int, ww: int,
                mask: torch.Tensor | None = None, need_weights: bool = False):
        bw, length, c = windows.shape
        qkv = self.qkv(windows).reshape(bw, length, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        idx = _relative_position_index(wh, ww, self.max_window).to(windows.device)
        bias = self.relative_position_bias[idx.reshape(-1)]
        attn = attn + bias.reshape(length, length, -1).permute(2, 0, 1)
        if mask is not None:
            n_windows = mask.shape[0]
            attn = attn.view(bw // n_windows, n_windows, self.num_heads, length, length)
            attn = attn + mask.unsqueeze(1).unsqueeze(0).to(attn.dtype)
            attn = attn.view(bw, self.num_heads, length, length)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, length, c)
        out = self.proj(out)
        if need_weights:
            return out, attn
        return out


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        trunc_normal_(self.fc1.weight, std=0.02)
        trunc_normal_(self.fc2.weight, std=0.02)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    """LN -> (shifted) windowed MHSA -> residual -> LN -> MLP -> residual.

    Operates on (B, C, H, W) feature maps.  The feature extents must be
    divisible by the window in use; grid alignment is the caller's job
    (the transform stacks pass a per-stage ``window`` override).
    """

    def __init__(self, spec: SwinBlockSpec):
        super().__init__()
        self.spec = spec
        self.norm1 = nn.LayerNorm(spec.embed_dim)
        self.attn = WindowAttention(spec.embed_dim, spec.num_heads, spec.window_size)
        self.norm2 = nn.LayerNorm(spec.embed_dim)
        self.mlp = _Mlp(spec.embed_dim, int(spec.embed_dim * spec.mlp_ratio))

    def forward(self, x: torch.Tensor, window: int | None = None) -> torch.Tensor:
        b, c, h, w = x.shape
        win = self.spec.window_size if window is None else window
        if win > self.spec.window_size:
            raise ValueError("window override exceeds the configured window size")
        wh = ww = win
        if h % wh or w % ww:
            raise ValueError(
                f"extents {(h, w)} not divisible by window {(wh, ww)}; "
                "align the grid before attention"
            )
        sh = wh // 2 if self.spec.shifted and h > wh else 0
        sw = ww // 2 if self.spec.shifted and w > ww else 0

        x = x.permute(0, 2, 3, 1)  # to (B, H, W, C)
        shortcut = x
        x = self.norm1(x)
        if sh or sw:
            x = torch.roll(x, shifts=(-sh, -sw), dims=(1, 2))
            mask = _shift_attention_mask(h, w, wh, ww, sh, sw).to(x.device)
        else:
            mask = None
        windows = _window_partition(x, wh, ww)
        windows = self.attn(windows, wh, ww, mask=mask)
        x = _window_reverse(windows, wh, ww, h, w)
        if sh or sw:
            x = torch.roll(x, shifts=(sh, sw), dims=(1, 2))
        x = shortcut + x
        x = x + self.mlp(self.norm2(x))
        return x.permute(0, 3, 1, 2)


class PatchMerge(nn.Module):
    """Halve both extents: 2x2 space-to-depth then a linear projection."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Linear(4 * in_channels, out_channels)
        trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"patch merge needs even extents, got {(h, w)}")
        x = x.view(b, c, h // 2, 2, w // 2, 2)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, h // 2, w // 2, 4 * c)
        return self.proj(x).permute(0, 3, 1, 2)


class PatchExpand(nn.Module):
    """Double both extents: linear projection then 2x2 depth-to-space."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.out_channels = out_channels
        self.proj = nn.Linear(in_channels, 4 * out_channels)
        trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        x = self.proj(x.permute(0, 2, 3, 1))  # (B, H, W, 4*out)
        x = x.view(b, h, w, self.out_channels, 2, 2)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, self.out_channels, h * 2, w * 2)
        return x


class ConvNeXtBlock(nn.Module):
    """Depthwise 7x7 conv, layer norm, 4x pointwise expand, GELU, contract."""

    def __init__(self, dim: int, kernel_size: int = 7):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.pwconv2 = nn.Linear(4 * dim, dim)
        trunc_normal_(self.dwconv.weight, std=0.02)
        trunc_normal_(self.pwconv1.weight, std=0.02)
        trunc_normal_(self.pwconv2.weight, std=0.02)
        nn.init.zeros_(self.dwconv.bias)
        nn.init.zeros_(self.pwconv1.bias)
        nn.init.zeros_(self.pwconv2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shortcut = x
        x = self.dwconv(x).permute(0, 2, 3, 1)
        x = self.pwconv2(F.gelu(self.pwconv1(self.norm(x))))
        return shortcut + x.permute(0, 3, 1, 2)


class ResBlock(nn.Module):
    """Plain two-conv residual block with ReLU."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv2(F.relu(self.conv1(x)))
        return F.relu(x + out)
