"""Quantizers, discretized likelihoods, the factorized prior, and rate estimates."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "QUANTIZER_MODES",
    "quantize",
    "ste_round",
    "gaussian_likelihood",
    "gaussian_mixture_likelihood",
    "FactorizedPrior",
    "rate_estimate",
    "bits_per_pixel",
    "scale_to_index",
    "LIKELIHOOD_FLOOR",
]

QUANTIZER_MODES = ("additive_noise", "round", "straight_through_round")

# Floor applied to probability masses before taking logs; bounds the rate of
# any single symbol at 32 bits.
LIKELIHOOD_FLOOR = 2.0 ** -32


def ste_round(x: torch.Tensor) -> torch.Tensor:
    """Round in the forward pass, identity in the backward pass.

    Written as ``round(x) + (x - x.detach())`` so the forward value is
    bitwise identical to ``round(x)``; the naive ``x + (round(x) - x)``
    form reintroduces rounding error.
    """
    return torch.round(x).detach() + (x - x.detach())


def quantize(values: torch.Tensor, mu, mode: str):
    """Quantize ``values`` against the location ``mu``.

    Returns ``(quantized, symbols)``; ``symbols`` are integer residuals and
    only produced in ``round`` mode.  ``additive_noise`` is the training-rate
    surrogate, ``straight_through_round`` the training-decoder surrogate.
    """
    if mode not in QUANTIZER_MODES:
        raise ValueError(f"unknown quantizer mode {mode!r}")
    if not torch.is_tensor(mu):
        mu = torch.as_tensor(mu, dtype=values.dtype, device=values.device)
    if mode == "additive_noise":
        noise = torch.empty_like(values).uniform_(-0.5, 0.5)
        return values + noise, None
    if mode == "round":
        symbols = torch.round(values - mu).to(torch.int32)
        return symbols.to(values.dtype) + mu, symbols
    return ste_round(values - mu) + mu, None


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    # erfc keeps precision in the tails.
    return 0.5 * torch.erfc(x * (-(2 ** -0.5)))


def gaussian_likelihood(values: torch.Tensor, mu, sigma) -> torch.Tensor:
    """Probability mass of a unit-width bin centered at ``values``.

    ``p = N_cdf((v + 1/2 - mu)/sigma) - N_cdf((v - 1/2 - mu)/sigma)``,
    evaluated in a symmetric form that is exact for the mass of the
    noise-convolved Gaussian of the entropy model.
    """
    sigma = torch.as_tensor(sigma, dtype=values.dtype, device=values.device)
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    mu = torch.as_tensor(mu, dtype=values.dtype, device=values.device)
    centered = torch.abs(values - mu)
    upper = _std_normal_cdf((0.5 - centered) / sigma)
    lower = _std_normal_cdf((-0.5 - centered) / sigma)
    return upper - lower


def gaussian_mixture_likelihood(values, weights, mus, sigmas) -> torch.Tensor:
    """K-component mixture mass; component tensors are stacked on dim 0.

    The operative entropy model runs at K=1 (see the channel context module);
    this generalization exists for configurations with ``mixture_K > 1``.
    """
    if weights.shape[0] != mus.shape[0] or mus.shape[0] != sigmas.shape[0]:
        raise ValueError("mixture components must align on dim 0")
    masses = torch.stack(
        [gaussian_likelihood(values, mus[k], sigmas[k]) for k in range(mus.shape[0])]
    )
    return (weights * masses).sum(dim=0)


class FactorizedPrior(nn.Module):
    """Learned per-channel univariate density for the hyper-latent.

    Each channel trains an independent monotone CDF built from ``filters``
    hidden layers; masses come from CDF differences over unit bins.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(int(f) for f in filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1 / (len(self.filters) + 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(self.filters) + 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            matrix = torch.full((channels, dims[i + 1], dims[i]), init)
            self._matrices.append(nn.Parameter(matrix))
            bias = torch.empty((channels, dims[i + 1], 1)).uniform_(-0.5, 0.5)
            self._biases.append(nn.Parameter(bias))
            if i < len(self.filters):
                self._factors.append(nn.Parameter(torch.zeros((channels, dims[i + 1], 1))))

    def _logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        # x: (channels, 1, N)
        for i, matrix in enumerate(self._matrices):
            x = torch.matmul(F.softplus(matrix), x) + self._biases[i]
            if i < len(self._factors):
                x = x + torch.tanh(self._factors[i]) * torch.tanh(x)
        return x

    def cdf(self, values: torch.Tensor) -> torch.Tensor:
        """Evaluate the per-channel CDF at ``values`` of shape (channels, N)."""
        logits = self._logits_cdf(values.unsqueeze(1))
        return torch.sigmoid(logits).squeeze(1)

    def likelihood(self, values: torch.Tensor) -> torch.Tensor:
        """Unit-bin mass at ``values``, shaped (channels, N) like the input."""
        v = values.unsqueeze(1)
        upper = self._logits_cdf(v + 0.5)
        lower = self._logits_cdf(v - 0.5)
        # sigmoid(u) - sigmoid(l) with the sign trick for tail stability
        sign = -torch.sign(upper + lower).detach()
        return torch.abs(
            torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)
        ).squeeze(1)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        """Mass for an (N, C, H, W) tensor, channelwise."""
        n, c, h, w = values.shape
        flat = values.permute(1, 0, 2, 3).reshape(c, -1)
        mass = self.likelihood(flat)
        return mass.reshape(c, n, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def integer_masses(self, vmin: int, vmax: int) -> torch.Tensor:
        """Masses on the integer grid [vmin, vmax], shaped (channels, span)."""
        grid = torch.arange(vmin, vmax + 1, dtype=torch.float32)
        values = grid.unsqueeze(0).expand(self.channels, -1)
        return self.likelihood(values)

    @torch.no_grad()
    def tail_range(self, tail_mass: float = 2.0 ** -16, limit: int = 1 << 15) -> tuple[int, int]:
        """Smallest symmetric-ish integer range holding all but ``tail_mass`` per side."""
        span = 32
        while span <= limit:
            grid = torch.tensor([[-span - 0.5, span + 0.5]]).expand(self.channels, -1)
            cdf = self.cdf(grid)
            if (cdf[:, 0] < tail_mass).all() and (cdf[:, 1] > 1 - tail_mass).all():
                return -span, span
            span *= 2
        raise RuntimeError("factorized prior tails exceed the supported symbol range")


def rate_estimate(*likelihoods: torch.Tensor, floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
    """Total bits implied by the given probability masses."""
    total = None
    for mass in likelihoods:
        bits = -torch.log2(mass.clamp(min=floor, max=1.0)).sum()
        total = bits if total is None else total + bits
    if total is None:
        raise ValueError("at least one likelihood tensor is required")
    return total


def bits_per_pixel(total_bits, pixel_count: int):
    if pixel_count <= 0:
        raise ValueError("pixel_count must be positive")
    return total_bits / pixel_count


def scale_to_index(sigma: torch.Tensor, scale_table: torch.Tensor) -> torch.Tensor:
    """Index of the smallest table entry >= sigma, clamped to the last entry."""
    if scale_table.numel() == 0:
        raise ValueError("scale_table is empty")
    idx = torch.searchsorted(scale_table, sigma.contiguous())
    return idx.clamp(max=scale_table.numel() - 1)
