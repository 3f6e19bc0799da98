"""End-to-end codec: model assembly, real bitstream encode/decode, checkpoints."""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import asdict

import numpy as np
import torch
import torch.nn as nn

from . import bitstream as bs
from .backend import coder_backend
from .charm import ChannelContext
from .coder import QuantizedCdf, build_cdf, gaussian_cdf_table
from .config import CodecConfig, ceil_to, crop_to_original, pad_to_stride
from .quant import (
    FactorizedPrior,
    bits_per_pixel,
    gaussian_likelihood,
    quantize,
    rate_estimate,
    ste_round,
)
from .scale import ScaleAdapter, decision_from_s
from .transforms import AnalysisTransform, HyperAnalysis, HyperSynthesis, SynthesisTransform

__all__ = ["AICTModel", "ScaleTableCoder", "FactorizedTableCoder",
           "save_checkpoint", "load_checkpoint"]


class ScaleTableCoder:
    """Pre-baked Gaussian CDF tables, one per scale-table index."""

    def __init__(self, scale_table, precision_bits: int = 16):
        self.tables = [gaussian_cdf_table(float(s), precision_bits) for s in scale_table]

    def encode(self, symbols: torch.Tensor, indexes: torch.Tensor) -> bytes:
        values = symbols.reshape(-1).cpu().numpy()
        idx = indexes.reshape(-1).cpu().numpy()
        return coder_backend().encode(values, idx, self.tables)

    def decode(self, data: bytes, indexes: torch.Tensor, shape) -> torch.Tensor:
        idx = indexes.reshape(-1).cpu().numpy()
        values = coder_backend().decode(data, idx, self.tables)
        return torch.tensor(values, dtype=torch.int32).reshape(shape)

    def symbol_masses(self, symbols: torch.Tensor, indexes: torch.Tensor) -> torch.Tensor:
        """Table-implied masses, useful for coder-overhead diagnostics."""
        out = torch.empty(symbols.shape, dtype=torch.float64)
        flat_s = symbols.reshape(-1)
        flat_i = indexes.reshape(-1)
        flat_o = out.reshape(-1)
        total = float(1 << self.tables[0].precision_bits)
        for pos in range(flat_s.numel()):
            t = self.tables[int(flat_i[pos])]
            k = int(flat_s[pos]) - t.offset
            k = min(max(k, 0), t.n_regular)  # out-of-range uses the overflow slot
            flat_o[pos] = (t.cum[k + 1] - t.cum[k]) / total
        return out


class FactorizedTableCoder:
    """Per-channel CDF tables baked from a factorized prior."""

    def __init__(self, prior: FactorizedPrior, precision_bits: int = 16):
        vmin, vmax = prior.tail_range()
        masses = prior.integer_masses(vmin, vmax).double().numpy()
        residual = np.maximum(1.0 - masses.sum(axis=1, keepdims=True), 1e-12)
        self.tables = [
            QuantizedCdf(
                cum=build_cdf(np.concatenate([masses[c], residual[c]]), precision_bits),
                offset=vmin,
                precision_bits=precision_bits,
            )
            for c in range(prior.channels)
        ]

    def encode(self, symbols: torch.Tensor) -> bytes:
        # symbols: (1, C, H, W); each channel selects its own table
        _, c, h, w = symbols.shape
        values = symbols.reshape(-1).cpu().numpy()
        idx = np.repeat(np.arange(c, dtype=np.int64), h * w)
        return coder_backend().encode(values, idx, self.tables)

    def decode(self, data: bytes, shape) -> torch.Tensor:
        _, c, h, w = shape
        idx = np.repeat(np.arange(c, dtype=np.int64), h * w)
        values = coder_backend().decode(data, idx, self.tables)
        return torch.tensor(values, dtype=torch.int32).reshape(shape)


class AICTModel(nn.Module):
    """Full codec: transforms, hyperprior, channel context, scale adaptation."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.g_a = AnalysisTransform(config)
        self.g_s = SynthesisTransform(config)
        self.h_a = HyperAnalysis(config)
        self.h_s = HyperSynthesis(config)
        self.charm = ChannelContext(config)
        self.z_prior = FactorizedPrior(config.filters[5])
        self.scale_adapter = ScaleAdapter(config.depths[0]) if config.scale_module_enabled else None
        self._scale_coder: ScaleTableCoder | None = None
        self._z_coder: FactorizedTableCoder | None = None

    # -- training ---------------------------------------------------------

    def forward(self, x: torch.Tensor, smooth_quant: bool = False) -> dict:
        """Training pass on [0, 1] images with extents that are multiples of 64.

        The rate path uses additive-noise quantization; every decoder-facing
        path uses straight-through rounding so contexts match inference.
        ``smooth_quant`` swaps the straight-through paths for the noise draws
        (used by the finite-difference gradient check).
        """
        in_h, in_w = x.shape[2], x.shape[3]
        if self.scale_adapter is not None:
            x_d, s = self.scale_adapter.soft_resize(x, smooth_s=smooth_quant)
        else:
            x_d, s = x, None
        y = self.g_a(x_d)
        z = self.h_a(y)
        z_noisy, _ = quantize(z, 0.0, "additive_noise")
        z_masses = self.z_prior(z_noisy)
        z_hat = z_noisy if smooth_quant else ste_round(z)
        hyper = self.h_s(z_hat)
        y_hat, params, y_masses = self.charm(y, hyper, smooth_quant=smooth_quant)
        x_hat_d = self.g_s(y_hat)
        if self.scale_adapter is not None:
            x_hat = self.scale_adapter.soft_upsize(x_hat_d, s, in_h, in_w, smooth_s=smooth_quant)
        else:
            x_hat = x_hat_d
        return {
            "x_hat": x_hat,
            "y_masses": y_masses,
            "z_masses": z_masses,
            "params": params,
            "s": s,
        }

    # -- real coding ------------------------------------------------------

    def update_tables(self, force: bool = False) -> None:
        """Bake coding tables; call after loading or (re)training weights."""
        if force or self._scale_coder is None:
            self._scale_coder = ScaleTableCoder(
                self.config.scale_table, self.config.cdf_precision_bits
            )
        if force or self._z_coder is None:
            self._z_coder = FactorizedTableCoder(self.z_prior, self.config.cdf_precision_bits)

    def invalidate_tables(self) -> None:
        self._z_coder = None

    @torch.no_grad()
    def encode_image(self, image: np.ndarray, quality_index: int = 0,
                     use_scale: bool | None = None) -> tuple[bytes, dict]:
        """Compress an (H, W, 3) uint8 image into a container bitstream.

        Returns the bytes plus a stats record with the actual and estimated
        bits per pixel, the resize factor, and the skip flag.
        """
        self.eval()
        self.update_tables()
        if image.dtype != np.uint8:
            raise ValueError("encode_image expects an 8-bit RGB image")
        padded, geometry = pad_to_stride(image)
        x = torch.from_numpy(padded.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0)

        scale_used = self.scale_adapter is not None if use_scale is None else (
            use_scale and self.scale_adapter is not None
        )
        if scale_used:
            decision = self.scale_adapter.predict_resize(x)
            x_d = self.scale_adapter.adapt_down(x, decision)
            resize_s_u16 = decision.s_u16
        else:
            decision = None
            x_d = x
            resize_s_u16 = 65535

        y = self.g_a(x_d)
        z = self.h_a(y)
        z_hat, z_symbols = quantize(z, 0.0, "round")
        z_stream = self._z_coder.encode(z_symbols)
        hyper = self.h_s(z_hat)
        y_hat, params, slice_streams, y_symbols = self.charm.encode(
            y, hyper, self._scale_coder
        )

        header = bs.BitstreamHeader(
            original_width=geometry.original_width,
            original_height=geometry.original_height,
            scale_used=scale_used,
            resize_s_u16=resize_s_u16 if scale_used else 65535,
            quality_index=quality_index,
        )
        data = bs.pack_bitstream(header, [z_stream] + slice_streams)

        pixels = geometry.original_height * geometry.original_width
        est_bits = self.estimate_bits(params, y_symbols, z_symbols)
        stats = {
            "bpp_actual": len(data) * 8 / pixels,
            "bpp_estimated": float(bits_per_pixel(est_bits, pixels)),
            "s": bs.u16_to_s(resize_s_u16) if scale_used else 1.0,
            "skipped": decision.skipped if decision is not None else True,
            "bytes": len(data),
        }
        return data, stats

    def estimate_bits(self, params, y_symbols, z_symbols) -> torch.Tensor:
        """Rate estimate on the rounded latents with the model's own masses."""
        masses = []
        for (mu, sigma), symbols in zip(params, y_symbols):
            masses.append(gaussian_likelihood(symbols.to(mu.dtype) + mu, mu, sigma))
        z_mass = self.z_prior(z_symbols.to(torch.float32))
        return rate_estimate(*masses, z_mass)

    @torch.no_grad()
    def decode_image(self, data: bytes) -> tuple[np.ndarray, dict]:
        """Decompress a container bitstream back to an (H, W, 3) uint8 image."""
        self.eval()
        self.update_tables()
        header, substreams = bs.parse_bitstream(data)
        if len(substreams) != 1 + self.config.slice_count:
            raise bs.UnsupportedStreamError(
                f"stream has {len(substreams)} substreams; this model expects "
                f"{1 + self.config.slice_count}"
            )
        if header.scale_used and self.scale_adapter is None:
            raise bs.UnsupportedStreamError(
                "stream uses scale adaptation but the model has no scale module"
            )
        ph = ceil_to(header.original_height, 64)
        pw = ceil_to(header.original_width, 64)
        if header.scale_used:
            decision = decision_from_s(header.resize_s_u16, ph, pw)
            coded_h, coded_w = decision.target_height, decision.target_width
        else:
            decision = None
            coded_h, coded_w = ph, pw

        z_shape = (1, self.config.filters[5], coded_h // 64, coded_w // 64)
        z_symbols = self._z_coder.decode(substreams[0], z_shape)
        z_hat = z_symbols.to(torch.float32)
        hyper = self.h_s(z_hat)
        y_hat, _ = self.charm.decode(hyper, substreams[1:], self._scale_coder)
        x_hat_d = self.g_s(y_hat)
        if decision is not None:
            x_hat = self.scale_adapter.adapt_up(x_hat_d, decision)
        else:
            x_hat = x_hat_d
        x_hat = x_hat.clamp_(0.0, 1.0).squeeze(0).permute(1, 2, 0).numpy()
        x_hat = crop_to_original(x_hat, _geometry_from_header(header, ph, pw))
        image = np.round(x_hat * 255.0).astype(np.uint8)
        meta = {
            "s": header.resize_s,
            "skipped": decision.skipped if decision is not None else True,
            "quality_index": header.quality_index,
        }
        return image, meta


def _geometry_from_header(header: bs.BitstreamHeader, ph: int, pw: int):
    from .config import ImageGeometry

    return ImageGeometry(header.original_height, header.original_width, ph, pw)


# -- checkpoints ---------------------------------------------------------
#
# Checkpoints are numpy ``.npz`` archives: one array per parameter/buffer
# keyed by its module path, plus ``__meta__`` holding a JSON blob with the
# codec config and bookkeeping.  The npy entries are self-describing
# (dtype, endianness, shape), so other implementations can read them.


def save_checkpoint(model: AICTModel, path, quality: str | None = None,
                    extra: dict | None = None) -> None:
    arrays = {
        key: tensor.detach().cpu().numpy()
        for key, tensor in model.state_dict().items()
    }
    meta = {
        "config": asdict(model.config),
        "quality": quality,
        "format_version": 1,
    }
    if extra:
        meta.update(extra)
    arrays["__meta__"] = np.frombuffer(
        zlib.compress(json.dumps(meta).encode()), dtype=np.uint8
    ).copy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[AICTModel, dict]:
    with np.load(path) as archive:
        meta = json.loads(zlib.decompress(archive["__meta__"].tobytes()).decode())
        cfg_dict = dict(meta["config"])
        for key in ("filters", "depths", "scale_table"):
            cfg_dict[key] = tuple(cfg_dict[key])
        config = CodecConfig(**cfg_dict)
        model = AICTModel(config)
        state = {
            key: torch.from_numpy(archive[key])
            for key in archive.files
            if key != "__meta__"
        }
    model.load_state_dict(state)
    return model, meta
