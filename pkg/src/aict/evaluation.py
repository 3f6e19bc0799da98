"""Quality metrics, BD-rate, latent correlation, and dataset evaluation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "RDPoint",
    "RDCurve",
    "psnr",
    "msssim",
    "msssim_db",
    "msssim_to_db",
    "bd_rate",
    "rate_savings_curve",
    "ncc_map",
    "latent_correlation",
    "box_stats",
    "resize_param_stats",
    "evaluate_dataset",
]

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_MIN_EXTENT = 160


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    metric: str = "PSNR"

    def __post_init__(self):
        if self.bpp <= 0:
            raise ValueError("bpp must be positive")


@dataclass
class RDCurve:
    points: list[RDPoint] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Peak signal-to-noise ratio on the 8-bit range, capped at 100 dB."""
    if x.shape != x_hat.shape:
        raise ValueError("images must share a shape")
    mse = np.mean((x.astype(np.float64) - x_hat.astype(np.float64)) ** 2)
    if mse == 0:
        return 100.0
    return min(10.0 * math.log10(255.0 ** 2 / mse), 100.0)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).reshape(1, 1, size, size)


def _ssim_terms(a: torch.Tensor, b: torch.Tensor, window: torch.Tensor):
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    channels = a.shape[1]
    w = window.expand(channels, 1, -1, -1)
    mu_a = F.conv2d(a, w, groups=channels)
    mu_b = F.conv2d(b, w, groups=channels)
    var_a = F.conv2d(a * a, w, groups=channels) - mu_a ** 2
    var_b = F.conv2d(b * b, w, groups=channels) - mu_b ** 2
    cov = F.conv2d(a * b, w, groups=channels) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    ssim = ((2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)) * cs
    return ssim.mean().item(), cs.mean().item()


def msssim(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Multi-scale SSIM with the standard five scale weights."""
    if x.shape != x_hat.shape:
        raise ValueError("images must share a shape")
    if min(x.shape[0], x.shape[1]) < MSSSIM_MIN_EXTENT:
        raise ValueError(
            f"MS-SSIM needs a minimum extent of {MSSSIM_MIN_EXTENT}px for five "
            f"dyadic scales, got {x.shape[:2]}"
        )
    a = torch.from_numpy(x.astype(np.float64)).permute(2, 0, 1).unsqueeze(0)
    b = torch.from_numpy(x_hat.astype(np.float64)).permute(2, 0, 1).unsqueeze(0)
    window = _gaussian_window()
    values = []
    for scale in range(5):
        ssim_mean, cs_mean = _ssim_terms(a, b, window)
        values.append(ssim_mean if scale == 4 else cs_mean)
        if scale < 4:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    score = 1.0
    for v, w in zip(values, MSSSIM_WEIGHTS):
        score *= max(v, 0.0) ** w
    return score


def msssim_to_db(value: float) -> float:
    """Log-scaled MS-SSIM: -10*log10(1 - value)."""
    if value >= 1.0:
        return 100.0
    return -10.0 * math.log10(1.0 - value)


def msssim_db(x: np.ndarray, x_hat: np.ndarray) -> float:
    return msssim_to_db(msssim(x, x_hat))


def _fit_log_rate(curve: RDCurve) -> np.ndarray:
    if len(curve.points) < 4:
        raise ValueError("BD-rate needs at least 4 rate-distortion points")
    return np.polyfit(curve.qualities, np.log(curve.rates), 3)


def _overlap(anchor: RDCurve, test: RDCurve) -> tuple[float, float]:
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if not lo < hi:
        raise ValueError("rate-distortion curves share no quality range")
    return lo, hi


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate difference in percent; negative means savings."""
    poly_a = _fit_log_rate(anchor)
    poly_t = _fit_log_rate(test)
    lo, hi = _overlap(anchor, test)
    int_a = np.polyval(np.polyint(poly_a), hi) - np.polyval(np.polyint(poly_a), lo)
    int_t = np.polyval(np.polyint(poly_t), hi) - np.polyval(np.polyint(poly_t), lo)
    avg_diff = (int_t - int_a) / (hi - lo)
    return float(100.0 * (math.exp(avg_diff) - 1.0))


def rate_savings_curve(anchor: RDCurve, test: RDCurve, quality_grid) -> list[tuple[float, float]]:
    """Pointwise rate difference (percent) over a quality grid."""
    poly_a = _fit_log_rate(anchor)
    poly_t = _fit_log_rate(test)
    lo, hi = _overlap(anchor, test)
    out = []
    for q in quality_grid:
        if not lo <= q <= hi:
            raise ValueError(f"quality {q} outside the fitted overlap [{lo}, {hi}]")
        ratio = math.exp(np.polyval(poly_t, q) - np.polyval(poly_a, q))
        out.append((float(q), float(100.0 * (ratio - 1.0))))
    return out


def ncc_map(normalized_latents: list[torch.Tensor], max_offset: int) -> np.ndarray:
    """Cross-correlation between each latent's center position and its
    spatial neighbors, pooled over channels and inputs.

    Input tensors are (C, H, W) normalized latents; the center entry of the
    returned (2w+1, 2w+1) map is exactly 1.
    """
    pairs: dict[tuple[int, int], list[tuple[np.ndarray, np.ndarray]]] = {}
    for latent in normalized_latents:
        c, h, w = latent.shape
        hc, wc = h // 2, w // 2
        center = latent[:, hc, wc].detach().cpu().numpy()
        for dy in range(-max_offset, max_offset + 1):
            for dx in range(-max_offset, max_offset + 1):
                yy, xx = hc + dy, wc + dx
                if not (0 <= yy < h and 0 <= xx < w):
                    continue
                other = latent[:, yy, xx].detach().cpu().numpy()
                pairs.setdefault((dy, dx), []).append((center, other))
    size = 2 * max_offset + 1
    out = np.full((size, size), np.nan)
    for (dy, dx), samples in pairs.items():
        a = np.concatenate([s[0] for s in samples])
        b = np.concatenate([s[1] for s in samples])
        if a.size < 2:
            raise ValueError("fewer than 2 samples pooled for correlation")
        a = a - a.mean()
        b = b - b.mean()
        denom = math.sqrt((a * a).sum() * (b * b).sum())
        if denom == 0.0:
            raise ValueError(
                "constant normalized latents: correlation is undefined "
                "(is the model untrained with all-zero symbols?)"
            )
        out[dy + max_offset, dx + max_offset] = float((a * b).sum() / denom)
    if np.isnan(out).all():
        raise ValueError("no valid offsets; latent grid too small")
    return out


@torch.no_grad()
def latent_correlation(model, images: list[np.ndarray], max_offset: int = 8) -> np.ndarray:
    """Spatial correlation map of the normalized coded latent over images."""
    from .config import pad_to_stride

    model.eval()
    model.update_tables()
    normalized = []
    for image in images:
        padded, _ = pad_to_stride(image)
        x = torch.from_numpy(padded.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0)
        if model.scale_adapter is not None:
            decision = model.scale_adapter.predict_resize(x)
            x = model.scale_adapter.adapt_down(x, decision)
        y = model.g_a(x)
        z = model.h_a(y)
        from .quant import quantize

        z_hat, _ = quantize(z, 0.0, "round")
        hyper = model.h_s(z_hat)
        _, params, _, symbols = model.charm.encode(y, hyper, model_scale_coder(model))
        norm_slices = [
            sym.to(mu.dtype) / sigma for sym, (mu, sigma) in zip(symbols, params)
        ]
        normalized.append(torch.cat(norm_slices, dim=1).squeeze(0))
    return ncc_map(normalized, max_offset)


def model_scale_coder(model):
    model.update_tables()
    return model._scale_coder


def box_stats(values) -> dict:
    """Five-number summary with Tukey 1.5*IQR outliers."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("empty sample")
    q1, median, q3 = np.percentile(vals, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = vals[(vals < lo) | (vals > hi)]
    return {
        "min": float(vals.min()),
        "q1": float(q1),
        "median": float(median),
        "q3": float(q3),
        "max": float(vals.max()),
        "outliers": [float(v) for v in np.sort(outliers)],
    }


@torch.no_grad()
def resize_param_stats(models_by_lambda: dict, images: list[np.ndarray]) -> dict:
    """Box-plot statistics of the predicted resize factor per rate weight."""
    from .config import pad_to_stride

    if not images:
        raise ValueError("empty dataset")
    stats = {}
    for key, model in models_by_lambda.items():
        if model.scale_adapter is None:
            raise ValueError(f"model {key} has no scale module")
        model.eval()
        s_values = []
        for image in images:
            padded, _ = pad_to_stride(image)
            x = torch.from_numpy(padded.astype(np.float32) / 255.0)
            x = x.permute(2, 0, 1).unsqueeze(0)
            s_values.append(model.scale_adapter.predict_resize(x).s)
        stats[key] = box_stats(s_values)
    return stats


def evaluate_dataset(model, dataset_dir, metrics=("psnr",), quality_index: int = 0,
                     crop_to_256: bool = False) -> tuple[list[dict], dict]:
    """Encode and decode every image; report actual-bitstream rates.

    Returns per-image records and dataset means.  The bpp always comes from
    real compressed bytes, never the entropy estimate.
    """
    from PIL import Image

    records = []
    skipped = []
    paths = sorted(
        p for p in Path(dataset_dir).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".ppm")
    )
    for path in paths:
        try:
            image = np.asarray(Image.open(path).convert("RGB"))
        except Exception as err:
            warnings.warn(f"skipping unreadable image {path}: {err}")
            skipped.append(str(path))
            continue
        if crop_to_256:
            h = (image.shape[0] // 256) * 256
            w = (image.shape[1] // 256) * 256
            if h == 0 or w == 0:
                warnings.warn(f"skipping {path}: smaller than 256px")
                skipped.append(str(path))
                continue
            top = (image.shape[0] - h) // 2
            left = (image.shape[1] - w) // 2
            image = image[top : top + h, left : left + w]
        data, stats = model.encode_image(image, quality_index=quality_index)
        recon, _ = model.decode_image(data)
        pixels = image.shape[0] * image.shape[1]
        record = {
            "file": path.name,
            "pixels": pixels,
            "bytes": len(data),
            "bpp": len(data) * 8 / pixels,
            "s": stats["s"],
            "skipped": stats["skipped"],
        }
        if "psnr" in metrics:
            record["psnr"] = psnr(image, recon)
        if "msssim" in metrics:
            record["msssim_db"] = msssim_db(image, recon)
        records.append(record)
    summary = {"images": len(records), "skipped_files": skipped}
    for key in ("bpp", "psnr", "msssim_db"):
        vals = [r[key] for r in records if key in r]
        if vals:
            summary[f"mean_{key}"] = float(np.mean(vals))
    return records, summary
