import math

import numpy as np
import pytest
import torch

from aict.evaluation import (
    RDCurve,
    RDPoint,
    bd_rate,
    box_stats,
    evaluate_dataset,
    msssim,
    msssim_db,
    msssim_to_db,
    ncc_map,
    psnr,
    rate_savings_curve,
)


def _curve(rates, qualities, label=""):
    return RDCurve([RDPoint(r, q) for r, q in zip(rates, qualities)], label=label)


def test_psnr_closed_form():
    x = np.zeros((16, 16, 3), dtype=np.uint8)
    x_hat = np.ones((16, 16, 3), dtype=np.uint8)  # MSE exactly 1
    assert psnr(x, x_hat) == pytest.approx(48.1308, abs=1e-3)


def test_psnr_identical_capped():
    x = np.random.default_rng(0).integers(0, 255, (8, 8, 3), dtype=np.uint8)
    assert psnr(x, x.copy()) == 100.0


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_msssim_db_formula():
    assert msssim_to_db(0.99) == pytest.approx(20.0)
    assert msssim_to_db(0.9) == pytest.approx(10.0)
    assert msssim_to_db(1.0) == 100.0


def test_msssim_identical_is_one():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (176, 176, 3), dtype=np.uint8)
    assert msssim(img, img.copy()) == pytest.approx(1.0, abs=1e-9)


def test_msssim_degrades_with_noise():
    rng = np.random.default_rng(2)
    yy, xx = np.meshgrid(np.arange(192), np.arange(192), indexing="ij")
    img = (128 + 60 * np.sin(yy / 9) * np.cos(xx / 13))[..., None].repeat(3, axis=2)
    img = img.astype(np.uint8)
    light = np.clip(img + rng.normal(0, 4, img.shape), 0, 255).astype(np.uint8)
    heavy = np.clip(img + rng.normal(0, 30, img.shape), 0, 255).astype(np.uint8)
    m_light, m_heavy = msssim(img, light), msssim(img, heavy)
    assert 0 < m_heavy < m_light < 1
    assert msssim_db(img, light) > msssim_db(img, heavy)


def test_msssim_rejects_small_images():
    img = np.zeros((128, 200, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="extent"):
        msssim(img, img)


def test_bd_rate_self_is_zero():
    curve = _curve([0.2, 0.4, 0.8, 1.6], [30, 33, 36, 39])
    assert bd_rate(curve, curve) == pytest.approx(0.0, abs=1e-9)


def test_bd_rate_constant_ratio():
    anchor = _curve([0.25, 0.5, 1.0, 2.0], [29, 32, 35, 38])
    test = _curve([0.9 * r for r in (0.25, 0.5, 1.0, 2.0)], [29, 32, 35, 38])
    assert bd_rate(anchor, test) == pytest.approx(-10.0, abs=1e-9)


def test_bd_rate_swap_identity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = np.sort(rng.uniform(28, 42, 5))
        r_a = np.sort(rng.uniform(0.1, 3.0, 5))
        r_t = np.sort(rng.uniform(0.1, 3.0, 5))
        a, t = _curve(r_a, q), _curve(r_t, q)
        ab, ba = bd_rate(a, t), bd_rate(t, a)
        assert ab == pytest.approx(100.0 * (1.0 / (1.0 + ba / 100.0) - 1.0), abs=1e-6)


def test_bd_rate_property_random_monotone_curves():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = rng.integers(4, 8)
        q = np.sort(rng.uniform(28, 42, n))
        r = np.sort(rng.uniform(0.05, 4.0, n))
        curve = _curve(r, q)
        assert bd_rate(curve, curve) == pytest.approx(0.0, abs=1e-9)
        shifted = _curve(0.9 * r, q)
        assert bd_rate(curve, shifted) == pytest.approx(-10.0, abs=1e-9)


def test_bd_rate_needs_four_points():
    short = _curve([0.2, 0.4, 0.8], [30, 33, 36])
    full = _curve([0.2, 0.4, 0.8, 1.2], [30, 33, 36, 38])
    with pytest.raises(ValueError, match="4"):
        bd_rate(short, full)


def test_bd_rate_needs_overlap():
    low = _curve([0.2, 0.3, 0.4, 0.5], [20, 22, 24, 26])
    high = _curve([1.0, 1.5, 2.0, 2.5], [40, 42, 44, 46])
    with pytest.raises(ValueError, match="overlap|share"):
        bd_rate(low, high)


def test_rate_savings_identical_zero():
    curve = _curve([0.2, 0.4, 0.8, 1.6], [30, 33, 36, 39])
    for _, saving in rate_savings_curve(curve, curve, np.linspace(30, 39, 7)):
        assert saving == pytest.approx(0.0, abs=1e-9)


def test_rate_savings_constant_ratio():
    anchor = _curve([0.25, 0.5, 1.0, 2.0], [29, 32, 35, 38])
    test = _curve([0.225, 0.45, 0.9, 1.8], [29, 32, 35, 38])
    savings = rate_savings_curve(anchor, test, np.linspace(29, 38, 10))
    for _, s in savings:
        assert s == pytest.approx(-10.0, abs=1e-8)


def test_rate_savings_mean_tracks_bd():
    # the mean pointwise saving approximates BD-rate when the log-rate
    # offset varies gently over the quality range
    q = np.linspace(30, 40, 6)
    base = np.geomspace(0.2, 2.0, 6)
    wiggle = 1.0 + 0.02 * np.sin(np.linspace(0, 3, 6))
    anchor = _curve(base, q)
    test = _curve(0.9 * base * wiggle, q)
    grid = np.linspace(30, 40, 200)
    mean_saving = np.mean([s for _, s in rate_savings_curve(anchor, test, grid)])
    assert abs(mean_saving - bd_rate(anchor, test)) < 0.5


def test_rate_savings_rejects_extrapolation():
    curve = _curve([0.2, 0.4, 0.8, 1.6], [30, 33, 36, 39])
    with pytest.raises(ValueError, match="outside"):
        rate_savings_curve(curve, curve, [50.0])


def test_ncc_center_is_one():
    torch.manual_seed(0)
    latents = [torch.randn(8, 12, 12) for _ in range(4)]
    cmap = ncc_map(latents, max_offset=3)
    assert cmap[3, 3] == pytest.approx(1.0)
    assert np.nanmax(np.abs(cmap)) <= 1.0 + 1e-12


def test_ncc_iid_normals_near_zero():
    torch.manual_seed(1)
    latents = [torch.randn(96, 16, 16) for _ in range(60)]
    cmap = ncc_map(latents, max_offset=2)
    n = 96 * 60
    bound = 3.0 / math.sqrt(n)
    off = np.abs(np.delete(cmap.reshape(-1), cmap.size // 2))
    assert np.nanmax(off) < bound


def test_ncc_symmetric_for_stationary_inputs():
    torch.manual_seed(2)
    base = [torch.randn(48, 20, 20) for _ in range(30)]
    smooth = [torch.nn.functional.avg_pool2d(
        b.unsqueeze(0), 3, stride=1, padding=1).squeeze(0) for b in base]
    cmap = ncc_map(smooth, max_offset=2)
    flipped = cmap[::-1, ::-1]
    assert np.nanmax(np.abs(cmap - flipped)) < 0.15


def test_ncc_needs_samples():
    with pytest.raises(ValueError):
        ncc_map([torch.randn(1, 1, 1)], max_offset=0)


def test_box_stats_matches_sort_oracle():
    rng = np.random.default_rng(6)
    vals = rng.uniform(0.25, 1.0, 37)
    stats = box_stats(vals)

    def quantile(sorted_vals, q):
        pos = q * (len(sorted_vals) - 1)
        lo, hi = int(math.floor(pos)), int(math.ceil(pos))
        frac = pos - lo
        return sorted_vals[lo] * (1 - frac) + sorted_vals[hi] * frac

    s = np.sort(vals)
    assert stats["q1"] == pytest.approx(quantile(s, 0.25))
    assert stats["median"] == pytest.approx(quantile(s, 0.50))
    assert stats["q3"] == pytest.approx(quantile(s, 0.75))
    assert stats["min"] == s[0] and stats["max"] == s[-1]


def test_box_stats_degenerate():
    stats = box_stats([0.7] * 10)
    assert stats["min"] == stats["q1"] == stats["median"] == stats["q3"] == stats["max"] == 0.7
    assert stats["outliers"] == []


def test_box_stats_tukey_outliers():
    vals = [1.0] * 20 + [100.0]
    stats = box_stats(vals)
    assert stats["outliers"] == [100.0]


def test_box_stats_empty():
    with pytest.raises(ValueError):
        box_stats([])


@pytest.fixture(scope="module")
def eval_model():
    from aict.codec import AICTModel
    from tests.conftest import _tiny_config

    torch.manual_seed(21)
    return AICTModel(_tiny_config()).eval()


def _write_images(tmp_path, count=1, size=(72, 96)):
    from PIL import Image

    rng = np.random.default_rng(9)
    for i in range(count):
        yy, xx = np.meshgrid(
            np.linspace(0, 3, size[0]), np.linspace(0, 3, size[1]), indexing="ij"
        )
        img = np.clip(
            (120 + 80 * np.sin(yy + i) * np.cos(xx))[..., None]
            + rng.normal(0, 5, (*size, 3)),
            0, 255,
        ).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / f"im{i}.png")


def test_evaluate_dataset_single_image(tmp_path, eval_model):
    _write_images(tmp_path, count=1)
    records, summary = evaluate_dataset(eval_model, tmp_path, metrics=("psnr",))
    assert len(records) == 1 and summary["images"] == 1
    rec = records[0]
    assert rec["bpp"] == pytest.approx(rec["bytes"] * 8 / rec["pixels"])
    assert rec["pixels"] == 72 * 96
    assert "psnr" in rec and np.isfinite(rec["psnr"])


def test_evaluate_dataset_bpp_from_file_bytes(tmp_path, eval_model):
    _write_images(tmp_path, count=3)
    records, summary = evaluate_dataset(eval_model, tmp_path, metrics=())
    assert all("psnr" not in r for r in records)
    assert summary["mean_bpp"] == pytest.approx(np.mean([r["bpp"] for r in records]))


def test_evaluate_dataset_skips_unreadable(tmp_path, eval_model):
    _write_images(tmp_path, count=1)
    (tmp_path / "broken.png").write_bytes(b"not a png")
    with pytest.warns(UserWarning, match="unreadable"):
        records, summary = evaluate_dataset(eval_model, tmp_path, metrics=())
    assert len(records) == 1
    assert summary["skipped_files"]


def test_evaluate_dataset_crop_to_256(tmp_path, eval_model):
    from PIL import Image

    rng = np.random.default_rng(10)
    img = rng.integers(0, 256, (300, 520, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "big.png")
    records, _ = evaluate_dataset(eval_model, tmp_path, metrics=(), crop_to_256=True)
    assert records[0]["pixels"] == 256 * 512


def test_latent_correlation_runs():
    from aict.codec import AICTModel
    from aict.evaluation import latent_correlation
    from tests.conftest import _tiny_config

    torch.manual_seed(23)
    model = AICTModel(_tiny_config()).eval()
    with torch.no_grad():  # untrained latents round to all-zero symbols
        model.g_a.merges[-1].proj.weight.mul_(400.0)
    rng = np.random.default_rng(11)
    images = [
        np.clip(rng.normal(128, 40, (128, 192, 3)), 0, 255).astype(np.uint8)
        for _ in range(2)
    ]
    cmap = latent_correlation(model, images, max_offset=2)
    assert cmap.shape == (5, 5)
    assert cmap[2, 2] == pytest.approx(1.0)
    assert np.nanmax(np.abs(cmap)) <= 1.0 + 1e-9


def test_resize_param_stats(eval_model):
    from aict.evaluation import resize_param_stats

    rng = np.random.default_rng(12)
    images = [
        np.clip(rng.normal(100, 30, (80, 80, 3)), 0, 255).astype(np.uint8)
        for _ in range(4)
    ]
    stats = resize_param_stats({"q2": eval_model}, images)
    assert set(stats) == {"q2"}
    assert 0.25 <= stats["q2"]["min"] <= stats["q2"]["max"] <= 1.0


def test_resize_param_stats_empty_dataset(eval_model):
    from aict.evaluation import resize_param_stats

    with pytest.raises(ValueError, match="empty"):
        resize_param_stats({"q2": eval_model}, [])
