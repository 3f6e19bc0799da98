"""Command-line operator surface: train, encode, decode, eval, analyze.

Exit codes: 0 success, 2 unreadable/invalid input, 3 checkpoint or model
mismatch, 4 corrupt bitstream, 5 internal error.  Output files are written
atomically (temp file plus rename), so failures never leave partial files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .bitstream import UnsupportedStreamError, parse_bitstream
from .coder import CorruptStreamError
from .config import ConfigError, LAMBDA_PRESETS, load_config, preset

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MODEL = 3
EXIT_STREAM = 4
EXIT_INTERNAL = 5


class InputError(Exception):
    pass


class ModelMismatchError(Exception):
    pass


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def _atomic_save_image(path: Path, image: np.ndarray) -> None:
    import io

    from PIL import Image

    buf = io.BytesIO()
    suffix = Path(path).suffix.lower().lstrip(".") or "png"
    Image.fromarray(image).save(buf, format={"ppm": "PPM"}.get(suffix, "PNG"))
    _atomic_write_bytes(path, buf.getvalue())


def _read_image(path) -> np.ndarray:
    from PIL import Image

    try:
        return np.asarray(Image.open(path).convert("RGB"))
    except Exception as err:
        raise InputError(f"cannot read image {path}: {err}") from err


def _load_model(checkpoint_path):
    from .codec import load_checkpoint

    if not Path(checkpoint_path).exists():
        raise ModelMismatchError(f"checkpoint {checkpoint_path} does not exist")
    try:
        return load_checkpoint(checkpoint_path)
    except Exception as err:
        raise ModelMismatchError(f"cannot load checkpoint {checkpoint_path}: {err}") from err


def _build_config(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = preset(args.preset)
    else:
        raise InputError("one of --config or --preset is required")
    if getattr(args, "quality", None):
        from dataclasses import replace

        cfg = replace(cfg, lmbda=LAMBDA_PRESETS[args.quality])
    return cfg


def _quality_to_index(quality: str | None) -> int:
    return int(quality[1]) if quality else 0


def _seed_everything(seed: int | None):
    if seed is not None:
        import torch

        torch.manual_seed(seed)
        np.random.seed(seed)


def cmd_train(args) -> int:
    from .codec import AICTModel
    from .train import TrainSpec

    cfg = _build_config(args)
    spec = TrainSpec(
        steps=args.steps,
        lmbda=cfg.lmbda,
        batch_size=args.batch_size,
        crop=args.crop,
        final_phase_steps=args.final_phase_steps
        if args.final_phase_steps is not None
        else max(1, args.steps // 10),
        seed=args.seed if args.seed is not None else 0,
    )
    import torch

    torch.manual_seed(spec.seed)
    model = AICTModel(cfg)
    from .train import train

    result = train(model, spec, args.corpus, args.out, quality=args.quality)
    print(json.dumps(result))
    return EXIT_OK


def cmd_encode(args) -> int:
    _seed_everything(args.seed)
    model, meta = _load_model(args.checkpoint)
    image = _read_image(args.input)
    data, stats = model.encode_image(
        image,
        quality_index=_quality_to_index(meta.get("quality")),
        use_scale=False if args.no_scale else None,
    )
    _atomic_write_bytes(Path(args.out), data)
    print(json.dumps(stats))
    return EXIT_OK


def cmd_decode(args) -> int:
    _seed_everything(args.seed)
    model, meta = _load_model(args.checkpoint)
    data = Path(args.bitstream).read_bytes()
    header, _ = parse_bitstream(data)
    expected = _quality_to_index(meta.get("quality"))
    if header.quality_index != expected:
        raise ModelMismatchError(
            f"bitstream was produced at quality index {header.quality_index}, "
            f"checkpoint is {expected}"
        )
    image, info = model.decode_image(data)
    _atomic_save_image(Path(args.out), image)
    print(json.dumps({"width": image.shape[1], "height": image.shape[0], **info}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_dataset

    _seed_everything(args.seed)
    model, meta = _load_model(args.checkpoint)
    metrics = tuple(m for m in args.metrics.split(",") if m) if args.metrics else ()
    records, summary = evaluate_dataset(
        model,
        args.dataset,
        metrics=metrics,
        quality_index=_quality_to_index(meta.get("quality")),
        crop_to_256=args.crop256,
    )
    report = {"summary": summary, "records": records}
    if args.out:
        _atomic_write_text(Path(args.out), json.dumps(report, indent=1))
    if "mean_bpp" in summary and "mean_psnr" in summary:
        point = {
            "bpp": summary["mean_bpp"],
            "quality": summary["mean_psnr"],
            "metric": "PSNR",
        }
        if args.curve_out:
            curve = {"label": meta.get("quality") or "model", "points": [point]}
            _atomic_write_text(Path(args.curve_out), json.dumps(curve, indent=1))
    print(json.dumps(summary))
    return EXIT_OK


def _load_curve(path):
    from .evaluation import RDCurve, RDPoint

    raw = json.loads(Path(path).read_text())
    points = [RDPoint(p["bpp"], p["quality"], p.get("metric", "PSNR")) for p in raw["points"]]
    return RDCurve(points, label=raw.get("label", str(path)))


def _maybe_plot(args, draw) -> None:
    if not getattr(args, "plot", None):
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    draw(ax)
    fig.tight_layout()
    fig.savefig(args.plot, dpi=120)
    plt.close(fig)


def cmd_analyze(args) -> int:
    from . import evaluation as ev

    _seed_everything(args.seed)
    if args.mode == "bd-rate":
        anchor, test = _load_curve(args.anchor), _load_curve(args.test)
        value = ev.bd_rate(anchor, test)
        print(f"{value:.2f}%")
        if args.out:
            _atomic_write_text(Path(args.out), json.dumps({"bd_rate_percent": value}))
        return EXIT_OK

    if args.mode == "rate-savings":
        anchor, test = _load_curve(args.anchor), _load_curve(args.test)
        lo = max(anchor.qualities.min(), test.qualities.min())
        hi = min(anchor.qualities.max(), test.qualities.max())
        grid = np.linspace(lo, hi, args.grid_points)
        savings = ev.rate_savings_curve(anchor, test, grid)
        payload = {"quality": [q for q, _ in savings], "savings_percent": [s for _, s in savings]}
        if args.out:
            _atomic_write_text(Path(args.out), json.dumps(payload, indent=1))
        _maybe_plot(args, lambda ax: (
            ax.plot(payload["quality"], payload["savings_percent"]),
            ax.set_xlabel("quality (dB)"),
            ax.set_ylabel("rate savings (%)"),
        ))
        print(json.dumps({"mean_savings_percent": float(np.mean(payload["savings_percent"]))}))
        return EXIT_OK

    if args.mode == "latent-correlation":
        model, _ = _load_model(args.checkpoint)
        images = [_read_image(p) for p in sorted(Path(args.dataset).iterdir())
                  if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".ppm")]
        if not images:
            raise InputError(f"no images under {args.dataset}")
        cmap = ev.latent_correlation(model, images, max_offset=args.max_offset)
        payload = {"max_offset": args.max_offset, "map": cmap.tolist()}
        if args.out:
            _atomic_write_text(Path(args.out), json.dumps(payload, indent=1))
        _maybe_plot(args, lambda ax: (
            ax.imshow(cmap, vmin=-1, vmax=1, cmap="RdBu_r",
                      extent=(-args.max_offset, args.max_offset,
                              args.max_offset, -args.max_offset)),
        ))
        center = cmap[args.max_offset, args.max_offset]
        off = np.abs(np.delete(cmap.reshape(-1), cmap.size // 2))
        print(json.dumps({"center": float(center),
                          "mean_abs_off_center": float(np.nanmean(off))}))
        return EXIT_OK

    if args.mode == "resize-stats":
        models = {}
        for item in args.checkpoints:
            name, _, path = item.partition("=")
            if not path:
                raise InputError("--checkpoints entries must look like q1=path.npz")
            models[name], _ = _load_model(path)
        images = [_read_image(p) for p in sorted(Path(args.dataset).iterdir())
                  if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".ppm")]
        if not images:
            raise InputError(f"no images under {args.dataset}")
        stats = ev.resize_param_stats(models, images)
        if args.out:
            _atomic_write_text(Path(args.out), json.dumps(stats, indent=1))
        _maybe_plot(args, lambda ax: (
            ax.boxplot(
                [[s["min"], s["q1"], s["median"], s["q3"], s["max"]] for s in stats.values()],
                tick_labels=list(stats),
            ),
            ax.set_ylabel("resize factor s"),
        ))
        print(json.dumps(stats))
        return EXIT_OK

    raise InputError(f"unknown analyze mode {args.mode}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aict", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model on an image folder")
    train.add_argument("--config", help="flat key/value config file")
    train.add_argument("--preset", choices=("B1", "B2", "O1", "O2"))
    train.add_argument("--quality", choices=tuple(LAMBDA_PRESETS))
    train.add_argument("--corpus", required=True)
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--steps", type=int, default=50_000)
    train.add_argument("--batch-size", type=int, default=8)
    train.add_argument("--crop", type=int, default=256)
    train.add_argument("--final-phase-steps", type=int, default=None)
    train.add_argument("--seed", type=int, default=0)
    train.set_defaults(func=cmd_train)

    encode = sub.add_parser("encode", help="compress one image to a bitstream")
    encode.add_argument("--checkpoint", required=True)
    encode.add_argument("--input", required=True)
    encode.add_argument("--out", required=True)
    encode.add_argument("--no-scale", action="store_true",
                        help="bypass scale adaptation regardless of the predictor")
    encode.add_argument("--seed", type=int, default=None)
    encode.set_defaults(func=cmd_encode)

    decode = sub.add_parser("decode", help="decompress a bitstream to an image")
    decode.add_argument("--checkpoint", required=True)
    decode.add_argument("--bitstream", required=True)
    decode.add_argument("--out", required=True)
    decode.add_argument("--seed", type=int, default=None)
    decode.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="rate/quality evaluation over a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--metrics", default="psnr", help="comma list: psnr,msssim")
    ev.add_argument("--crop256", action="store_true",
                    help="crop inputs to the largest multiple of 256")
    ev.add_argument("--out", help="JSON report path")
    ev.add_argument("--curve-out", help="RD-curve JSON path")
    ev.add_argument("--seed", type=int, default=None)
    ev.set_defaults(func=cmd_eval)

    an = sub.add_parser("analyze", help="BD-rate, savings, correlation, resize stats")
    an.add_argument("--mode", required=True,
                    choices=("bd-rate", "rate-savings", "latent-correlation", "resize-stats"))
    an.add_argument("--anchor", help="anchor RD-curve JSON")
    an.add_argument("--test", help="test RD-curve JSON")
    an.add_argument("--grid-points", type=int, default=50)
    an.add_argument("--checkpoint")
    an.add_argument("--checkpoints", nargs="*", default=[],
                    help="name=checkpoint pairs for resize-stats")
    an.add_argument("--dataset")
    an.add_argument("--max-offset", type=int, default=8)
    an.add_argument("--out")
    an.add_argument("--plot", help="optional rendered plot path")
    an.add_argument("--seed", type=int, default=None)
    an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (ModelMismatchError, UnsupportedStreamError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MODEL
    except CorruptStreamError as err:
        print(f"error: corrupt bitstream: {err}", file=sys.stderr)
        return EXIT_STREAM
    except Exception as err:  # pragma: no cover - defensive
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
