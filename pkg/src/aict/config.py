"""Codec configuration, architecture presets, and image padding geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ConfigError",
    "CodecConfig",
    "ImageGeometry",
    "preset",
    "PRESET_NAMES",
    "LAMBDA_PRESETS",
    "default_scale_table",
    "pad_to_stride",
    "crop_to_original",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """Raised for invalid codec configurations or unknown presets."""


# Named quality levels: rate weight applied to the bpp term of the loss.
# q1 compresses hardest, q4 the least.
LAMBDA_PRESETS = {
    "q1": 0.01,
    "q2": 0.002,
    "q3": 0.0002,
    "q4": 0.00003,
}

SCALE_TABLE_MIN = 0.11
SCALE_TABLE_MAX = 256.0
SCALE_TABLE_LEVELS = 64


def default_scale_table() -> tuple[float, ...]:
    """64 logarithmically spaced sigma values from 0.11 to 256."""
    log_min, log_max = math.log(SCALE_TABLE_MIN), math.log(SCALE_TABLE_MAX)
    return tuple(
        math.exp(log_min + (log_max - log_min) * i / (SCALE_TABLE_LEVELS - 1))
        for i in range(SCALE_TABLE_LEVELS)
    )


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class CodecConfig:
    """Architecture hyperparameters shared by all codec components.

    ``filters`` are the six channel widths (C1..C6): four main-transform
    stages then two hyper-transform stages.  ``depths`` are the eight block
    counts (d0..d7): d0 is the pre/post-processor depth, d1..d4 the analysis
    stages (mirrored for synthesis), d5..d6 the hyper-analysis stages, and d7
    the first hyper-synthesis stage.
    """

    filters: tuple[int, int, int, int, int, int]
    depths: tuple[int, int, int, int, int, int, int, int] = (0,) * 8
    slice_count: int = 5
    window_size_main: int = 8
    window_size_hyper: int = 4
    lmbda: float = LAMBDA_PRESETS["q2"]
    scale_module_enabled: bool = False
    lrp_enabled: bool = False
    mixture_K: int = 1
    scale_table: tuple[float, ...] = field(default_factory=default_scale_table)
    cdf_precision_bits: int = 16
    charm_embed: int = 224

    def __post_init__(self):
        if len(self.filters) != 6 or any(c <= 0 for c in self.filters):
            raise ConfigError(f"filters must be 6 positive integers, got {self.filters}")
        if len(self.depths) != 8 or any(d < 0 for d in self.depths):
            raise ConfigError(f"depths must be 8 non-negative integers, got {self.depths}")
        if self.slice_count <= 0:
            raise ConfigError("slice_count must be positive")
        if self.filters[3] % self.slice_count != 0:
            raise ConfigError(
                f"latent channels C4={self.filters[3]} not divisible by "
                f"slice_count={self.slice_count}"
            )
        for name, w in (("window_size_main", self.window_size_main),
                        ("window_size_hyper", self.window_size_hyper)):
            # Powers of two guarantee the halving rule in the transforms can
            # always reach a divisor of any feature-grid extent.
            if not _is_pow2(w):
                raise ConfigError(f"{name} must be a positive power of two, got {w}")
        if self.lmbda <= 0:
            raise ConfigError("lmbda must be positive")
        if self.mixture_K < 1:
            raise ConfigError("mixture_K must be >= 1")
        if self.cdf_precision_bits <= 0:
            raise ConfigError("cdf_precision_bits must be positive")
        if self.charm_embed <= 0:
            raise ConfigError("charm_embed must be positive")
        table = tuple(float(s) for s in self.scale_table)
        if len(table) == 0:
            raise ConfigError("scale_table must be non-empty")
        if any(b <= a for a, b in zip(table, table[1:])):
            raise ConfigError("scale_table must be strictly increasing")
        if table[0] < SCALE_TABLE_MIN - 1e-12:
            raise ConfigError(f"scale_table minimum must be >= {SCALE_TABLE_MIN}")
        if table[-1] < 64.0:
            raise ConfigError("scale_table maximum must be >= 64")
        object.__setattr__(self, "filters", tuple(int(c) for c in self.filters))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "scale_table", table)

    @property
    def latent_channels(self) -> int:
        return self.filters[3]

    @property
    def slice_channels(self) -> int:
        return self.filters[3] // self.slice_count

    @property
    def sigma_floor(self) -> float:
        return self.scale_table[0]


_PRESET_TABLE = {
    # name: (filters, depths, lrp, scale_module)
    "B1": ((320, 320, 320, 320, 192, 192), (0, 0, 0, 0, 0, 0, 0, 0), False, False),
    "B2": ((128, 192, 256, 320, 192, 192), (0, 2, 2, 6, 2, 5, 1, 0), False, False),
    "O1": ((128, 192, 256, 320, 192, 192), (0, 2, 2, 6, 2, 5, 1, 2), True, False),
    "O2": ((128, 192, 256, 320, 192, 192), (3, 2, 2, 6, 2, 5, 1, 2), True, True),
}

PRESET_NAMES = tuple(_PRESET_TABLE)


def preset(name: str, **overrides) -> CodecConfig:
    """Return the named architecture preset (B1, B2, O1 or O2).

    Keyword overrides are applied on top of the preset row (e.g. ``lmbda``).
    """
    try:
        filters, depths, lrp, scale_mod = _PRESET_TABLE[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; expected one of {', '.join(_PRESET_TABLE)}"
        ) from None
    cfg = CodecConfig(
        filters=filters,
        depths=depths,
        lrp_enabled=lrp,
        scale_module_enabled=scale_mod,
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class ImageGeometry:
    """Original and stride-padded pixel extents of one image."""

    original_height: int
    original_width: int
    padded_height: int
    padded_width: int

    def __post_init__(self):
        if self.original_height <= 0 or self.original_width <= 0:
            raise ConfigError("image extents must be positive")
        for orig, padded in ((self.original_height, self.padded_height),
                             (self.original_width, self.padded_width)):
            if padded < orig or padded % 64 != 0 or padded - orig >= 64:
                raise ConfigError(
                    f"padded extent {padded} is not the smallest multiple "
                    f"of 64 >= {orig}"
                )


def ceil_to(n: int, stride: int) -> int:
    return ((n + stride - 1) // stride) * stride


def pad_to_stride(image: np.ndarray, stride: int = 64) -> tuple[np.ndarray, ImageGeometry]:
    """Edge-replicate ``image`` (H, W, C) up to the next multiple of ``stride``."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = int(image.shape[0]), int(image.shape[1])
    if h == 0 or w == 0:
        raise ConfigError("image has a zero extent")
    ph, pw = ceil_to(h, stride), ceil_to(w, stride)
    geometry = ImageGeometry(h, w, ph, pw)
    if (ph, pw) == (h, w):
        return image, geometry
    padded = np.pad(image, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")
    return padded, geometry


def crop_to_original(image: np.ndarray, geometry: ImageGeometry) -> np.ndarray:
    """Top-left crop back to the original extents recorded in ``geometry``."""
    if image.shape[:2] != (geometry.padded_height, geometry.padded_width):
        raise ConfigError(
            f"image extents {image.shape[:2]} do not match padded geometry "
            f"{(geometry.padded_height, geometry.padded_width)}"
        )
    return image[: geometry.original_height, : geometry.original_width]


# -- flat key/value config files ---------------------------------------------

_LIST_FIELDS = {"filters", "depths", "scale_table"}
_BOOL_FIELDS = {"scale_module_enabled", "lrp_enabled"}
_INT_FIELDS = {"slice_count", "window_size_main", "window_size_hyper",
               "mixture_K", "cdf_precision_bits", "charm_embed"}


def save_config(cfg: CodecConfig, path: str | Path) -> None:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _LIST_FIELDS:
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path: str | Path) -> CodecConfig:
    """Parse a flat key/value config file.

    A ``preset = NAME`` line seeds the configuration from that preset; any
    other keys override individual fields.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()

    base = None
    if "preset" in values:
        base = preset(values.pop("preset"))

    known = {f.name for f in fields(CodecConfig)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _LIST_FIELDS:
            items = [v for v in value.split(",") if v.strip()]
            cast = float if key == "scale_table" else int
            kwargs[key] = tuple(cast(v) for v in items)
        elif key in _BOOL_FIELDS:
            if value.lower() not in ("true", "false"):
                raise ConfigError(f"config key {key!r} expects true/false, got {value!r}")
            kwargs[key] = value.lower() == "true"
        elif key in _INT_FIELDS:
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    if base is not None:
        return replace(base, **kwargs)
    return CodecConfig(**kwargs)
