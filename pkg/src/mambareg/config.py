"""Config dataclasses and the plain-text key-value config format.

Config files are lines of ``key = value``; ``#`` starts a comment. Values
are coerced by the declared field type; unknown keys and bad values raise
ConfigError naming the field. Tuple fields accept comma- or
whitespace-separated entries.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    """Synthetic co-registered pair generation."""

    size: tuple = (32, 32, 32)
    num_classes: int = 4
    field_components: int = 6
    field_max_freq: float = 2.5
    background_fraction: float = 0.40
    intensity_a: tuple = (0.05, 0.35, 0.65, 0.95)
    intensity_b: tuple = (0.10, 0.90, 0.30, 0.70)
    noise_sigma: float = 0.02
    bias_amp: float = 0.15
    deform_amplitude: float = 3.0
    deform_max_freq: float = 1.2
    max_retries: int = 5
    spacing: tuple = (1.0, 1.0, 1.0)


@dataclass
class TrainConfig:
    """Model, loss, and optimizer settings for one training run."""

    # optimizer
    epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    precision: str = "f32"

    # loss weights
    lambda_c: float = 0.001
    lambda_s: float = 0.1
    tau: float = 0.07
    contrast_samples: int = 256
    grad_surgery: bool = True
    joint_contrast: bool = True

    # network
    use_extractor: bool = True
    use_integration: bool = True
    int_steps: int = 7
    patch_size: int = 2
    embed_dim: int = 16
    stages: int = 3
    blocks_per_stage: int = 2
    state_dim: int = 8
    expand: int = 2
    conv_kernel: int = 4
    extractor_width: int = 16
    horizontal_width: int = 16
    decoder_width: int = 16
    scan_chunk: int = 64

    # bookkeeping
    val_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")


def parse_kv_text(text):
    """Parse ``key = value`` lines into a string dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _coerce(name, text, ftype, default):
    try:
        if ftype is bool or isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype is int or isinstance(default, int):
            return int(text)
        if ftype is float or isinstance(default, float):
            return float(text)
        if ftype is tuple or isinstance(default, tuple):
            parts = text.replace(",", " ").split()
            elem = float if any(isinstance(v, float) for v in (default or (0.0,))) else int
            return tuple(elem(p) for p in parts)
        return text
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config field {name!r}: {e}") from None


def apply_kv(cls_or_obj, kv):
    """Build (or update) a config dataclass from parsed key-value strings."""
    if dataclasses.is_dataclass(cls_or_obj) and not isinstance(cls_or_obj, type):
        base = cls_or_obj
        cls = type(base)
    else:
        cls = cls_or_obj
        base = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    updates = {}
    for key, text in kv.items():
        if key not in fields:
            raise ConfigError(f"unknown config field {key!r}")
        default = getattr(base, key)
        updates[key] = _coerce(key, text, fields[key].type, default)
    return dataclasses.replace(base, **updates)


def load_config(path, cls):
    with open(path, "r", encoding="utf-8") as fh:
        return apply_kv(cls, parse_kv_text(fh.read()))
