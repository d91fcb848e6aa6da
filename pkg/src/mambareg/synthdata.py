"""Synthetic co-registered multi-modality pairs with shared segmentation.

Stands in for a clinical dataset: anatomy labels are carved from smooth
random scalar fields, two intensity renderings share the same labels, and
a random stationary velocity field displaces one of them to create the
registration problem. Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import GenConfig
from .engine import as_tensor
from .fields import LabelVolume, VelocityField, Volume, integrate_svf, warp3d, one_hot
from .metrics import neg_jacobian_fraction


class DataError(ValueError):
    pass


def _seed_seq(seed, *extra):
    """Flatten (seed, *extra) into a valid SeedSequence entropy list."""
    base = tuple(int(s) for s in seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    return base + tuple(int(e) for e in extra)


@dataclass
class SubjectSample:
    anatomy: LabelVolume
    moving: Volume
    fixed: Volume
    moving_labels: LabelVolume
    velocity: VelocityField | None = None


def smooth_random_field(shape, rng, n_components=6, max_freq=2.5):
    """Low-frequency cosine mixture in [-1, 1]-ish range, then rescaled to [0, 1]."""
    shape = tuple(shape)
    coords = [np.arange(n) / n for n in shape]
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_components):
        k = rng.uniform(0.3, max_freq, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        out += amp * np.cos(2.0 * np.pi * (k[0] * gx + k[1] * gy + k[2] * gz) + phase)
    lo, hi = out.min(), out.max()
    if hi - lo < 1e-9:
        raise DataError("degenerate scalar field")
    return (out - lo) / (hi - lo)


def synth_anatomy(cfg: GenConfig, seed):
    """Threshold a smooth field at quantiles into K nested/adjacent regions."""
    if cfg.num_classes < 2:
        raise DataError("num_classes must be >= 2")
    rng = np.random.default_rng(_seed_seq(seed))
    for _ in range(cfg.max_retries):
        try:
            f = smooth_random_field(cfg.size, rng, cfg.field_components, cfg.field_max_freq)
        except DataError:
            continue
        frac_fg = (1.0 - cfg.background_fraction) / (cfg.num_classes - 1)
        qs = np.cumsum([cfg.background_fraction] + [frac_fg] * (cfg.num_classes - 2))
        thresholds = np.quantile(f, qs)
        labels = np.digitize(f, thresholds).astype(np.int32)
        present = np.unique(labels)
        if len(present) == cfg.num_classes:
            return LabelVolume(labels, cfg.num_classes, cfg.spacing)
    raise DataError(f"could not produce {cfg.num_classes} non-empty classes "
                    f"in {cfg.max_retries} attempts")


def render_modality(labels: LabelVolume, transfer, noise_sigma, bias_amp, rng):
    """Per-class base intensity, smooth multiplicative bias, Gaussian noise,
    then exact min-max normalization to [0, 1]."""
    transfer = np.asarray(transfer, dtype=np.float64)
    if transfer.shape != (labels.num_classes,):
        raise DataError(f"transfer table must have {labels.num_classes} entries")
    base = transfer[labels.grid]
    v = base
    if bias_amp > 0.0:
        bias = 1.0 + bias_amp * (2.0 * smooth_random_field(labels.shape, rng) - 1.0)
        v = v * bias
    if noise_sigma > 0.0:
        v = v + rng.normal(0.0, noise_sigma, size=labels.shape)
    lo, hi = v.min(), v.max()
    if hi - lo < 1e-12:
        raise DataError("rendered volume is constant; cannot min-max normalize")
    return Volume((v - lo) / (hi - lo), labels.spacing)


def random_svf(cfg: GenConfig, seed):
    """Smooth random velocity scaled to the configured peak displacement.

    The integrated field must be fold-free; on a detected fold the field is
    shrunk by 0.7 and retried up to the configured bound.
    """
    if cfg.deform_amplitude < 0:
        raise DataError("deform_amplitude must be >= 0")
    rng = np.random.default_rng(_seed_seq(seed))
    comps = [2.0 * smooth_random_field(cfg.size, rng, 4, cfg.deform_max_freq) - 1.0
             for _ in range(3)]
    v = np.stack(comps, axis=-1)
    if cfg.deform_amplitude == 0.0:
        return VelocityField(np.zeros_like(v))
    peak = np.sqrt((v ** 2).sum(axis=-1)).max()
    v *= cfg.deform_amplitude / max(peak, 1e-12)
    for _ in range(cfg.max_retries):
        disp = integrate_svf(VelocityField(v))
        if neg_jacobian_fraction(disp.data) == 0.0:
            return VelocityField(v)
        v *= 0.7
    raise DataError("could not generate a fold-free velocity field")


def make_subject(cfg: GenConfig, seed, ident=""):
    """One co-registered pair: same anatomy, two renderings, one deformed."""
    anatomy = synth_anatomy(cfg, seed)
    rng = np.random.default_rng(_seed_seq(seed, 1))
    mod_a = render_modality(anatomy, cfg.intensity_a, cfg.noise_sigma, cfg.bias_amp, rng)
    mod_b = render_modality(anatomy, cfg.intensity_b, cfg.noise_sigma, cfg.bias_amp, rng)
    vel = random_svf(cfg, _seed_seq(seed, 2))
    disp = integrate_svf(as_tensor(vel.data), steps=7)
    moving = Volume(warp3d(as_tensor(mod_a.grid[..., None]), disp).data[..., 0],
                    cfg.spacing, f"{ident}/moving")
    soft = warp3d(as_tensor(one_hot(anatomy.grid, cfg.num_classes)), disp)
    moving_labels = LabelVolume(np.argmax(soft.data, axis=-1), cfg.num_classes,
                                cfg.spacing, f"{ident}/moving_labels")
    mod_b.ident = f"{ident}/fixed"
    anatomy.ident = f"{ident}/fixed_labels"
    return SubjectSample(anatomy, moving, mod_b, moving_labels, vel)


# -- volume file format -------------------------------------------------------

_VOL_MAGIC = b"SRVOL1"
_MAX_EXTENT = 1 << 20


class VolumeFormatError(ValueError):
    pass


def write_volume(path, vol):
    """SRVOL1: magic, u32 x3 extents, f32 x3 spacing (mm), u8 dtype code
    (0 = f32 intensities, 1 = u16 labels), little-endian z-fastest payload."""
    import struct

    if isinstance(vol, LabelVolume):
        grid = vol.grid
        if grid.min() < 0 or grid.max() > np.iinfo(np.uint16).max:
            raise VolumeFormatError("labels out of u16 range")
        payload = np.ascontiguousarray(grid, dtype="<u2")
        code = 1
        spacing = vol.spacing
    else:
        grid = vol.grid if isinstance(vol, Volume) else np.asarray(vol)
        payload = np.ascontiguousarray(grid, dtype="<f4")
        code = 0
        spacing = vol.spacing if isinstance(vol, Volume) else (1.0, 1.0, 1.0)
    with open(path, "wb") as fh:
        fh.write(_VOL_MAGIC)
        fh.write(struct.pack("<3I", *grid.shape))
        fh.write(struct.pack("<3f", *spacing))
        fh.write(struct.pack("<B", code))
        fh.write(payload.tobytes())


def read_volume(path, num_classes=None):
    """Read an SRVOL1 file back into Volume or LabelVolume (bit-exact round trip)."""
    import struct

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != _VOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {blob[:6]!r}")
    if len(blob) < 31:
        raise VolumeFormatError(f"{path}: truncated header")
    extents = struct.unpack_from("<3I", blob, 6)
    spacing = struct.unpack_from("<3f", blob, 18)
    (code,) = struct.unpack_from("<B", blob, 30)
    if any(e == 0 or e > _MAX_EXTENT for e in extents):
        raise VolumeFormatError(f"{path}: bad extents {extents}")
    n = extents[0] * extents[1] * extents[2]
    dt = np.dtype("<f4") if code == 0 else np.dtype("<u2") if code == 1 else None
    if dt is None:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    if len(blob) != 31 + n * dt.itemsize:
        raise VolumeFormatError(f"{path}: payload length mismatch")
    grid = np.frombuffer(blob[31:], dtype=dt).reshape(extents).copy()
    if code == 1:
        k = num_classes if num_classes is not None else int(grid.max()) + 1
        return LabelVolume(grid.astype(np.int32), k, tuple(float(s) for s in spacing))
    return Volume(grid.astype(np.float64), tuple(float(s) for s in spacing))


# -- dataset assembly ---------------------------------------------------------


def split_counts(n, ratios):
    """Largest-remainder allocation of n subjects to the given split ratios."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.sum() <= 0:
        raise DataError("split ratios must sum to a positive value")
    exact = n * ratios / ratios.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts))[: n - counts.sum()]:
        counts[i] += 1
    if (counts == 0).any():
        raise DataError(f"split {tuple(ratios)} of {n} subjects leaves an empty split")
    return tuple(int(c) for c in counts)


def make_dataset(cfg: GenConfig, n_subjects, out_dir, seed=0, ratios=(150, 10, 20)):
    """Generate n subjects, split train/val/test, write volumes + manifest.

    The manifest is line-delimited JSON: one record per subject with its
    split and the four volume paths. Test pairs are fixed by construction
    (each subject is its own moving/fixed pair).
    """
    if n_subjects < 3:
        raise DataError("need at least 3 subjects for a 3-way split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = split_counts(n_subjects, ratios)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_subjects)
    split_of = {}
    names = ("train", "val", "test")
    pos = 0
    for name, cnt in zip(names, counts):
        for idx in order[pos:pos + cnt]:
            split_of[int(idx)] = name
        pos += cnt

    records = []
    for i in range(n_subjects):
        ident = f"subject_{i:03d}"
        sample = make_subject(cfg, _seed_seq(seed, i), ident)
        sdir = out_dir / ident
        sdir.mkdir(exist_ok=True)
        paths = {
            "moving": sdir / "moving.vol",
            "fixed": sdir / "fixed.vol",
            "moving_labels": sdir / "moving_labels.vol",
            "fixed_labels": sdir / "fixed_labels.vol",
        }
        write_volume(paths["moving"], sample.moving)
        write_volume(paths["fixed"], sample.fixed)
        write_volume(paths["moving_labels"], sample.moving_labels)
        write_volume(paths["fixed_labels"], sample.anatomy)
        records.append({
            "subject": ident,
            "split": split_of[i],
            "num_classes": cfg.num_classes,
            **{k: str(v.relative_to(out_dir)) for k, v in paths.items()},
        })

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest, records


def load_manifest(path):
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise DataError(f"{path}: empty manifest")
    return records


def load_pair(manifest_path, record):
    """Resolve one manifest record to (moving, fixed, moving_labels, fixed_labels)."""
    root = Path(manifest_path).parent
    k = record.get("num_classes")
    return (
        read_volume(root / record["moving"]),
        read_volume(root / record["fixed"]),
        read_volume(root / record["moving_labels"], num_classes=k),
        read_volume(root / record["fixed_labels"], num_classes=k),
    )
