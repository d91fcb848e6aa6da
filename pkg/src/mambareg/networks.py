"""Registration networks: shared-weight feature extractor, the dual-branch
registration module (full-resolution conv branch + token branch with
selective-SSM stages and patch merging), and checkpoint serialization.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import TrainConfig
from .engine import ShapeError, Tensor, as_tensor, ops, parameter
from .fields import integrate_svf
from .layers import Conv3d, Linear, Module
from .ssm import MambaStage, sinusoidal_position_embedding


class FeatureExtractor(Module):
    """Fine-grained UNet, depth 2, one downsampling, fixed channel width.

    Maps (H, W, D, 1) intensities to a full-resolution (H, W, D, width)
    feature map. One set of weights serves both modalities.
    """

    def __init__(self, rng, width=16, dtype=np.float64):
        self.enc = Conv3d(1, width, rng, dtype=dtype)
        self.down = Conv3d(width, width, rng, stride=2, dtype=dtype)
        self.bottom = Conv3d(width, width, rng, dtype=dtype)
        self.up_conv = Conv3d(width, width, rng, dtype=dtype)
        self.merge = Conv3d(2 * width, width, rng, dtype=dtype)
        self.width = width

    def __call__(self, x):
        if x.ndim != 4 or x.shape[-1] != 1:
            raise ShapeError(f"feature extractor: need (H,W,D,1), got {x.shape}")
        if any(s % 2 for s in x.shape[:3]):
            raise ShapeError(f"feature extractor: extents must be even, got {x.shape[:3]}")
        e = ops.silu(self.enc(x))
        d = ops.silu(self.down(e))
        d = ops.silu(self.bottom(d))
        u = ops.silu(self.up_conv(ops.upsample_nearest3d(d)))
        return ops.silu(self.merge(ops.concat([e, u], axis=-1)))


class PatchEmbed(Module):
    """Split (H, W, D, C) into non-overlapping P^3 patches and project.

    Token order is the raster scan of the patch grid with the last axis
    fastest; within a patch, entries flatten in (P, P, P, C) order.
    """

    def __init__(self, cin, patch, embed_dim, rng, dtype=np.float64):
        self.proj = Linear(cin * patch ** 3, embed_dim, rng, dtype)
        self.patch = patch
        self.cin = cin

    def __call__(self, x):
        P = self.patch
        H, W, D, C = x.shape
        if C != self.cin:
            raise ShapeError(f"patch embed: expected {self.cin} channels, got {C}")
        if H % P or W % P or D % P:
            raise ShapeError(f"patch embed: extents {x.shape[:3]} not divisible by P={P}")
        grid = (H // P, W // P, D // P)
        t = ops.reshape(x, (grid[0], P, grid[1], P, grid[2], P, C))
        t = ops.transpose(t, (0, 2, 4, 1, 3, 5, 6))
        tokens = self.proj(ops.reshape(t, (1, grid[0] * grid[1] * grid[2], P ** 3 * C)))
        return tokens, grid


class PatchMerge(Module):
    """Halve the token grid: each 2^3 cell concatenates to 8C, projects to 2C.

    Cells gather their 8 tokens in raster offset order
    (0,0,0),(0,0,1),(0,1,0),(0,1,1),(1,0,0),(1,0,1),(1,1,0),(1,1,1).
    """

    def __init__(self, channels, rng, dtype=np.float64):
        self.proj = Linear(8 * channels, 2 * channels, rng, dtype)
        self.channels = channels

    def __call__(self, tokens, grid):
        gh, gw, gd = grid
        if gh % 2 or gw % 2 or gd % 2:
            raise ShapeError(f"patch merge: grid {grid} has odd extents")
        B, L, C = tokens.shape
        if L != gh * gw * gd or C != self.channels:
            raise ShapeError(f"patch merge: tokens {tokens.shape} do not match grid {grid}")
        t = ops.reshape(tokens, (B, gh // 2, 2, gw // 2, 2, gd // 2, 2, C))
        t = ops.transpose(t, (0, 1, 3, 5, 2, 4, 6, 7))
        merged = ops.reshape(t, (B, (gh // 2) * (gw // 2) * (gd // 2), 8 * C))
        return self.proj(merged), (gh // 2, gw // 2, gd // 2)


def tokens_to_volume(tokens, grid):
    """(1, L, C) tokens in raster order back to a (gh, gw, gd, C) volume."""
    gh, gw, gd = grid
    return ops.reshape(tokens, (gh, gw, gd, tokens.shape[-1]))


class RegistrationNetwork(Module):
    """Dual-branch velocity estimator.

    Concatenates the two feature maps along channels; a horizontal branch
    keeps full resolution through two conv blocks while the token branch
    runs patch embedding, selective-SSM stages with patch merging, and a
    conv decoder with skip connections back to full resolution. The two
    branches fuse by concatenation + 1x1x1 conv, and a 3-channel head
    emits the velocity field.
    """

    def __init__(self, in_channels, cfg: TrainConfig, rng, dtype=np.float64):
        ce, P, S = cfg.embed_dim, cfg.patch_size, cfg.stages
        hw, dw = cfg.horizontal_width, cfg.decoder_width
        cin = 2 * in_channels

        self.horiz1 = Conv3d(cin, hw, rng, dtype=dtype)
        self.horiz2 = Conv3d(hw, hw, rng, dtype=dtype)

        self.embed = PatchEmbed(cin, P, ce, rng, dtype)
        self.stages = [
            MambaStage(ce * 2 ** i, cfg.blocks_per_stage, rng, cfg.state_dim,
                       cfg.expand, cfg.conv_kernel, dtype)
            for i in range(S)
        ]
        self.merges = [PatchMerge(ce * 2 ** i, rng, dtype) for i in range(S - 1)]

        self.dec_convs = [
            Conv3d(ce * 2 ** (i + 1) + ce * 2 ** i, ce * 2 ** i, rng, dtype=dtype)
            for i in reversed(range(S - 1))
        ]
        n_up = int(round(np.log2(P))) if P > 1 else 0
        if P != 2 ** n_up:
            raise ValueError(f"patch_size must be a power of two, got {P}")
        self.patch_up = [Conv3d(ce if i == 0 else dw, dw, rng, dtype=dtype) for i in range(n_up)]
        top = ce if n_up == 0 else dw
        self.fuse = Conv3d(top + hw, dw, rng, kernel=1, dtype=dtype)
        self.head = Conv3d(dw, 3, rng, dtype=dtype, scale=1e-5)
        self.cfg_patch = P
        self.cfg_stages = S
        self.in_channels = in_channels
        self.scan_chunk = cfg.scan_chunk
        self._pe_cache = {}

    def _pos_embedding(self, length, channels, dtype):
        key = (length, channels, np.dtype(dtype).str)
        pe = self._pe_cache.get(key)
        if pe is None:
            pe = Tensor(sinusoidal_position_embedding(length, channels, dtype)[None])
            self._pe_cache[key] = pe
        return pe

    def __call__(self, f_m, f_f):
        f_m = as_tensor(f_m) if not isinstance(f_m, Tensor) else f_m
        f_f = as_tensor(f_f) if not isinstance(f_f, Tensor) else f_f
        if f_m.shape != f_f.shape:
            raise ShapeError(f"registration: feature shapes differ, {f_m.shape} vs {f_f.shape}")
        H, W, D = f_m.shape[:3]
        div = self.cfg_patch * 2 ** (self.cfg_stages - 1)
        if H % div or W % div or D % div:
            raise ShapeError(f"registration: extents {f_m.shape[:3]} not divisible by {div}")

        x = ops.concat([f_m, f_f], axis=-1)

        horiz = ops.silu(self.horiz2(ops.silu(self.horiz1(x))))

        tokens, grid = self.embed(x)
        tokens = ops.add(tokens, self._pos_embedding(tokens.shape[1], tokens.shape[2], x.dtype))
        skips = []
        for i, stage in enumerate(self.stages):
            tokens = stage(tokens, chunk=self.scan_chunk)
            skips.append((tokens, grid))
            if i < len(self.merges):
                tokens, grid = self.merges[i](tokens, grid)

        d = tokens_to_volume(skips[-1][0], skips[-1][1])
        for conv, (skip_tokens, skip_grid) in zip(self.dec_convs, reversed(skips[:-1])):
            d = ops.upsample_nearest3d(d)
            d = ops.silu(conv(ops.concat([d, tokens_to_volume(skip_tokens, skip_grid)], axis=-1)))
        for conv in self.patch_up:
            d = ops.silu(conv(ops.upsample_nearest3d(d)))

        fused = ops.silu(self.fuse(ops.concat([d, horiz], axis=-1)))
        return self.head(fused)


class RegistrationModel(Module):
    """Feature extraction + velocity estimation + optional SVF integration."""

    def __init__(self, cfg: TrainConfig, rng=None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        dtype = np.float32 if cfg.precision == "f32" else np.float64
        self.cfg = cfg
        self.dtype = dtype
        self.extractor = FeatureExtractor(rng, cfg.extractor_width, dtype) if cfg.use_extractor else None
        in_ch = cfg.extractor_width if cfg.use_extractor else 1
        self.regnet = RegistrationNetwork(in_ch, cfg, rng, dtype)

    def features(self, vol):
        """Apply the shared extractor; raw intensities pass through when off."""
        x = as_tensor(vol, dtype=self.dtype) if not isinstance(vol, Tensor) else vol
        if x.ndim == 3:
            x = ops.reshape(x, x.shape + (1,))
        if self.extractor is None:
            return x
        return self.extractor(x)

    def __call__(self, x_m, x_f):
        f_m = self.features(x_m)
        f_f = self.features(x_f)
        v = self.regnet(f_m, f_f)
        u = integrate_svf(v, self.cfg.int_steps) if self.cfg.use_integration else v
        return {"f_m": f_m, "f_f": f_f, "velocity": v, "disp": u}


# -- checkpoint serialization ------------------------------------------------

_MAGIC = b"MMKPT1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}

# network hyperparameters stored inside the checkpoint as scalar entries
_CONFIG_KEYS = (
    "use_extractor", "use_integration", "int_steps", "patch_size", "embed_dim",
    "stages", "blocks_per_stage", "state_dim", "expand", "conv_kernel",
    "extractor_width", "horizontal_width", "decoder_width", "scan_chunk",
)


class CheckpointError(ValueError):
    pass


def save_tensors(path, named):
    """Write named arrays: magic, manifest, then raw little-endian payloads."""
    entries = [(name, np.asarray(arr)) for name, arr in named]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            code = _DTYPE_CODES[np.dtype(arr.dtype)]
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:6]!r}")
    off = 6
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        manifest.append((name, _DTYPES[code], shape))
    out = {}
    for name, dt, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * dt.itemsize
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(blob[off:off + nbytes], dtype=dt).reshape(shape).copy()
        off += nbytes
    return out


def save_checkpoint(path, model: RegistrationModel):
    named = [(f"config.{k}", np.asarray(float(getattr(model.cfg, k)), dtype=np.float64))
             for k in _CONFIG_KEYS]
    named += [(name, p.data) for name, p in model.named_params()]
    save_tensors(path, named)


def load_checkpoint(path):
    """Rebuild a model from a self-describing checkpoint."""
    tensors = load_tensors(path)
    kv = {}
    for key in _CONFIG_KEYS:
        full = f"config.{key}"
        if full not in tensors:
            raise CheckpointError(f"{path}: missing {full}")
        val = float(tensors[full])
        kv[key] = bool(round(val)) if key.startswith("use_") else int(round(val))
    params = {k: v for k, v in tensors.items() if not k.startswith("config.")}
    precision = "f64"
    for arr in params.values():
        precision = "f32" if arr.dtype == np.float32 else "f64"
        break
    cfg = TrainConfig(precision=precision, **kv)
    model = RegistrationModel(cfg)
    have = dict(model.named_params())
    if set(have) != set(params):
        missing = set(have) ^ set(params)
        raise CheckpointError(f"{path}: parameter set mismatch: {sorted(missing)[:4]}...")
    for name, arr in params.items():
        if have[name].data.shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}")
        have[name].data = arr.astype(model.dtype, copy=True)
    return model
