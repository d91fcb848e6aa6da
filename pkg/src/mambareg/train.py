"""Training loop: per-pair forward, loss, (optionally surgically combined)
gradients, Adam updates, validation-based checkpoint selection."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .engine import NumericError, adam_init, adam_step, ops
from .fields import warp_labels
from .losses import LossWeights, gradient_surgery, total_loss
from .metrics import dice_score
from .networks import RegistrationModel, save_checkpoint
from .synthdata import load_manifest, load_pair


def _flatten(params, grads=None):
    if grads is None:
        grads = [None if p.grad is None else p.grad for p in params]
    return np.concatenate([
        (np.zeros(p.data.size, dtype=np.float64) if g is None else g.reshape(-1).astype(np.float64))
        for p, g in zip(params, grads)
    ])


def _unflatten(flat, params):
    out = []
    pos = 0
    for p in params:
        n = p.data.size
        out.append(flat[pos:pos + n].reshape(p.data.shape).astype(p.data.dtype))
        pos += n
    return out


def _load_split(manifest_path, split):
    records = [r for r in load_manifest(manifest_path) if r["split"] == split]
    return [(r["subject"], load_pair(manifest_path, r)) for r in records]


def validation_dice(model, pairs):
    """Mean foreground Dice of hard-warped moving labels against fixed labels."""
    scores = []
    for _, (moving, fixed, mlab, flab) in pairs:
        out = model(moving.grid.astype(model.dtype), fixed.grid.astype(model.dtype))
        hard = warp_labels(mlab, out["disp"].data.astype(np.float64))
        _, mean = dice_score(hard, flab)
        scores.append(mean)
    return float(np.mean(scores)) if scores else float("nan")


def train(cfg: TrainConfig, manifest_path, out_dir, log_name="loss_log.jsonl"):
    """Run the full loop; returns a summary dict.

    Writes checkpoint.last (per epoch), checkpoint.best (best validation
    Dice), the line-delimited loss log, and a loss-curve figure. A
    non-finite loss aborts with NumericError; the last epoch's checkpoint
    stays on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_pairs = _load_split(manifest_path, "train")
    val_pairs = _load_split(manifest_path, "val")
    if not train_pairs:
        raise ValueError("manifest has no training subjects")

    model = RegistrationModel(cfg)
    params = model.params()
    opt_state = adam_init(params)
    weights = LossWeights(cfg.lambda_c if cfg.use_extractor else 0.0,
                          cfg.lambda_s, cfg.tau, cfg.contrast_samples)
    rng = np.random.default_rng((cfg.seed, 0xA5))
    log_path = out_dir / log_name
    best = {"dice": -np.inf, "epoch": -1}
    step = 0
    history = []
    t0 = time.time()

    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_pairs))
            for i in order:
                _, (moving, fixed, mlab, flab) = train_pairs[int(i)]
                out = model(moving.grid.astype(model.dtype), fixed.grid.astype(model.dtype))
                loss, report, terms = total_loss(
                    mlab, flab, out["disp"], out["f_m"], out["f_f"],
                    weights, rng, cfg.joint_contrast)
                if not np.isfinite(report["total"]):
                    raise NumericError(
                        f"non-finite loss at step {step} (epoch {epoch}); "
                        f"last-good checkpoint: {out_dir / 'checkpoint.last'}")

                use_surgery = cfg.grad_surgery and terms["supcon"] is not None
                if use_surgery:
                    reg_term = ops.add(terms["dice"], ops.mul(terms["smooth"], weights.lambda_s))
                    for p in params:
                        p.zero_grad()
                    reg_term.backward()
                    g_reg = _flatten(params)
                    for p in params:
                        p.zero_grad()
                    ops.mul(terms["supcon"], weights.lambda_c).backward()
                    g_cl = _flatten(params)
                    combined, conflict = gradient_surgery(g_reg, g_cl)
                    grads = _unflatten(combined, params)
                    report["conflict"] = int(conflict)
                else:
                    for p in params:
                        p.zero_grad()
                    loss.backward()
                    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

                adam_step(params, grads, opt_state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                step += 1
                log.write(json.dumps({"step": step, **report}) + "\n")
                history.append({"step": step, **report})

            save_checkpoint(out_dir / "checkpoint.last", model)
            if val_pairs and (epoch + 1) % cfg.val_every == 0:
                vd = validation_dice(model, val_pairs)
                log.write(json.dumps({"step": step, "val_dice": vd, "epoch": epoch}) + "\n")
                if vd > best["dice"]:
                    best = {"dice": vd, "epoch": epoch}
                    save_checkpoint(out_dir / "checkpoint.best", model)

    if not (out_dir / "checkpoint.best").exists():
        save_checkpoint(out_dir / "checkpoint.best", model)

    from .report import render_loss_curves
    render_loss_curves(history, out_dir / "loss_curves.png")
    return {
        "steps": step,
        "epochs": cfg.epochs,
        "best_val_dice": best["dice"] if np.isfinite(best["dice"]) else None,
        "best_epoch": best["epoch"],
        "wall_time_s": time.time() - t0,
        "checkpoint": str(out_dir / "checkpoint.best"),
        "loss_log": str(log_path),
    }
