"""Masked-patch MSE training on the sprite world."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numkernel as nk
from ..numkernel import Tensor
from ..spriteworld import WorldConfig, mix64, render_frames
from .config import PredictorConfig, TrainConfig
from .model import PredictorState, init_state, run, state_from_tensors
from .patches import patchify, sample_mask

log = logging.getLogger(__name__)


class NumericalFailure(FloatingPointError):
    """Training produced a non-finite loss; the last good checkpoint is kept on disk."""


def masked_mse(prediction, target, masked: np.ndarray) -> Tensor:
    """Mean squared pixel error over masked target patches only.

    ``prediction`` and ``target`` are ``(B, N, D)`` patch arrays and
    ``masked`` is a boolean ``(B, N)`` (or ``(N,)``) array marking the patches
    that were hidden from the model.
    """
    pred = prediction if isinstance(prediction, Tensor) else Tensor(prediction)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    masked = np.broadcast_to(np.asarray(masked, dtype=bool), pred.shape[:-1])
    if not masked.any():
        raise ValueError("masked_mse: no masked patches")
    return nk.mse(pred, target, weight=masked[..., None].astype(pred.dtype))


@dataclass
class Batch:
    context: np.ndarray  # (B, C*N, D)
    target: np.ndarray  # (B, N, D)
    visible: np.ndarray  # (B, K)

    @property
    def masked(self) -> np.ndarray:
        m = np.ones(self.target.shape[:2], dtype=bool)
        np.put_along_axis(m, self.visible, False, axis=1)
        return m

    @property
    def target_visible(self) -> np.ndarray:
        return np.take_along_axis(self.target, self.visible[..., None], axis=1)


def sample_clip(world: WorldConfig, n_context: int, index: int, rng: np.random.Generator) -> np.ndarray:
    """``(n_context + 1, H, W, 3)`` consecutive frames from episode ``index``."""
    t0 = int(rng.integers(0, world.frames - n_context))
    return render_frames(world, index, range(t0, t0 + n_context + 1))


def make_batch(config: PredictorConfig, world: WorldConfig, batch_size: int, rng: np.random.Generator,
               index_range: tuple[int, int]) -> Batch:
    lo, hi = index_range
    clips = []
    vis = []
    for _ in range(batch_size):
        idx = int(rng.integers(lo, hi))
        clips.append(sample_clip(world, config.n_context_frames, idx, rng))
        vis.append(sample_mask(config, rng).visible_target)
    clips = np.stack(clips)
    patches = patchify(clips, config.patch_size)
    B = batch_size
    ctx = patches[:, :-1].reshape(B, -1, config.patch_dim)
    return Batch(ctx, patches[:, -1], np.stack(vis))


def holdout_batch(config: PredictorConfig, world: WorldConfig, n: int, start: int) -> Batch:
    rng = np.random.default_rng(mix64(start, 7))
    return make_batch(config, world, n, rng, (start, start + 10 * n))


def evaluate_holdout(state: PredictorState, batch: Batch, chunk: int = 32) -> tuple[float, float]:
    """(masked-patch MSE, copy-last-context-frame MSE) over the same masked patches."""
    cfg = state.config
    n = cfg.num_patches
    se_model = se_copy = 0.0
    count = 0.0
    with nk.no_grad():
        for s in range(0, batch.target.shape[0], chunk):
            sl = slice(s, s + chunk)
            ctx, tgt, vis = batch.context[sl], batch.target[sl], batch.visible[sl]
            pred = run(state, ctx, np.take_along_axis(tgt, vis[..., None], axis=1), vis).data
            m = np.ones(tgt.shape[:2], dtype=bool)
            np.put_along_axis(m, vis, False, axis=1)
            w = m[..., None]
            se_model += float((w * (pred - tgt) ** 2).sum(dtype=np.float64))
            se_copy += float((w * (ctx[:, -n:] - tgt) ** 2).sum(dtype=np.float64))
            count += float(m.sum()) * tgt.shape[-1]
    return se_model / count, se_copy / count


@dataclass
class TrainResult:
    state: PredictorState
    curve: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def state_checkpoint_config(state: PredictorState, train_cfg: TrainConfig, world: WorldConfig) -> dict:
    return {"predictor": state.config.to_dict(), "train": train_cfg.to_dict(), "world": world.to_dict()}


def save_state(state: PredictorState, path, train_cfg: TrainConfig, world: WorldConfig, extra=None) -> Path:
    return nk.save_checkpoint(path, state.tensors(), state_checkpoint_config(state, train_cfg, world), extra)


def load_state(path) -> tuple[PredictorState, dict]:
    tensors, manifest = nk.load_checkpoint(path)
    cfg = PredictorConfig.from_dict(manifest["config"]["predictor"])
    state = state_from_tensors(cfg, tensors, meta={"config_hash": manifest["config_hash"]})
    return state, manifest


def train(config: PredictorConfig, world: WorldConfig, train_cfg: TrainConfig, out_dir=None,
          progress: bool = False) -> TrainResult:
    """Train from scratch; deterministic for a fixed ``train_cfg.seed``.

    Writes ``checkpoint/`` (cwm-ckpt-1) and ``loss.csv`` under ``out_dir``
    when given.  Held-out masked MSE and the copy-frame baseline are logged
    every ``log_every`` steps and at the last step.
    """
    if train_cfg.steps < 1:
        raise ValueError("steps must be >= 1")
    seed = train_cfg.seed
    state = init_state(config, seed=mix64(seed, 1))
    params = state.parameters()
    warmup = int(round(train_cfg.steps * train_cfg.warmup_fraction))
    opt = nk.init_state(params, base_lr=train_cfg.base_lr, batch_size=train_cfg.batch_size,
                        weight_decay=train_cfg.weight_decay, betas=(train_cfg.beta1, train_cfg.beta2),
                        warmup_steps=warmup, total_steps=train_cfg.steps)
    holdout = holdout_batch(config, world, train_cfg.holdout_samples, train_cfg.holdout_start)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out_dir / "checkpoint" if out_dir is not None else None
    result = TrainResult(state)
    train_range = (0, train_cfg.holdout_start)
    t_start = time.time()
    running = []

    def log_point(step: int, loss: float):
        hl, bl = evaluate_holdout(state, holdout)
        row = {"step": step, "loss": loss, "holdout_loss": hl, "baseline_loss": bl}
        if progress:
            log.info("step %d loss %.5f holdout %.5f baseline %.5f (%.0fs)", step, loss, hl, bl,
                     time.time() - t_start)
        if ckpt_dir is not None:
            save_state(state, ckpt_dir, train_cfg, world, extra={"step": step})
        return row

    for step in range(train_cfg.steps):
        rng = np.random.default_rng(mix64(seed, 1000 + step))
        batch = make_batch(config, world, train_cfg.batch_size, rng, train_range)
        for p in params:
            p.grad = None
        pred = run(state, batch.context, batch.target_visible, batch.visible)
        loss = masked_mse(pred, batch.target, batch.masked)
        lval = loss.item()
        if not np.isfinite(lval):
            raise NumericalFailure(f"non-finite loss at step {step}")
        nk.backward(loss)
        try:
            nk.adamw_step(params, [p.grad for p in params], opt)
        except nk.NonFiniteGradient as exc:
            raise NumericalFailure(str(exc)) from exc
        running.append(lval)
        row = {"step": step, "loss": lval, "holdout_loss": "", "baseline_loss": ""}
        last = step == train_cfg.steps - 1
        if (step + 1) % train_cfg.log_every == 0 or last:
            row = log_point(step, lval)
        result.curve.append(row)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "loss.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss", "holdout_loss", "baseline_loss"])
            w.writeheader()
            for r in result.curve:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
        result.checkpoint = ckpt_dir
    return result
