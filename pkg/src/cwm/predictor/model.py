"""Masked frame-pair predictor: ViT encoder over visible tokens, shallow decoder.

Token order is time-major: all patches of context frame 0, then context frame
1, ..., then the target frame, each frame row-major.  The encoder only sees
the visible tokens (every context token plus the visible target tokens); the
decoder sees the projected encoder outputs scattered back to their slots with
the learnable mask token everywhere else.  Fixed sine-cosine positional tables
are added to both encoder and decoder inputs.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .. import numkernel as nk
from ..numkernel import Tensor
from .config import PredictorConfig
from .patches import PatchMask, patchify, unpatchify


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.astype(np.float64).reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_table(dim: int, n_frames: int, grid: int) -> np.ndarray:
    """``(n_frames * grid * grid, dim)`` table; width split into time / row / col parts."""
    d_sp = (dim // 3) // 2 * 2
    d_t = dim - 2 * d_sp
    t, r, c = np.meshgrid(np.arange(n_frames), np.arange(grid), np.arange(grid), indexing="ij")
    parts = [_sincos_1d(d_t, t), _sincos_1d(d_sp, r), _sincos_1d(d_sp, c)]
    return np.concatenate(parts, axis=1).astype(np.float32)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(np.float32)


@dataclass
class PredictorState:
    config: PredictorConfig
    params: "OrderedDict[str, Tensor]"
    pos_enc: np.ndarray
    pos_dec: np.ndarray
    meta: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, v.data) for k, v in self.params.items())
        out["pos_enc"] = self.pos_enc
        out["pos_dec"] = self.pos_dec
        return out


def init_state(config: PredictorConfig, seed: int = 0) -> PredictorState:
    rng = np.random.default_rng(seed)
    p: OrderedDict[str, Tensor] = OrderedDict()

    def linear(name, fan_in, fan_out):
        p[f"{name}.weight"] = Tensor(_xavier(rng, fan_in, fan_out), requires_grad=True)
        p[f"{name}.bias"] = Tensor(np.zeros(fan_out, np.float32), requires_grad=True)

    def norm(name, dim):
        p[f"{name}.weight"] = Tensor(np.ones(dim, np.float32), requires_grad=True)
        p[f"{name}.bias"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def block(prefix, dim):
        hidden = int(dim * config.mlp_ratio)
        norm(f"{prefix}.norm1", dim)
        for n in ("q", "k", "v"):
            linear(f"{prefix}.attn.{n}", dim, dim)
        linear(f"{prefix}.attn.proj", dim, dim)
        norm(f"{prefix}.norm2", dim)
        linear(f"{prefix}.mlp.fc1", dim, hidden)
        linear(f"{prefix}.mlp.fc2", hidden, dim)

    D, Dd = config.encoder_dim, config.decoder_dim
    linear("patch_embed", config.patch_dim, D)
    for i in range(config.encoder_depth):
        block(f"encoder.{i}", D)
    norm("encoder.norm", D)
    linear("decoder_embed", D, Dd)
    p["mask_token"] = Tensor(np.zeros((1, 1, Dd), np.float32), requires_grad=True)
    for i in range(config.decoder_depth):
        block(f"decoder.{i}", Dd)
    norm("decoder.norm", Dd)
    # zero head: the untrained predictor outputs zeros (or the residual base exactly)
    p["head.weight"] = Tensor(np.zeros((Dd, config.patch_dim), np.float32), requires_grad=True)
    p["head.bias"] = Tensor(np.zeros(config.patch_dim, np.float32), requires_grad=True)

    pos_enc = sincos_table(D, config.n_frames, config.grid)
    pos_dec = sincos_table(Dd, config.n_frames, config.grid)
    return PredictorState(config, p, pos_enc, pos_dec)


def state_from_tensors(config: PredictorConfig, tensors: dict, meta: dict | None = None) -> PredictorState:
    ref = init_state(config, 0)
    params = OrderedDict()
    for name in ref.params:
        if name not in tensors:
            raise KeyError(f"checkpoint is missing tensor {name!r}")
        arr = np.asarray(tensors[name], dtype=np.float32)
        if arr.shape != ref.params[name].shape:
            raise ValueError(f"tensor {name!r} has shape {arr.shape}, config expects {ref.params[name].shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True)
    pos_enc = np.asarray(tensors.get("pos_enc", ref.pos_enc), dtype=np.float32)
    pos_dec = np.asarray(tensors.get("pos_dec", ref.pos_dec), dtype=np.float32)
    return PredictorState(config, params, pos_enc, pos_dec, dict(meta or {}))


# -- layers ------------------------------------------------------------------

def _linear(p, name: str, x: Tensor) -> Tensor:
    *lead, d = x.shape
    y = nk.matmul(x.reshape(-1, d), p[f"{name}.weight"]) + p[f"{name}.bias"]
    return y.reshape(*lead, y.shape[-1])


def _attention(p, prefix: str, x: Tensor, heads: int) -> Tensor:
    B, L, D = x.shape
    dh = D // heads

    def split(name):
        return _linear(p, f"{prefix}.{name}", x).reshape(B, L, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split("q"), split("k"), split("v")
    scores = nk.matmul(q, k.transpose(0, 1, 3, 2)) * float(1.0 / np.sqrt(dh))
    attn = nk.softmax(scores)
    out = nk.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, L, D)
    return _linear(p, f"{prefix}.proj", out)


def _block(p, prefix: str, x: Tensor, heads: int) -> Tensor:
    h = nk.layer_norm(x, p[f"{prefix}.norm1.weight"], p[f"{prefix}.norm1.bias"])
    x = x + _attention(p, f"{prefix}.attn", h, heads)
    h = nk.layer_norm(x, p[f"{prefix}.norm2.weight"], p[f"{prefix}.norm2.bias"])
    h = _linear(p, f"{prefix}.mlp.fc2", nk.gelu(_linear(p, f"{prefix}.mlp.fc1", h)))
    return x + h


# -- forward -----------------------------------------------------------------

def _check_inputs(state: PredictorState, context_patches, target_visible, visible_idx):
    cfg = state.config
    n = cfg.num_patches
    B = context_patches.shape[0]
    if context_patches.shape[1:] != (cfg.n_context_frames * n, cfg.patch_dim):
        raise ValueError(f"context patches {context_patches.shape[1:]} do not match config "
                         f"({cfg.n_context_frames * n}, {cfg.patch_dim})")
    if visible_idx.ndim != 2 or visible_idx.shape[0] != B:
        raise ValueError(f"visible index array must be (batch, k), got {visible_idx.shape}")
    if target_visible.shape != (B, visible_idx.shape[1], cfg.patch_dim):
        raise ValueError(f"visible target patches {target_visible.shape} inconsistent with "
                         f"index {visible_idx.shape}")
    if visible_idx.size and (visible_idx.min() < 0 or visible_idx.max() >= n):
        raise ValueError("visible target index out of range")


def encode(state: PredictorState, context_patches: np.ndarray, target_visible: np.ndarray,
           visible_idx: np.ndarray, layer: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Run the encoder on visible tokens.

    Returns the token embeddings ``(B, C*N + K, D)`` and the flat token
    positions they occupy.  ``layer`` selects a block output (``-1`` = last
    block followed by the final norm).
    """
    cfg = state.config
    p = state.params
    context_patches = np.asarray(context_patches, dtype=np.float32)
    target_visible = np.asarray(target_visible, dtype=np.float32)
    visible_idx = np.asarray(visible_idx, dtype=np.int64)
    _check_inputs(state, context_patches, target_visible, visible_idx)
    B = context_patches.shape[0]
    n = cfg.num_patches
    cn = cfg.n_context_frames * n
    tokens = np.concatenate([context_patches, target_visible], axis=1)
    positions = np.concatenate([np.broadcast_to(np.arange(cn), (B, cn)), cn + visible_idx], axis=1)
    x = _linear(p, "patch_embed", Tensor(tokens)) + Tensor(state.pos_enc[positions])
    layer = cfg.embed_layer if layer is None else layer
    depth = cfg.encoder_depth
    stop = depth if layer < 0 else layer + 1
    for i in range(stop):
        x = _block(p, f"encoder.{i}", x, cfg.encoder_heads)
    if layer < 0 or layer >= depth - 1:
        x = nk.layer_norm(x, p["encoder.norm.weight"], p["encoder.norm.bias"])
    return x, positions


def run(state: PredictorState, context_patches: np.ndarray, target_visible: np.ndarray,
        visible_idx: np.ndarray) -> Tensor:
    """Predict every target-frame patch: ``(B, N, P*P*3)``."""
    cfg = state.config
    p = state.params
    x, positions = encode(state, context_patches, target_visible, visible_idx, layer=-1)
    B = x.shape[0]
    total = cfg.n_frames * cfg.num_patches
    y = _linear(p, "decoder_embed", x)
    full = nk.scatter(y, positions, total)
    hidden = np.ones((B, total, 1), dtype=np.float32)
    hidden[np.arange(B)[:, None], positions] = 0.0
    full = full + p["mask_token"] * hidden + Tensor(state.pos_dec)
    for i in range(cfg.decoder_depth):
        full = _block(p, f"decoder.{i}", full, cfg.decoder_heads)
    full = nk.layer_norm(full, p["decoder.norm.weight"], p["decoder.norm.bias"])
    n = cfg.num_patches
    tgt = nk.gather(full, np.broadcast_to(np.arange(total - n, total), (B, n)))
    out = _linear(p, "head", tgt)
    if cfg.residual:
        out = out + Tensor(np.asarray(context_patches, dtype=np.float32)[:, -n:])
    return out


def forward(state: PredictorState, context_frames: np.ndarray, target_frame: np.ndarray | None,
            mask: PatchMask | list[PatchMask], composite: bool = False) -> np.ndarray:
    """Predicted target frame(s) ``(B, H, W, 3)`` from raw frames.

    ``context_frames`` is ``(B, C, H, W, 3)``; only the patches of
    ``target_frame`` (``(B, H, W, 3)``) selected by ``mask`` are shown to the
    model.  With ``composite=True`` the visible positions are overwritten with
    the true target content.
    """
    cfg = state.config
    context_frames = np.asarray(context_frames, dtype=np.float32)
    if context_frames.ndim == 4:
        context_frames = context_frames[None]
    B = context_frames.shape[0]
    if context_frames.shape[1:] != (cfg.n_context_frames, cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"context frames {context_frames.shape[1:]} do not match config")
    masks = mask if isinstance(mask, list) else [mask] * B
    vis = np.stack([m.visible_target for m in masks]) if masks else np.zeros((B, 0), np.int64)
    ctx = patchify(context_frames, cfg.patch_size).reshape(B, -1, cfg.patch_dim)
    if target_frame is None:
        if vis.size:
            raise ValueError("visible target patches requested but no target frame given")
        tgt_vis = np.zeros((B, 0, cfg.patch_dim), np.float32)
    else:
        target_frame = np.asarray(target_frame, dtype=np.float32).reshape(B, cfg.image_size, cfg.image_size, 3)
        tp = patchify(target_frame, cfg.patch_size)
        tgt_vis = np.take_along_axis(tp, vis[..., None], axis=1)
    with nk.no_grad():
        pred = run(state, ctx, tgt_vis, vis).data
    if composite and vis.size:
        pred = pred.copy()
        np.put_along_axis(pred, vis[..., None], tgt_vis, axis=1)
    return unpatchify(pred, cfg.patch_size)


def resize_pos_embed(state: PredictorState, new_image_size: int) -> PredictorState:
    """Bilinear (aligned-corner) interpolation of each frame slot's positional grid."""
    cfg = state.config
    if new_image_size % cfg.patch_size:
        raise ValueError(f"image size {new_image_size} not divisible by patch size {cfg.patch_size}")
    new_grid = new_image_size // cfg.patch_size
    if new_grid == cfg.grid:
        return state

    def interp(table: np.ndarray) -> np.ndarray:
        d = table.shape[1]
        g = cfg.grid
        t = table.reshape(cfg.n_frames, g, g, d).astype(np.float64)
        coords = np.linspace(0.0, g - 1.0, new_grid) if g > 1 else np.zeros(new_grid)
        i0 = np.clip(np.floor(coords).astype(int), 0, max(g - 2, 0))
        i1 = np.minimum(i0 + 1, g - 1)
        f = coords - i0
        rows = t[:, i0] * (1 - f)[None, :, None, None] + t[:, i1] * f[None, :, None, None]
        out = rows[:, :, i0] * (1 - f)[None, None, :, None] + rows[:, :, i1] * f[None, None, :, None]
        return out.reshape(-1, d).astype(np.float32)

    new_cfg = PredictorConfig.from_dict({**cfg.to_dict(), "image_size": new_image_size})
    return PredictorState(new_cfg, state.params, interp(state.pos_enc), interp(state.pos_dec), dict(state.meta))
