"""Keypoints: the patches whose visibility best explains the next frame."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..counterfactual import Action, Entry, as_predictor

MODES = ("greedy_argmax", "topk_eval")


@dataclass
class KeypointSet:
    locations: list[tuple[int, int]] = field(default_factory=list)
    # composite-frame MSE after each selection
    mse: list[float] = field(default_factory=list)
    initial_mse: float | None = None

    def __len__(self) -> int:
        return len(self.locations)

    def to_dict(self) -> dict:
        return {"locations": [list(l) for l in self.locations], "mse": self.mse,
                "initial_mse": self.initial_mse}


def patch_errors(pred: np.ndarray, target: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-patch mean squared error, ``(..., grid, grid)``."""
    d = (np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2
    *lead, h, w, c = d.shape
    g = h // patch_size
    return d.reshape(*lead, g, patch_size, w // patch_size, patch_size, c).mean(axis=(-4, -2, -1))


def _entry(x2: np.ndarray, loc, P: int) -> Entry:
    r, c = loc
    return Entry((r, c), np.ascontiguousarray(x2[r * P:(r + 1) * P, c * P:(c + 1) * P]), (r, c))


def extract_keypoints(model, x1: np.ndarray, x2: np.ndarray, iters: int, mode: str = "topk_eval",
                      k: int = 4) -> KeypointSet:
    """Greedy keypoint selection starting from the empty action.

    ``greedy_argmax`` reveals the patch with the largest current error.
    ``topk_eval`` re-predicts with each of the ``k`` largest-error patches
    revealed and keeps the one giving the lowest total MSE; ``k`` at least
    the number of patches makes it the exhaustive single-step argmin.
    """
    return extract_keypoints_batch(model, [x1], [x2], iters, mode, k)[0]


def extract_keypoints_batch(model, x1s, x2s, iters: int, mode: str = "topk_eval", k: int = 4) -> list[KeypointSet]:
    """``extract_keypoints`` for several independent frame pairs, sharing predictor calls."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    pred = as_predictor(model)
    P = pred.patch_size
    grid = pred.image_size // P
    if not 0 <= iters <= grid * grid:
        raise ValueError(f"iters must lie in [0, {grid * grid}]")
    if k < 1:
        raise ValueError("k must be positive")
    ctx = np.asarray(x1s, np.float32)
    x2s = np.asarray(x2s, np.float32)
    n = len(ctx)
    outs = [KeypointSet() for _ in range(n)]
    if iters == 0 or n == 0:
        return outs
    actions = [Action(grid, P) for _ in range(n)]
    current = pred.predict(ctx, actions)
    for b in range(n):
        outs[b].initial_mse = float(np.mean((current[b].astype(np.float64) - x2s[b]) ** 2))
    chosen = np.zeros((n, grid, grid), dtype=bool)
    for _ in range(iters):
        trials, owner, cands = [], [], []
        for b in range(n):
            err = patch_errors(current[b], x2s[b], P)
            err = np.where(chosen[b], -np.inf, err).reshape(-1)
            # stable sort: equal errors keep row-major order
            order = np.argsort(-err, kind="stable")
            free = order[:int((~chosen[b]).sum())]
            c = [int(free[0])] if mode == "greedy_argmax" else [int(i) for i in free[:k]]
            for i in c:
                trials.append(actions[b] + Action(grid, P, [_entry(x2s[b], (i // grid, i % grid), P)]))
                owner.append(b)
            cands.append(c)
        preds = pred.predict(ctx[owner], trials)
        owner = np.array(owner)
        for b in range(n):
            rows = np.flatnonzero(owner == b)
            totals = ((preds[rows].astype(np.float64) - x2s[b]) ** 2).mean(axis=(1, 2, 3))
            j = int(np.argmin(totals))
            best = cands[b][j]
            actions[b], current[b] = trials[rows[j]], preds[rows[j]]
            loc = (best // grid, best % grid)
            chosen[b][loc] = True
            outs[b].locations.append(loc)
            outs[b].mse.append(float(totals[j]))
    return outs


def keypoint_action(x2: np.ndarray, kps: KeypointSet, patch_size: int) -> Action:
    grid = x2.shape[0] // patch_size
    return Action(grid, patch_size, [_entry(x2, loc, patch_size) for loc in kps.locations])
