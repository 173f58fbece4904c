"""Actions, action sampling and counterfactual prediction.

An action is a sparse target frame: a handful of grid patches with given
contents.  Running the predictor with a fully visible context and exactly
those patches visible in the target frame is a counterfactual prediction.

Motion entries carry a whole-pixel shift.  The entry's destination is the
grid patch nearest to ``source + shift`` and its content is the ``P x P``
window of ``x`` at ``destination - shift``, i.e. what the destination cell
would show if the scene under it had moved by ``shift``.  Zero shift gives a
stop-motion entry: the source patch copied onto itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import numkernel as nk
from .predictor.model import PredictorState, encode, run
from .predictor.patches import patchify, unpatchify


# -- actions -----------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    dst: tuple[int, int]
    content: np.ndarray  # (P, P, 3)
    src: tuple[int, int] | None = None
    shift: tuple[int, int] = (0, 0)


def window(x: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """``size x size`` window of ``x`` at (top, left); rows/cols outside the canvas are edge-replicated."""
    h, w = x.shape[:2]
    rows = np.clip(np.arange(top, top + size), 0, h - 1)
    cols = np.clip(np.arange(left, left + size), 0, w - 1)
    return x[rows][:, cols]


def _check_loc(loc, grid: int) -> tuple[int, int]:
    r, c = int(loc[0]), int(loc[1])
    if not (0 <= r < grid and 0 <= c < grid):
        raise ValueError(f"patch location {(r, c)} outside the {grid}x{grid} grid")
    return r, c


def move_entry(x: np.ndarray, src, shift, patch_size: int) -> Entry:
    """Entry showing the patch at ``src`` moved by ``shift`` whole pixels, snapped to the grid."""
    grid = x.shape[0] // patch_size
    src = _check_loc(src, grid)
    dy, dx = int(shift[0]), int(shift[1])
    dst = tuple(int(np.clip(np.floor((s * patch_size + d) / patch_size + 0.5), 0, grid - 1))
                for s, d in zip(src, (dy, dx)))
    content = window(x, dst[0] * patch_size - dy, dst[1] * patch_size - dx, patch_size)
    return Entry(dst, np.ascontiguousarray(content, dtype=np.float32), src, (dy, dx))


def stop_motion_entry(x: np.ndarray, location, patch_size: int = 8) -> Entry:
    """Copy the patch at ``location`` onto itself (hold that content fixed)."""
    return move_entry(x, location, (0, 0), patch_size)


@dataclass
class Action:
    grid: int
    patch_size: int
    entries: list[Entry] = field(default_factory=list)

    def add(self, entry: Entry) -> "Action":
        _check_loc(entry.dst, self.grid)
        self.entries.append(entry)
        return self

    def __add__(self, other: "Action") -> "Action":
        if (other.grid, other.patch_size) != (self.grid, self.patch_size):
            raise ValueError("cannot combine actions on different grids")
        return Action(self.grid, self.patch_size, self.entries + other.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def resolved(self) -> dict[tuple[int, int], Entry]:
        # later entries overwrite earlier ones on the same destination
        out: dict[tuple[int, int], Entry] = {}
        for e in self.entries:
            out[tuple(e.dst)] = e
        return out

    def visible(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted flat destination indices and their ``(P*P*3)`` contents."""
        res = self.resolved()
        keys = sorted(res, key=lambda rc: rc[0] * self.grid + rc[1])
        idx = np.array([r * self.grid + c for r, c in keys], dtype=np.int64)
        content = np.stack([res[k].content.reshape(-1) for k in keys]) if keys else \
            np.zeros((0, self.patch_size * self.patch_size * 3), np.float32)
        return idx, content.astype(np.float32)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.grid, self.grid), dtype=bool)
        for r, c in self.resolved():
            m[r, c] = True
        return m

    def sparse_frame(self) -> np.ndarray:
        P = self.patch_size
        a = np.zeros((self.grid * P, self.grid * P, 3), np.float32)
        for (r, c), e in self.resolved().items():
            a[r * P:(r + 1) * P, c * P:(c + 1) * P] = e.content
        return a

    def to_json(self, base: str | None = None) -> str:
        items = [{"src": list(e.src) if e.src is not None else None, "dst": list(e.dst),
                  "shift": list(e.shift)} for e in self.entries]
        return json.dumps({"base": base, "grid": self.grid, "patch_size": self.patch_size,
                           "entries": items}, indent=1)

    @classmethod
    def from_json(cls, text: str, x: np.ndarray) -> "Action":
        """Rebuild an action against its base frame ``x``."""
        d = json.loads(text)
        act = cls(int(d["grid"]), int(d["patch_size"]))
        for it in d["entries"]:
            src = it["src"] if it["src"] is not None else it["dst"]
            act.add(move_entry(x, src, it.get("shift", (0, 0)), act.patch_size))
        return act


def empty_action(image_size: int, patch_size: int) -> Action:
    return Action(image_size // patch_size, patch_size)


# -- spatial distributions ---------------------------------------------------

class SpatialDistribution:
    """Normalized nonnegative weights over grid locations."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("weights must be a 2-D grid")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        self.weights = w / total

    @classmethod
    def uniform(cls, grid: int) -> "SpatialDistribution":
        return cls(np.ones((grid, grid)))

    @classmethod
    def one_hot(cls, grid: int, loc) -> "SpatialDistribution":
        w = np.zeros((grid, grid))
        w[_check_loc(loc, grid)] = 1.0
        return cls(w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def support(self) -> int:
        return int(np.count_nonzero(self.weights))

    def draw(self, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
        if n > self.support:
            raise ValueError(f"cannot draw {n} distinct locations from a support of {self.support}")
        flat = rng.choice(self.weights.size, size=n, replace=False, p=self.weights.reshape(-1))
        gw = self.weights.shape[1]
        return [(int(i) // gw, int(i) % gw) for i in flat]


def sample(x: np.ndarray, p: SpatialDistribution, n: int, r: float, rng: np.random.Generator,
           patch_size: int = 8) -> Action:
    """``n`` patches from ``p`` (no replacement), all moved by one offset drawn from U(-r, r)^2."""
    if n < 0 or r < 0:
        raise ValueError("n and r must be nonnegative")
    grid = x.shape[0] // patch_size
    if p.shape != (grid, grid):
        raise ValueError(f"distribution grid {p.shape} does not match frame grid {grid}")
    eps = rng.uniform(-r, r, size=2) if r > 0 else np.zeros(2)
    shift = tuple(int(v) for v in np.rint(eps))
    act = Action(grid, patch_size)
    for src in p.draw(n, rng):
        act.add(move_entry(x, src, shift, patch_size))
    return act


# -- predictors ----------------------------------------------------------------

class Predictor(Protocol):
    """What structure queries need from a predictor.

    ``predict`` returns composite frames ``(B, H, W, 3)`` (action content at
    action locations, completions elsewhere) for context stacks
    ``(B, C, H, W, 3)``; ``embed`` returns per-patch embeddings
    ``(B, grid, grid, D)`` of single frames.
    """

    image_size: int
    patch_size: int

    def predict(self, contexts: np.ndarray, actions: Sequence[Action]) -> np.ndarray: ...

    def embed(self, frames: np.ndarray) -> np.ndarray: ...


class ModelPredictor:
    """Adapter from a trained :class:`PredictorState` to the :class:`Predictor` protocol."""

    def __init__(self, state: PredictorState, chunk: int = 32):
        self.state = state
        self.chunk = chunk
        cfg = state.config
        self.image_size = cfg.image_size
        self.patch_size = cfg.patch_size
        self.n_context = cfg.n_context_frames

    def _context(self, contexts: np.ndarray) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=np.float32)
        if contexts.ndim == 4:
            # single frames: a static scene fills every context slot
            contexts = np.repeat(contexts[:, None], self.n_context, axis=1)
        c = contexts.shape[1]
        if c < self.n_context:
            contexts = np.concatenate([np.repeat(contexts[:, :1], self.n_context - c, axis=1), contexts], axis=1)
        return contexts[:, -self.n_context:]

    def predict(self, contexts: np.ndarray, actions: Sequence[Action]) -> np.ndarray:
        cfg = self.state.config
        ctx = self._context(contexts)
        B = ctx.shape[0]
        if len(actions) != B:
            raise ValueError(f"{len(actions)} actions for {B} contexts")
        out = np.empty((B, cfg.image_size, cfg.image_size, 3), np.float32)
        # group by visible count so each chunk is a rectangular batch
        vis = [a.visible() for a in actions]
        by_k: dict[int, list[int]] = {}
        for i, (idx, _) in enumerate(vis):
            by_k.setdefault(len(idx), []).append(i)
        for k, members in sorted(by_k.items()):
            for s in range(0, len(members), self.chunk):
                sel = members[s:s + self.chunk]
                cp = patchify(ctx[sel], cfg.patch_size).reshape(len(sel), -1, cfg.patch_dim)
                vi = np.stack([vis[i][0] for i in sel]) if k else np.zeros((len(sel), 0), np.int64)
                vc = np.stack([vis[i][1] for i in sel]) if k else np.zeros((len(sel), 0, cfg.patch_dim), np.float32)
                with nk.no_grad():
                    pred = run(self.state, cp, vc, vi).data.copy()
                if k:
                    np.put_along_axis(pred, vi[..., None], vc, axis=1)
                out[sel] = unpatchify(pred, cfg.patch_size)
        return out

    def embed(self, frames: np.ndarray) -> np.ndarray:
        cfg = self.state.config
        frames = np.asarray(frames, dtype=np.float32)
        B = frames.shape[0]
        n = cfg.num_patches
        out = []
        for s in range(0, B, self.chunk):
            f = frames[s:s + self.chunk]
            cp = patchify(self._context(f), cfg.patch_size).reshape(len(f), -1, cfg.patch_dim)
            with nk.no_grad():
                x, _ = encode(self.state, cp, np.zeros((len(f), 0, cfg.patch_dim), np.float32),
                              np.zeros((len(f), 0), np.int64))
            out.append(x.data[:, (cfg.n_context_frames - 1) * n:cfg.n_context_frames * n])
        e = np.concatenate(out, axis=0)
        return e.reshape(B, cfg.grid, cfg.grid, -1)


def as_predictor(model) -> Predictor:
    if isinstance(model, PredictorState):
        return ModelPredictor(model)
    if hasattr(model, "predict") and hasattr(model, "embed"):
        return model
    raise TypeError(f"{type(model).__name__} is not a predictor")


def counterfactual_predict(model, x: np.ndarray, a: Action) -> np.ndarray:
    """Composite prediction of the next frame after context ``x`` under action ``a``.

    ``x`` is one frame ``(H, W, 3)`` or a context stack ``(C, H, W, 3)``.
    """
    pred = as_predictor(model)
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-3] != pred.image_size or x.shape[-2] != pred.image_size:
        raise ValueError(f"frame {x.shape} does not match the predictor's {pred.image_size}px canvas")
    if (a.grid, a.patch_size) != (pred.image_size // pred.patch_size, pred.patch_size):
        raise ValueError("action grid does not match the predictor")
    return pred.predict(x[None], [a])[0]
