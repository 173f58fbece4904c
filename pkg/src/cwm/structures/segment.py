"""Spelke segments: what moves together when one part is pushed.

A segment query moves a few patches of a frame by a random offset, holds a
few others fixed, and thresholds how far the counterfactual prediction moved
away from the input.  Flow for these queries is anchored on the query frame
``x`` (``flow_field(x_cf, x)``), so magnitude maps mark where the object
*was*.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..counterfactual import Action, SpatialDistribution, as_predictor, move_entry, stop_motion_entry
from .flow import embed_cached, flow_field

log = logging.getLogger(__name__)

RADIUS_FRAC = 0.2
N_ACTIONS = 4
THRESHOLD = 0.5
ITERS = 3
MOVABILITY_SAMPLES = 16
MAX_OBJECTS = 3
STOP_MASS = 0.10


@dataclass
class SegmentMask:
    mask: np.ndarray  # (H, W) bool
    query: tuple[int, int]
    magnitudes: list[np.ndarray] = field(default_factory=list)
    # per iteration: motion / stop patches used and the resulting patch-level segment
    records: list[dict] = field(default_factory=list)
    empty: bool = False
    params: dict = field(default_factory=dict)

    @property
    def query_in_mask(self) -> bool:
        return bool(self.mask[self.query])

    def meta(self) -> dict:
        return {"query": list(self.query), "empty": self.empty, "query_in_mask": self.query_in_mask,
                "area": int(self.mask.sum()), "params": self.params,
                "iterations": [{"motion": [list(p) for p in r["motion"]], "stop": [list(p) for p in r["stop"]],
                                "shifts": [list(s) for s in r["shifts"]], "area": r["area"]}
                               for r in self.records]}


def patch_membership(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Fraction of each patch covered by ``mask``, ``(grid, grid)``."""
    g = mask.shape[0] // patch_size
    return mask.reshape(g, patch_size, g, patch_size).mean(axis=(1, 3))


def _draw_shift(rng: np.random.Generator, r: float) -> tuple[int, int]:
    eps = rng.uniform(-r, r, size=2)
    return int(np.rint(eps[0])), int(np.rint(eps[1]))


def motion_magnitude(pred, x: np.ndarray, motion, stop, r: float, n_actions: int,
                     rng: np.random.Generator, refine: bool = False, cache: dict | None = None):
    """Mean flow magnitude over ``n_actions`` counterfactuals moving ``motion`` and holding ``stop``.

    Returns ``(magnitude map, shifts)``.  Each action draws one offset shared
    by all its motion patches; motion entries are listed after stop entries
    so they win any collision.
    """
    P = pred.patch_size
    grid = pred.image_size // P
    actions, shifts = [], []
    for _ in range(n_actions):
        s = _draw_shift(rng, r)
        a = Action(grid, P, [stop_motion_entry(x, loc, P) for loc in stop])
        for loc in motion:
            a.add(move_entry(x, loc, s, P))
        actions.append(a)
        shifts.append(s)
    preds = pred.predict(np.repeat(x[None], n_actions, axis=0), actions)
    cache = cache if cache is not None else {}
    embed_cached(pred, [x, *preds], cache)
    mags = [flow_field(pred, p, x, "cosine", refine=refine, cache=cache).magnitude for p in preds]
    return np.mean(mags, axis=0), shifts


def extract_segment(model, x: np.ndarray, pixel, rng: np.random.Generator | None = None,
                    iters: int = ITERS, n_actions: int = N_ACTIONS, radius_frac: float = RADIUS_FRAC,
                    threshold: float = THRESHOLD, refine: bool = False, cache: dict | None = None) -> SegmentMask:
    """Segment containing ``pixel`` by iterated counterfactual motion.

    Iteration 1 moves only the patch under ``pixel``.  Afterwards the motion
    set keeps the patches still inside the latest segment and gains one more
    in-segment patch; the stop set keeps its patches outside the segment and
    gains one patch with no segment pixels.  A patch counts as inside when at
    least half its pixels are.
    """
    pred = as_predictor(model)
    x = np.asarray(x, np.float32)
    i, j = int(pixel[0]), int(pixel[1])
    H = x.shape[0]
    if not (0 <= i < H and 0 <= j < x.shape[1]):
        raise ValueError(f"pixel {(i, j)} outside the canvas")
    rng = rng if rng is not None else np.random.default_rng(0)
    P = pred.patch_size
    r = radius_frac * H
    cache = cache if cache is not None else {}
    motion = [(i // P, j // P)]
    stop: list[tuple[int, int]] = []
    seg = SegmentMask(np.zeros(x.shape[:2], bool), (i, j),
                      params={"iters": iters, "n_actions": n_actions, "radius": r, "threshold": threshold,
                              "refine": refine})
    for t in range(iters):
        mag, shifts = motion_magnitude(pred, x, motion, stop, r, n_actions, rng, refine, cache)
        mask = mag > threshold
        frac = patch_membership(mask, P)
        seg.magnitudes.append(mag.astype(np.float32))
        seg.records.append({"motion": list(motion), "stop": list(stop), "shifts": shifts,
                            "inside": frac >= 0.5, "outside": frac == 0, "area": int(mask.sum())})
        seg.mask = mask
        if not mask.any():
            if t == 0:
                seg.empty = True
            break
        if t == iters - 1:
            break
        inside = frac >= 0.5
        motion = [p for p in motion if inside[p]]
        cands = [tuple(map(int, p)) for p in np.argwhere(inside) if tuple(map(int, p)) not in motion]
        if cands:
            motion.append(cands[int(rng.integers(len(cands)))])
        if not motion:
            break
        outside = frac == 0
        stop = [p for p in stop if outside[p]]
        cands = [tuple(map(int, p)) for p in np.argwhere(outside) if tuple(map(int, p)) not in stop]
        if cands:
            stop.append(cands[int(rng.integers(len(cands)))])
    return seg


def check_constructive(seg: SegmentMask) -> list[bool]:
    """Per transition: motion patches of t+1 inside segment t and stop patches outside it."""
    ok = []
    for prev, nxt in zip(seg.records, seg.records[1:]):
        ok.append(all(prev["inside"][p] for p in nxt["motion"]) and all(prev["outside"][p] for p in nxt["stop"]))
    return ok


def spelke_affinity(model, x: np.ndarray, i, j, rng: np.random.Generator | None = None,
                    n_actions: int = N_ACTIONS, radius_frac: float = RADIUS_FRAC, refine: bool = False) -> float:
    """Mean counterfactual flow magnitude at pixel ``j`` when the patch under pixel ``i`` is moved.

    With the same rng state this is iteration 1 of ``extract_segment(x, i)``,
    so ``affinity > threshold`` matches membership of ``j`` in that mask.
    """
    pred = as_predictor(model)
    x = np.asarray(x, np.float32)
    P = pred.patch_size
    for p in (i, j):
        if not (0 <= p[0] < x.shape[0] and 0 <= p[1] < x.shape[1]):
            raise ValueError(f"pixel {tuple(p)} outside the canvas")
    rng = rng if rng is not None else np.random.default_rng(0)
    mag, _ = motion_magnitude(pred, x, [(i[0] // P, i[1] // P)], [], radius_frac * x.shape[0], n_actions,
                              rng, refine)
    return float(mag[j[0], j[1]])


@dataclass
class Movability:
    distribution: SpatialDistribution  # over pixels
    magnitude: np.ndarray  # (H, W) unnormalized mean response
    degenerate: bool = False


def movability_map(model, x: np.ndarray, m_samples: int = MOVABILITY_SAMPLES,
                   rng: np.random.Generator | None = None, radius_frac: float = RADIUS_FRAC,
                   refine: bool = False, cache: dict | None = None) -> Movability:
    """Average motion response to ``m_samples`` single-patch moves at uniform random patches."""
    if m_samples < 1:
        raise ValueError("m_samples must be >= 1")
    pred = as_predictor(model)
    x = np.asarray(x, np.float32)
    rng = rng if rng is not None else np.random.default_rng(0)
    P = pred.patch_size
    grid = pred.image_size // P
    cache = cache if cache is not None else {}
    r = radius_frac * x.shape[0]
    actions = []
    for _ in range(m_samples):
        loc = (int(rng.integers(grid)), int(rng.integers(grid)))
        actions.append(Action(grid, P, [move_entry(x, loc, _draw_shift(rng, r), P)]))
    # one batched prediction; same draws as m_samples single-action motion_magnitude calls
    preds = pred.predict(np.repeat(x[None], m_samples, axis=0), actions)
    embed_cached(pred, [x, *preds], cache)
    total = np.mean([flow_field(pred, p, x, "cosine", refine=refine, cache=cache).magnitude for p in preds],
                    axis=0)
    if total.sum() <= 0:
        log.warning("movability map is zero everywhere; falling back to uniform")
        return Movability(SpatialDistribution(np.ones_like(total)), total, True)
    return Movability(SpatialDistribution(total), total)


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Square dilation by ``k`` pixels."""
    out = mask.copy()
    H, W = mask.shape
    for dy in range(-k, k + 1):
        for dx in range(-k, k + 1):
            src = mask[max(0, -dy):H - max(0, dy), max(0, -dx):W - max(0, dx)]
            out[max(0, dy):H - max(0, -dy), max(0, dx):W - max(0, -dx)] |= src
    return out


def discover_objects(model, x: np.ndarray, max_objects: int = MAX_OBJECTS, rng: np.random.Generator | None = None,
                     m_samples: int = MOVABILITY_SAMPLES, refine: bool = False, **segment_kw) -> list[SegmentMask]:
    """Up to ``max_objects`` segments, each seeded from the movability map with found objects masked out.

    Stops early when the remaining movability mass drops under 10% of the
    initial mass.  Empty segments are not returned but still mask out their
    query patch so the next draw moves on.
    """
    if max_objects < 1:
        raise ValueError("max_objects must be >= 1")
    pred = as_predictor(model)
    x = np.asarray(x, np.float32)
    rng = rng if rng is not None else np.random.default_rng(0)
    P = pred.patch_size
    cache: dict = {}
    mov = movability_map(pred, x, m_samples, rng, refine=refine, cache=cache)
    if mov.degenerate:
        return []
    weights = mov.magnitude.copy()
    initial = weights.sum()
    found: list[SegmentMask] = []
    for _ in range(max_objects):
        if weights.sum() < STOP_MASS * initial:
            break
        (qi, qj), = SpatialDistribution(weights).draw(1, rng)
        seg = extract_segment(pred, x, (qi, qj), rng, refine=refine, cache=cache, **segment_kw)
        if seg.empty:
            block = np.zeros_like(seg.mask)
            block[(qi // P) * P:(qi // P + 1) * P, (qj // P) * P:(qj // P + 1) * P] = True
        else:
            found.append(seg)
            block = seg.mask
        weights[dilate(block, P)] = 0.0
    return found
