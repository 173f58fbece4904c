"""Optical flow from counterfactual queries.

Two routes.  The perturbation route adds a small bump to frame 1, asks the
predictor for frame 2, and looks for where the bump reappears.  The cosine
route matches encoder embeddings of the two frames.

Flow is ``(drow, dcol)`` in pixels, anchored on the second frame: content at
``q`` in frame 2 came from ``q - flow[q]`` in frame 1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..counterfactual import SpatialDistribution, as_predictor, sample

DELTA = 0.2
EPS_RESP = 0.05
N_PATCHES = 4
ITERS = 4
TIE_TOL = 1e-6


@dataclass
class FlowField:
    flow: np.ndarray  # (H, W, 2) float32, zero where undefined
    defined: np.ndarray  # (H, W) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.flow = np.where(self.defined[..., None], self.flow, 0.0).astype(np.float32)

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt((self.flow.astype(np.float64) ** 2).sum(-1))

    def with_nan(self) -> np.ndarray:
        return np.where(self.defined[..., None], self.flow, np.nan).astype(np.float32)

    @classmethod
    def from_nan(cls, arr: np.ndarray, **meta) -> "FlowField":
        d = ~np.isnan(arr).any(-1)
        return cls(np.nan_to_num(arr), d, dict(meta))

    def upsample(self, factor: int) -> "FlowField":
        f = np.repeat(np.repeat(self.flow, factor, 0), factor, 1)
        d = np.repeat(np.repeat(self.defined, factor, 0), factor, 1)
        return FlowField(f, d, dict(self.meta))


# -- perturbation flow ---------------------------------------------------------

def gaussian_bump(shape: tuple[int, int], i: int, j: int, sigma: float = 1.0) -> np.ndarray:
    """3x3 Gaussian with peak 1 centred at (i, j), cut at the canvas border."""
    g = np.zeros(shape, np.float32)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            r, c = i + di, j + dj
            if 0 <= r < shape[0] and 0 <= c < shape[1]:
                g[r, c] = np.exp(-(di * di + dj * dj) / (2 * sigma * sigma))
    return g


def perturb(x: np.ndarray, i: int, j: int, delta: float) -> np.ndarray:
    bump = gaussian_bump(x.shape[:2], i, j)
    return np.clip(x + delta * bump[..., None], 0.0, 1.0).astype(np.float32)


def _check_pixel(shape, i, j):
    if not (0 <= i < shape[0] and 0 <= j < shape[1]):
        raise ValueError(f"pixel {(i, j)} outside the {shape[0]}x{shape[1]} canvas")


def flow_perturbation(model, x1, x2, pixel, iters: int = ITERS, n: int = N_PATCHES, delta: float = DELTA,
                      rng: np.random.Generator | None = None, eps_resp: float = EPS_RESP):
    """Flow at ``pixel`` of frame 1 by tracing a perturbation into frame 2.

    Returns ``(flow, defined, max_response)``; ``flow`` is ``(drow, dcol)``
    from ``pixel`` to where the response peaks, and is undefined when the
    peak response stays below ``eps_resp``.
    """
    pred = as_predictor(model)
    x1 = np.asarray(x1, np.float32)
    x2 = np.asarray(x2, np.float32)
    i, j = int(pixel[0]), int(pixel[1])
    _check_pixel(x1.shape, i, j)
    if iters < 1 or delta <= 0:
        raise ValueError("iters must be >= 1 and delta > 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    P = pred.patch_size
    grid = pred.image_size // P
    uni = SpatialDistribution.uniform(grid)
    actions = [sample(x2, uni, n, 0.0, rng, P) for _ in range(iters)]
    xb = perturb(x1, i, j, delta)
    preds = pred.predict(np.repeat(xb[None], iters, axis=0), actions)
    resp = np.abs(preds.astype(np.float64).mean(0) - x2).mean(-1)
    k = int(np.argmax(resp))
    ii, jj = divmod(k, resp.shape[1])
    peak = float(resp[ii, jj])
    if peak < eps_resp:
        return (0, 0), False, peak
    return (ii - i, jj - j), True, peak


def perturbation_response(model, x1, x2, pixel, delta: float = DELTA, n: int = N_PATCHES,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-pixel ``|pred(x1 + bump) - pred(x1)| / |bump|`` under one shared action from ``x2``.

    The finite-difference stand-in for one row of the predictor's Jacobian.
    """
    pred = as_predictor(model)
    x1 = np.asarray(x1, np.float32)
    x2 = np.asarray(x2, np.float32)
    i, j = int(pixel[0]), int(pixel[1])
    _check_pixel(x1.shape, i, j)
    if delta <= 0:
        raise ValueError("delta must be positive")
    xb = perturb(x1, i, j, delta)
    amp = float(np.abs(xb.astype(np.float64) - x1).max())
    if amp < 0.5 / 255:
        raise ValueError(f"perturbation of {delta} vanishes at 8-bit precision")
    rng = rng if rng is not None else np.random.default_rng(0)
    P = pred.patch_size
    a = sample(x2, SpatialDistribution.uniform(pred.image_size // P), n, 0.0, rng, P)
    out = pred.predict(np.stack([xb, x1]), [a, a]).astype(np.float64)
    return np.abs(out[0] - out[1]).mean(-1) / amp


# -- cosine flow -----------------------------------------------------------------

def _unit(e: np.ndarray):
    e = np.asarray(e, np.float64)
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    ok = norm[..., 0] > 1e-12
    return np.where(ok[..., None], e / np.where(norm > 0, norm, 1.0), 0.0), ok


def flow_cosine(e1: np.ndarray, e2: np.ndarray, patch_size: int = 8) -> FlowField:
    """Patch-level flow by cosine matching of embedding grids ``(gh, gw, D)``.

    Each frame-2 patch takes the frame-1 patch of highest cosine similarity
    as its source.  Near-ties (within ``TIE_TOL``) go to the smallest
    displacement, then to the first source in row-major order.  Zero-norm
    frame-2 embeddings are undefined; zero-norm frame-1 embeddings are never
    chosen as sources.
    """
    if e1.shape != e2.shape:
        raise ValueError(f"embedding grids differ: {e1.shape} vs {e2.shape}")
    gh, gw, _ = e1.shape
    u1, ok1 = _unit(e1)
    u2, ok2 = _unit(e2)
    sim = u2.reshape(gh * gw, -1) @ u1.reshape(gh * gw, -1).T  # (target, source)
    sim[:, ~ok1.reshape(-1)] = -np.inf
    rr, cc = np.divmod(np.arange(gh * gw), gw)
    dr = rr[:, None] - rr[None, :]
    dc = cc[:, None] - cc[None, :]
    dist2 = dr * dr + dc * dc
    best = sim.max(axis=1, keepdims=True)
    near = sim >= best - TIE_TOL
    # among near-ties: smallest displacement, then lowest source index
    key = np.where(near, dist2 * (gh * gw) + np.arange(gh * gw)[None, :], np.iinfo(np.int64).max)
    src = key.argmin(axis=1)
    t = np.arange(gh * gw)
    flow = np.stack([dr[t, src], dc[t, src]], -1).reshape(gh, gw, 2).astype(np.float32) * patch_size
    defined = ok2 & np.isfinite(best[:, 0]).reshape(gh, gw)
    return FlowField(flow, defined, {"resolution": "patch"})


def dense_embed(pred, frame: np.ndarray) -> np.ndarray:
    """Per-pixel embeddings ``(H, W, D)``: the embedding of the patch centred on each pixel.

    The frame is re-gridded at every sub-patch offset (edge-replicated) and
    encoded once per offset.
    """
    P = pred.patch_size
    H = frame.shape[0]
    offs = np.arange(P) - P // 2
    shifted = []
    for oy in offs:
        rows = np.clip(np.arange(H) + oy, 0, H - 1)
        for ox in offs:
            cols = np.clip(np.arange(H) + ox, 0, H - 1)
            shifted.append(frame[rows][:, cols])
    emb = pred.embed(np.stack(shifted))  # (P*P, g, g, D)
    g = H // P
    D = emb.shape[-1]
    # pixel (r*P + a, c*P + b) <- offset (a, b), patch (r, c)
    emb = emb.reshape(P, P, g, g, D).transpose(2, 0, 3, 1, 4)
    return emb.reshape(H, H, D)


def _shift_candidates(radius: int) -> np.ndarray:
    d = np.arange(-radius, radius + 1)
    s = np.array([(a, b) for a in d for b in d])
    order = np.lexsort((np.arange(len(s)), (s ** 2).sum(1)))
    return s[order]


def refine_dense(d1: np.ndarray, d2: np.ndarray, coarse: FlowField, radius: int) -> FlowField:
    """Per-pixel matching of dense embeddings around zero and around the coarse patch flow."""
    H, W, _ = d1.shape
    u1, ok1 = _unit(d1)
    u2, ok2 = _unit(d2)
    base = _shift_candidates(radius)
    best = np.full((H, W), -np.inf)
    flow = np.zeros((H, W, 2), np.float32)
    pad = 2 * radius + int(np.abs(coarse.flow).max())
    U1 = np.zeros((H + 2 * pad, W + 2 * pad, u1.shape[-1]))
    U1[pad:pad + H, pad:pad + W] = u1
    V = np.zeros((H + 2 * pad, W + 2 * pad), bool)
    V[pad:pad + H, pad:pad + W] = ok1
    centers = [np.zeros(2, int)] + [c for c in np.unique(coarse.flow.reshape(-1, 2).astype(int), axis=0)
                                    if np.any(c != 0)]
    seen = set()
    shifts = []
    for c in centers:
        for s in base:
            t = tuple(int(v) for v in (c + s))
            if t not in seen:
                seen.add(t)
                shifts.append(t)
    # candidates by increasing |shift|; strict improvement keeps the earlier on ties
    shifts.sort(key=lambda t: (t[0] ** 2 + t[1] ** 2, t))
    for sy, sx in shifts:
        src = U1[pad - sy:pad - sy + H, pad - sx:pad - sx + W]
        valid = V[pad - sy:pad - sy + H, pad - sx:pad - sx + W]
        sim = np.where(valid, (u2 * src).sum(-1), -np.inf)
        better = sim > best + TIE_TOL
        best = np.where(better, sim, best)
        flow[better] = (sy, sx)
    defined = ok2 & np.isfinite(best)
    return FlowField(flow, defined, {"resolution": "pixel", "radius": radius})


def _key(kind: str, x: np.ndarray) -> tuple[str, str]:
    return kind, hashlib.sha1(np.ascontiguousarray(x, np.float32).tobytes()).hexdigest()


def embed_cached(model, frames, cache: dict) -> np.ndarray:
    """Patch embeddings ``(N, grid, grid, D)`` of ``frames``; uncached ones go through one batched call."""
    pred = as_predictor(model)
    keys = [_key("patch", f) for f in frames]
    todo = {}
    for k, f in zip(keys, frames):
        if k not in cache:
            todo.setdefault(k, f)
    if todo:
        embs = pred.embed(np.stack([np.asarray(f, np.float32) for f in todo.values()]))
        cache.update(zip(todo, embs))
    return np.stack([cache[k] for k in keys])


def flow_field(model, x1, x2, method: str = "cosine", refine: bool = True, rng=None,
               cache: dict | None = None) -> FlowField:
    """Dense flow from ``x1`` to ``x2`` (anchored on ``x2``).

    ``cosine``: embeddings of each frame encoded alone with every patch
    visible; patch matches are upsampled by nearest neighbour and, with
    ``refine``, replaced by per-pixel matches of dense embeddings.
    ``perturbation``: ``flow_perturbation`` at every patch centre of ``x1``,
    splatted forward to the pixels it lands on and nearest-filled elsewhere.
    ``cache`` (any dict) memoizes embeddings by frame content across calls.
    """
    pred = as_predictor(model)
    x1 = np.asarray(x1, np.float32)
    x2 = np.asarray(x2, np.float32)
    if x1.shape != x2.shape:
        raise ValueError("frames differ in shape")
    P = pred.patch_size
    if method == "cosine":
        cache = cache if cache is not None else {}

        def emb(kind, x):
            key = _key(kind, x)
            if key not in cache:
                cache[key] = pred.embed(x[None])[0] if kind == "patch" else dense_embed(pred, x)
            return cache[key]

        coarse = flow_cosine(emb("patch", x1), emb("patch", x2), P)
        if not refine:
            ff = coarse.upsample(P)
            ff.meta.update(method="cosine", refine=False)
            return ff
        ff = refine_dense(emb("dense", x1), emb("dense", x2), coarse, P // 2)
        ff.meta.update(method="cosine", refine=True)
        return ff
    if method == "perturbation":
        rng = rng if rng is not None else np.random.default_rng(0)
        g = pred.image_size // P
        H = x1.shape[0]
        flow = np.full((g, g, 2), np.nan, np.float32)
        for r in range(g):
            for c in range(g):
                (fy, fx), ok, _ = flow_perturbation(pred, x1, x2, (r * P + P // 2, c * P + P // 2), rng=rng)
                if ok:
                    flow[r, c] = (fy, fx)
        # re-anchor on frame 2 by nearest patch-centre landing point
        centers = np.stack(np.meshgrid(np.arange(g), np.arange(g), indexing="ij"), -1) * P + P // 2
        land = (centers + np.nan_to_num(flow)).reshape(-1, 2)
        okf = ~np.isnan(flow).any(-1).reshape(-1)
        yy, xx = np.mgrid[0:H, 0:H]
        out = np.zeros((H, H, 2), np.float32)
        defined = np.zeros((H, H), bool)
        if okf.any():
            d2 = (yy[..., None] - land[okf, 0]) ** 2 + (xx[..., None] - land[okf, 1]) ** 2
            out = flow.reshape(-1, 2)[okf][d2.argmin(-1)]
            defined[:] = True
        return FlowField(out, defined, {"method": "perturbation", "stride": P})
    raise ValueError(f"unknown flow method {method!r}")


def flow_to_rgb(ff: FlowField, max_mag: float | None = None) -> np.ndarray:
    """Colour-wheel rendering: hue = direction, saturation = magnitude; undefined pixels black."""
    mag = ff.magnitude
    scale = max_mag if max_mag else max(float(mag.max()), 1e-6)
    ang = (np.arctan2(-ff.flow[..., 0], -ff.flow[..., 1]) / np.pi + 1.0) / 2.0
    h6 = ang * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    s = np.clip(mag / scale, 0, 1)
    v = np.ones_like(s)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(mag.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        rgb[sel] = np.stack([r[sel], g[sel], b[sel]], -1)
    rgb[~ff.defined] = 0.0
    return (np.round(rgb * 255) / 255).astype(np.float32)
