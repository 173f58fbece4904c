"""Linear probes on frozen predictor features, plus the flow / mask metrics.

Feature layout (version ``cwm-feat-1``), each block flattened and
concatenated in this order:

  feat       encoder embeddings of the 4 observed frames; (4, D) when
             ``compact`` (grid mean), else (4, grid*grid*D)
  keypoints  for each consecutive observed pair, the frame-2 embedding at
             each of ``n_keypoints`` keypoints plus a presence flag
  flow       the ``P x P x 2`` cosine-flow patch at each of those keypoints
  segments   for each of up to 3 objects discovered in the first frame,
             the segment-pooled embedding of each observed frame plus a
             presence flag
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .counterfactual import ModelPredictor, as_predictor
from .numkernel import Tensor
from .spriteworld import Episode, WorldConfig, generate, make_balanced_split, mix64
from .structures import discover_objects, embed_cached, extract_keypoints_batch, flow_field

log = logging.getLogger(__name__)

FEATURE_VERSION = "cwm-feat-1"
BLOCKS = ("feat", "keypoints", "flow", "segments")
ABLATION_ROWS = (("feat",), ("feat", "keypoints"), ("feat", "keypoints", "flow"),
                 ("feat", "keypoints", "flow", "segments"))
ROW_NAMES = ("feat", "+keypt", "+flow", "+segments")
L2_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
N_OBSERVED = 4


# -- metrics -----------------------------------------------------------------

def epe(pred_flow, gt_flow, region: np.ndarray | None = None) -> float | None:
    """Mean endpoint error over pixels defined in both fields (and inside ``region``).

    Fields are ``(H, W, 2)`` arrays with NaN marking undefined pixels, or
    objects with ``with_nan()``.  ``None`` when no pixel qualifies.
    """
    p = pred_flow.with_nan() if hasattr(pred_flow, "with_nan") else np.asarray(pred_flow, np.float64)
    g = gt_flow.with_nan() if hasattr(gt_flow, "with_nan") else np.asarray(gt_flow, np.float64)
    if p.shape != g.shape:
        raise ValueError(f"flow shapes differ: {p.shape} vs {g.shape}")
    ok = ~(np.isnan(p).any(-1) | np.isnan(g).any(-1))
    if region is not None:
        ok &= np.asarray(region, bool)
    if not ok.any():
        return None
    d = p[ok].astype(np.float64) - g[ok]
    return float(np.sqrt((d ** 2).sum(-1)).mean())


def iou(mask, gt_mask) -> float:
    """Intersection over union; two empty masks count as identical (1.0)."""
    a = np.asarray(mask, bool)
    b = np.asarray(gt_mask, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# -- features ------------------------------------------------------------------

def pool_by_segment(F: np.ndarray, masks) -> tuple[np.ndarray, np.ndarray]:
    """Mean feature under each mask: ``(n, D)`` vectors and ``(n,)`` presence flags.

    Pixel masks are reduced to the feature grid by majority vote (more than
    half the cell's pixels).  Empty masks give a zero vector with flag 0.
    """
    F = np.asarray(F, np.float64)
    gh, gw, D = F.shape
    vecs, flags = [], []
    for m in masks:
        m = np.asarray(m, bool)
        if m.shape != (gh, gw):
            if m.shape[0] % gh or m.shape[1] % gw:
                raise ValueError(f"mask {m.shape} does not tile the {gh}x{gw} grid")
            ph, pw = m.shape[0] // gh, m.shape[1] // gw
            m = m.reshape(gh, ph, gw, pw).mean(axis=(1, 3)) > 0.5
        w = m.astype(np.float64)
        s = w.sum()
        if s == 0:
            vecs.append(np.zeros(D))
            flags.append(0.0)
        else:
            vecs.append((w[..., None] * F).sum(axis=(0, 1)) / s)
            flags.append(1.0)
    return np.array(vecs).reshape(len(vecs), D), np.array(flags)


@dataclass
class FeatureBundle:
    blocks: dict  # block name -> flat float32 vector
    version: str = FEATURE_VERSION
    meta: dict = field(default_factory=dict)

    def vector(self, flags=BLOCKS) -> np.ndarray:
        missing = [f for f in flags if f not in self.blocks]
        if missing:
            raise KeyError(f"bundle lacks blocks {missing}")
        return np.concatenate([self.blocks[f] for f in BLOCKS if f in flags])

    @property
    def dim(self) -> int:
        return int(sum(v.size for v in self.blocks.values()))


def extract_features(model, episode: Episode, flags=BLOCKS, compact: bool = True, n_keypoints: int = 5,
                     keypoint_mode: str = "greedy_argmax", max_objects: int = 3, seed: int = 0) -> FeatureBundle:
    """Frozen-feature bundle for the first 4 observed frames of ``episode``."""
    flags = tuple(flags)
    unknown = set(flags) - set(BLOCKS)
    if unknown or "feat" not in flags:
        raise ValueError(f"flags must include 'feat' and come from {BLOCKS}")
    pred = as_predictor(model)
    if episode.observed < N_OBSERVED:
        raise ValueError(f"need {N_OBSERVED} observed frames, episode has {episode.observed}")
    frames = episode.frames[:N_OBSERVED].astype(np.float32)
    P = pred.patch_size
    cache: dict = {}
    emb = embed_cached(pred, frames, cache)  # (4, g, g, D)
    D = emb.shape[-1]
    blocks = {}
    blocks["feat"] = (emb.mean(axis=(1, 2)) if compact else emb).reshape(-1)
    rng = np.random.default_rng(mix64(seed, episode.index))
    meta: dict = {"index": episode.index}
    if "keypoints" in flags or "flow" in flags:
        kfeat, kflow = [], []
        kp_all = extract_keypoints_batch(pred, frames[:-1], frames[1:], n_keypoints, keypoint_mode)
        for t, kps in enumerate(kp_all):
            ff = flow_field(pred, frames[t], frames[t + 1], "cosine", refine=False, cache=cache) \
                if "flow" in flags else None
            for s in range(n_keypoints):
                if s < len(kps):
                    r, c = kps.locations[s]
                    kfeat.append(np.append(emb[t + 1, r, c], 1.0))
                    if ff is not None:
                        kflow.append(ff.flow[r * P:(r + 1) * P, c * P:(c + 1) * P].reshape(-1))
                else:
                    kfeat.append(np.zeros(D + 1))
                    kflow.append(np.zeros(P * P * 2))
        if "keypoints" in flags:
            blocks["keypoints"] = np.concatenate(kfeat)
        if "flow" in flags:
            blocks["flow"] = np.concatenate(kflow)
    if "segments" in flags:
        segs = discover_objects(pred, frames[0], max_objects, rng)
        masks = [s.mask for s in segs] + [np.zeros(frames.shape[1:3], bool)] * (max_objects - len(segs))
        parts = []
        for m in masks:
            for t in range(N_OBSERVED):
                v, f = pool_by_segment(emb[t], [m])
                parts.append(v[0])
            parts.append(f)
        blocks["segments"] = np.concatenate(parts)
        meta["segments"] = len(segs)
    return FeatureBundle({k: np.asarray(v, np.float32) for k, v in blocks.items()}, meta=meta)


# -- logistic regression ---------------------------------------------------------

@dataclass
class ProbeModel:
    weight: np.ndarray
    bias: float
    l2: float
    mean: np.ndarray
    scale: np.ndarray
    converged: bool = True
    steps: int = 0
    cv: dict = field(default_factory=dict)

    @property
    def warning(self) -> bool:
        return not self.converged

    def decision(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, np.float64) - self.mean) / self.scale
        return Z @ self.weight + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision(X)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X) >= 0.5


def _standardize(X: np.ndarray):
    mu = X.mean(0)
    sd = X.std(0)
    sd = np.where(sd > 1e-8, sd, 1.0)
    return mu, sd


def _fit(X: np.ndarray, y: np.ndarray, l2: float, max_steps: int, tol: float, init=None, svd=None):
    """Accelerated full-batch gradient descent on the mean logistic loss + ``l2/2 |w|^2``.

    Iterates stay in the row space of ``X``, so the problem is solved in the
    coordinates of a thin SVD (identical trajectory, ``n x n`` cost when
    features outnumber samples).  ``init = (w, b)`` warm-starts from a point
    whose ``w`` lies in that row space.  Returns ``(w, b, converged, steps)``.
    """
    n, d = X.shape
    if d > n:
        U, S, Vt = svd if svd is not None else np.linalg.svd(X, full_matrices=False)
        A = U * S
    else:
        A, Vt = X, None
    L = 0.25 * (np.linalg.norm(A, 2) ** 2 / n + 1.0) + l2
    lr = 1.0 / L
    At = Tensor(A)
    yt = np.asarray(y, np.float64)
    theta = np.zeros(A.shape[1] + 1)
    if init is not None:
        w0, b0 = init
        theta[:-1] = w0 if Vt is None else Vt @ w0
        theta[-1] = b0
    prev = theta.copy()
    converged = False
    step = 0
    for step in range(1, max_steps + 1):
        look = theta + (step - 1) / (step + 2) * (theta - prev)
        w = Tensor(look[:-1].copy(), requires_grad=True)
        b = Tensor(look[-1:].copy(), requires_grad=True)
        z = nk.add(nk.matmul(At, nk.reshape(w, (-1, 1))), b)
        p = nk.sigmoid(nk.reshape(z, (-1,)))
        eps = 1e-12
        ll = nk.add(nk.mul(Tensor(yt), nk.log(nk.add(p, eps))),
                    nk.mul(Tensor(1.0 - yt), nk.log(nk.add(nk.mul(p, -1.0), 1.0 + eps))))
        loss = nk.add(nk.mul(nk.mean(ll), -1.0), nk.mul(nk.sum_(nk.mul(w, w)), 0.5 * l2))
        nk.backward(loss)
        g = np.append(w.grad, b.grad)
        if np.linalg.norm(g) < tol:
            theta = look
            converged = True
            break
        prev, theta = theta, look - lr * g
    w = theta[:-1] if Vt is None else Vt.T @ theta[:-1]
    return w, float(theta[-1]), converged, step


def _folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Stratified fold id per sample."""
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), int)
    for cls in (False, True):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = np.arange(len(idx)) % k
    return fold


def train_probe(X, y, l2_grid=L2_GRID, folds: int = 5, seed: int = 0, max_steps: int = 10_000,
                tol: float = 1e-6) -> ProbeModel:
    """Pick the L2 strength by stratified k-fold CV accuracy, then refit on everything.

    Within a fold the penalties are visited strongest first, each fit
    warm-started from the previous solution.  Ties in CV accuracy go to the
    stronger penalty.
    """
    X = np.asarray(X, np.float64)
    y = np.asarray(y, bool)
    if len(l2_grid) == 0:
        raise ValueError("l2_grid is empty")
    if y.all() or not y.any():
        raise ValueError("both classes are needed")
    fold = _folds(y, folds, seed)
    path = sorted((float(v) for v in l2_grid), reverse=True)
    acc: dict = {l2: [] for l2 in path}
    for f in range(folds):
        tr, va = fold != f, fold == f
        mu, sd = _standardize(X[tr])
        Z = (X[tr] - mu) / sd
        svd = np.linalg.svd(Z, full_matrices=False) if Z.shape[1] > Z.shape[0] else None
        init = None
        for l2 in path:
            w, b, _, _ = _fit(Z, y[tr], l2, max_steps, tol, init, svd)
            init = (w, b)
            hit = (((X[va] - mu) / sd @ w + b) >= 0) == y[va]
            acc[l2].append(float(hit.mean()))
    cv = {l2: float(np.mean(acc[l2])) for l2 in sorted(path)}
    best = max(sorted(cv, reverse=True), key=lambda k: cv[k])
    mu, sd = _standardize(X)
    Z = (X - mu) / sd
    svd = np.linalg.svd(Z, full_matrices=False) if Z.shape[1] > Z.shape[0] else None
    init = None
    for l2 in path[:path.index(best) + 1]:
        w, b, conv, steps = _fit(Z, y, l2, max_steps, tol, init, svd)
        init = (w, b)
    if not conv:
        log.warning("probe refit stopped at %d steps without reaching grad-norm %.0e", steps, tol)
    return ProbeModel(w, b, best, mu, sd, conv, steps, cv)


def evaluate(model: ProbeModel, X, y) -> float:
    return float((model.predict(X) == np.asarray(y, bool)).mean())


# -- end-to-end protocol ---------------------------------------------------------

_WORKER: dict = {}


def _init_worker(state_tensors, config_dict, world_dict, opts):
    from .predictor import PredictorConfig
    from .predictor.model import state_from_tensors
    cfg = PredictorConfig.from_dict(config_dict)
    _WORKER["pred"] = ModelPredictor(state_from_tensors(cfg, state_tensors))
    _WORKER["world"] = WorldConfig.from_dict(world_dict)
    _WORKER["opts"] = opts


def _features_for(index: int):
    ep = generate(_WORKER["world"], index)
    b = extract_features(_WORKER["pred"], ep, **_WORKER["opts"])
    return index, b.blocks


def collect_features(state, world: WorldConfig, indices, workers: int = 1, **opts) -> dict[int, FeatureBundle]:
    """Bundles for many episodes; ``workers > 1`` fans out over processes (results are order-independent)."""
    indices = sorted(set(int(i) for i in indices))
    out: dict[int, FeatureBundle] = {}
    if workers <= 1:
        pred = as_predictor(state)
        for i in indices:
            out[i] = extract_features(pred, generate(world, i), **opts)
        return out
    init = (dict(state.tensors()), state.config.to_dict(), world.to_dict(), opts)
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=init) as ex:
        for i, blocks in ex.map(_features_for, indices, chunksize=8):
            out[i] = FeatureBundle(blocks, meta={"index": i})
    return out


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CWM_THREADS", "1")))
    except ValueError:
        return 1


def run_probe(state, world: WorldConfig, task: str, n_train: int = 800, n_test: int = 200, ablate: bool = False,
              seed: int = 0, workers: int | None = None, features: dict | None = None, **feature_opts) -> dict:
    """Balanced split, features, CV-selected probe, test accuracy; optionally the four ablation rows."""
    t0 = time.time()
    train_idx, test_idx = make_balanced_split(world, n_train, n_test, task)
    rows = ABLATION_ROWS if ablate else (ABLATION_ROWS[0],)
    needed = tuple(sorted(set().union(*rows), key=BLOCKS.index))
    feats = features if features is not None else {}
    todo = [i for i in train_idx + test_idx if i not in feats]
    if todo:
        feats.update(collect_features(state, world, todo, workers or worker_count(), flags=needed,
                                      seed=seed, **feature_opts))
    labels = {i: bool(generate(world, i).label(task)) for i in train_idx + test_idx}
    y_tr = np.array([labels[i] for i in train_idx])
    y_te = np.array([labels[i] for i in test_idx])
    table, preds = [], {}
    for name, row in zip(ROW_NAMES, rows):
        X_tr = np.stack([feats[i].vector(row) for i in train_idx])
        X_te = np.stack([feats[i].vector(row) for i in test_idx])
        m = train_probe(X_tr, y_tr, seed=seed)
        acc = evaluate(m, X_te, y_te)
        table.append({"row": name, "blocks": list(row), "dim": int(X_tr.shape[1]), "accuracy": acc,
                      "l2": m.l2, "cv": {str(k): v for k, v in m.cv.items()}, "converged": m.converged})
        preds[name] = m.predict_proba(X_te)
        log.info("%s %s: accuracy %.3f (l2 %g, dim %d)", task, name, acc, m.l2, X_tr.shape[1])
    return {"task": task, "accuracy": table[0]["accuracy"], "accuracy_full": table[-1]["accuracy"],
            "ablation": table, "n_train": len(train_idx), "n_test": len(test_idx), "seed": seed,
            "test_indices": test_idx, "test_labels": y_te.tolist(),
            "predictions": {k: v.tolist() for k, v in preds.items()}, "seconds": time.time() - t0}


def write_results(result: dict, out_dir, config_hash: str, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {k: v for k, v in result.items() if k not in ("predictions", "test_indices", "test_labels", "seconds")}
    doc.update({"config_hash": config_hash, "feature_version": FEATURE_VERSION})
    doc.update(extra or {})
    (out / "results.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        names = list(result["predictions"])
        w.writerow(["episode", "label"] + [f"p_{n}" for n in names])
        for k, (i, lab) in enumerate(zip(result["test_indices"], result["test_labels"])):
            w.writerow([i, int(lab)] + [f"{result['predictions'][n][k]:.6f}" for n in names])
    return out / "results.json"
