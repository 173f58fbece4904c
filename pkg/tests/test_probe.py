import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwm.predictor import PredictorConfig, init_state
from cwm.probe import (BLOCKS, FEATURE_VERSION, ROW_NAMES, collect_features, epe, evaluate, extract_features, iou,
                       pool_by_segment, run_probe, train_probe, write_results)
from cwm.spriteworld import WorldConfig, generate

SMALL = PredictorConfig(encoder_dim=16, encoder_depth=1, encoder_heads=2, decoder_dim=8, decoder_depth=1,
                        decoder_heads=2)


def small_state(seed=0):
    s = init_state(SMALL, seed)
    rng = np.random.default_rng(seed + 1)
    for p in s.params.values():
        p.data += rng.normal(scale=0.05, size=p.shape).astype(np.float32)
    return s


# -- metrics -----------------------------------------------------------------

def test_pool_example():
    F = np.array([[[1.0], [3.0]], [[5.0], [7.0]]])
    v, f = pool_by_segment(F, [np.array([[1, 0], [0, 1]], bool)])
    assert v[0, 0] == 4.0 and f[0] == 1.0


def test_pool_single_cell_constant_and_empty():
    F = np.random.default_rng(0).normal(size=(3, 3, 4))
    m = np.zeros((3, 3), bool)
    m[2, 1] = True
    v, f = pool_by_segment(F, [m, np.zeros((3, 3), bool)])
    np.testing.assert_array_equal(v[0], F[2, 1])
    assert v[1].tolist() == [0.0] * 4 and f.tolist() == [1.0, 0.0]
    C = np.broadcast_to(np.arange(4.0), (3, 3, 4))
    np.testing.assert_allclose(pool_by_segment(C, [m | np.eye(3, dtype=bool)])[0][0], np.arange(4.0))


def test_pool_majority_vote_pixel_masks():
    F = np.arange(4.0).reshape(2, 2, 1)
    m = np.zeros((16, 16), bool)
    m[:8, :8] = True
    m[8:, 8:13] = True  # 40 of 64 pixels: majority
    m[:8, 8:12] = True  # exactly half: not a majority
    v, _ = pool_by_segment(F, [m])
    assert v[0, 0] == 1.5
    with pytest.raises(ValueError):
        pool_by_segment(F, [np.zeros((15, 16), bool)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pool_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(4, 4, 3))
    m = rng.random((4, 4)) < 0.5
    perm = rng.permutation(16)
    Fp = F.reshape(16, 3)[perm].reshape(4, 4, 3)
    mp = m.reshape(16)[perm].reshape(4, 4)
    np.testing.assert_allclose(pool_by_segment(F, [m])[0], pool_by_segment(Fp, [mp])[0], atol=1e-12)


def test_epe_examples():
    gt = np.zeros((8, 8, 2))
    gt[..., 1] = 4.0
    assert epe(np.zeros((8, 8, 2)), gt) == 4.0
    assert epe(gt, gt) == 0.0
    gt[:4] = np.nan
    assert epe(np.zeros((8, 8, 2)), gt, np.zeros((8, 8), bool)) is None
    assert epe(np.zeros((8, 8, 2)), gt) == 4.0


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    b = np.zeros((4, 4), bool)
    b[1:3] = True
    assert iou(a, b) == pytest.approx(1 / 3)


# -- logistic regression -------------------------------------------------------

def test_separable_2d_train_accuracy_one():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 2))
    score = X[:, 0] + 0.5 * X[:, 1] - 0.1
    # separable with a margin: drop points within 0.3 of the boundary
    X, y = X[np.abs(score) > 0.3], score[np.abs(score) > 0.3] > 0
    m = train_probe(X, y)
    assert evaluate(m, X, y) == 1.0


def test_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(400, 20))
    y = np.arange(400) % 2 == 0
    rng.shuffle(y)
    m = train_probe(X, y)
    assert abs(np.mean(list(m.cv.values())) - 0.5) <= 0.05


def test_permutation_null_not_significant():
    """Test accuracy on shuffled labels sits inside the permutation null's central 99%."""
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 10))
    y = rng.permutation(np.arange(300) % 2 == 0)
    m = train_probe(X[:200], y[:200], l2_grid=(1.0,))
    acc = evaluate(m, X[200:], y[200:])
    pred = m.predict(X[200:])
    null = [float((pred == rng.permutation(y[200:])).mean()) for _ in range(2000)]
    p = np.mean(np.array(null) >= acc)
    assert p > 0.01


def test_cv_selects_larger_l2_on_ties_and_is_deterministic():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(100, 2))
    y = X[:, 0] > 0
    a = train_probe(X, y, l2_grid=(1e-3, 1e-2))
    b = train_probe(X, y, l2_grid=(1e-3, 1e-2))
    assert a.cv == b.cv and np.array_equal(a.weight, b.weight)
    if a.cv[1e-3] == a.cv[1e-2]:
        assert a.l2 == 1e-2


def test_svd_path_matches_direct():
    from cwm.probe import _fit
    rng = np.random.default_rng(4)
    X = rng.normal(size=(30, 40))
    y = rng.random(30) < 0.5
    w1, b1, _, s1 = _fit(X, y, 0.1, 300, 1e-12)
    # pad samples with zero rows of weight zero is not possible; compare against explicit primal descent
    n = len(y)
    L = 0.25 * (np.linalg.norm(X, 2) ** 2 / n + 1.0) + 0.1
    theta = np.zeros(41)
    prev = theta.copy()
    for k in range(1, 301):
        look = theta + (k - 1) / (k + 2) * (theta - prev)
        z = X @ look[:-1] + look[-1]
        p = 1 / (1 + np.exp(-z))
        g = np.append(X.T @ (p - y) / n + 0.1 * look[:-1], np.mean(p - y))
        prev, theta = theta, look - g / L
    np.testing.assert_allclose(w1, theta[:-1], atol=1e-8)
    assert b1 == pytest.approx(theta[-1], abs=1e-8)


def test_probe_rejects_single_class():
    with pytest.raises(ValueError):
        train_probe(np.zeros((4, 2)), np.ones(4, bool))
    with pytest.raises(ValueError):
        train_probe(np.zeros((4, 2)), np.array([0, 1, 0, 1], bool), l2_grid=())


# -- features ------------------------------------------------------------------

W = WorldConfig()


def test_feature_shapes_and_determinism():
    s = small_state()
    ep = generate(W, 3)
    full = extract_features(s, ep)
    D, P = 16, 8
    assert full.version == FEATURE_VERSION
    assert full.blocks["feat"].size == 4 * D
    assert full.blocks["keypoints"].size == 3 * 5 * (D + 1)
    assert full.blocks["flow"].size == 3 * 5 * P * P * 2
    assert full.blocks["segments"].size == 3 * (4 * D + 1)
    again = extract_features(s, ep)
    for k in BLOCKS:
        np.testing.assert_array_equal(full.blocks[k], again.blocks[k])
    feat = extract_features(s, ep, flags=("feat",), compact=False)
    assert feat.dim == 4 * 64 * D
    dims = [extract_features(s, ep, flags=BLOCKS[:k]).dim for k in range(1, 5)]
    assert dims == sorted(set(dims))
    with pytest.raises(ValueError):
        extract_features(s, ep, flags=("flow",))


def test_parallel_collection_matches_serial():
    s = small_state()
    a = collect_features(s, W, [5, 2], 1, flags=("feat", "keypoints"))
    b = collect_features(s, W, [2, 5], 2, flags=("feat", "keypoints"))
    for i in (2, 5):
        np.testing.assert_array_equal(a[i].vector(("feat", "keypoints")), b[i].vector(("feat", "keypoints")))


def test_run_probe_ablation_table_and_outputs(tmp_path):
    s = small_state()
    res = run_probe(s, W, "ocd", n_train=20, n_test=10, ablate=True, workers=1)
    assert [r["row"] for r in res["ablation"]] == list(ROW_NAMES)
    dims = [r["dim"] for r in res["ablation"]]
    assert dims == sorted(dims) and len(set(dims)) == 4
    assert 0.0 <= res["accuracy"] <= 1.0
    path = write_results(res, tmp_path, "abc")
    doc = json.loads(path.read_text())
    assert doc["config_hash"] == "abc" and len(doc["ablation"]) == 4
    rows = list(csv.reader(open(tmp_path / "predictions.csv")))
    assert rows[0][:2] == ["episode", "label"] and len(rows) == 11
