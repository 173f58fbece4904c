import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwm.structures import (FlowField, check_constructive, discover_objects, embed_cached, extract_keypoints,
                            extract_keypoints_batch, extract_segment, flow_cosine, flow_field, flow_perturbation,
                            movability_map, perturbation_response, spelke_affinity)
from cwm.structures.flow import flow_to_rgb, refine_dense
from cwm.structures.segment import _draw_shift, patch_membership

from oracles import brute_cosine, exhaustive_argmin
from mocks import CopyMock, PerturbMock, RigidMock, TableMock, interaction_errors, texture


# -- keypoints ------------------------------------------------------------------

def test_zero_iters_is_empty():
    assert len(extract_keypoints(CopyMock(), texture(32, 0), texture(32, 1), 0)) == 0


def test_iters_beyond_grid_rejected():
    with pytest.raises(ValueError):
        extract_keypoints(CopyMock(), texture(32, 0), texture(32, 1), 17)
    with pytest.raises(ValueError):
        extract_keypoints(CopyMock(), texture(32, 0), texture(32, 1), 1, mode="best")


def test_greedy_unique_max_first():
    x2 = texture(32, 2, 0.0, 0.4)
    base = np.full(16, 0.1)
    base[5] = 0.3
    mock = TableMock(x2, lambda S: np.where(np.isin(np.arange(16), list(S)), 0.0, base))
    kp = extract_keypoints(mock, x2, x2, 1, mode="greedy_argmax")
    assert kp.locations == [(1, 1)]


def test_topk_picks_min_after_addition():
    x2 = texture(16, 3, 0.0, 0.3)
    base = np.array([0.9, 0.8, 0.7, 0.6])
    after = {0: 0.3, 1: 0.1, 2: 0.2, 3: 0.4}

    def errors(S):
        if not S:
            return base
        (s,) = S
        e = np.full(4, after[s] * 4 / 3)
        e[s] = 0.0
        return e

    mock = TableMock(x2, errors)
    kp = extract_keypoints(mock, x2, x2, 1, mode="topk_eval")
    assert kp.locations == [(0, 1)]
    assert kp.mse[0] == pytest.approx(0.1, rel=1e-5)
    assert extract_keypoints(mock, x2, x2, 1, mode="greedy_argmax").locations == [(0, 0)]


@pytest.mark.parametrize("seed", range(20))
def test_topk_all_equals_exhaustive(seed):
    errors = interaction_errors(seed, 4)
    x2 = texture(32, seed, 0.0, 0.3)
    kp = extract_keypoints(TableMock(x2, errors), x2, x2, 3, mode="topk_eval", k=16)
    chosen = set()
    for loc in kp.locations:
        want = exhaustive_argmin(errors, chosen, 16)
        assert loc == divmod(want, 4)
        chosen.add(want)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_topk_mse_non_increasing(seed):
    errors = interaction_errors(seed, 4)
    x2 = texture(32, seed, 0.0, 0.3)
    kp = extract_keypoints(TableMock(x2, errors), x2, x2, 6)
    seq = [kp.initial_mse] + kp.mse
    assert all(b <= a + 1e-9 for a, b in zip(seq, seq[1:]))
    assert len(set(kp.locations)) == len(kp.locations)


# -- perturbation flow -------------------------------------------------------------

X1 = texture(64, 10, 0.2, 0.7)
X2 = texture(64, 11, 0.2, 0.7)


def test_perturbation_static_copy_zero_flow():
    flow, ok, _ = flow_perturbation(CopyMock(64), X1, X1, (20, 30), rng=np.random.default_rng(0))
    assert ok and flow == (0, 0)


def test_perturbation_translating_mock():
    flow, ok, peak = flow_perturbation(PerturbMock(X1, X2, (2, 3)), X1, X2, (20, 30))
    assert ok and flow == (2, 3) and peak == pytest.approx(0.2, rel=1e-5)


def test_perturbation_deleting_mock_undefined():
    _, ok, peak = flow_perturbation(PerturbMock(X1, X2, gain=0.0), X1, X2, (20, 30))
    assert not ok and peak < 0.05


def test_linear_mock_response():
    mock = PerturbMock(X1, X2, (1, -2), gain=0.5)
    r = perturbation_response(mock, X1, X2, (30, 30))
    assert r.min() >= 0
    assert r[31, 28] == pytest.approx(0.5, abs=1e-5)
    half = perturbation_response(mock, X1, X2, (30, 30), delta=0.1)
    np.testing.assert_allclose(half, r, atol=1e-4)
    with pytest.raises(ValueError):
        perturbation_response(mock, X1, X2, (30, 30), delta=1e-4)


def test_flow_field_perturbation_translating_mock():
    ff = flow_field(PerturbMock(X1, X2, (2, 3)), X1, X2, method="perturbation")
    assert ff.defined.all()
    assert np.all(ff.flow[20:40, 20:40] == (2, 3))


# -- cosine flow -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_cosine_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = int(rng.integers(2, 7))
    e1 = rng.normal(size=(g, g, 8))
    e2 = rng.normal(size=(g, g, 8))
    np.testing.assert_array_equal(flow_cosine(e1, e2, 8).flow, brute_cosine(e1, e2, 8))


def test_cosine_identity_and_shift():
    e1 = np.random.default_rng(0).normal(size=(6, 6, 16))
    assert np.all(flow_cosine(e1, e1).flow == 0)
    e2 = np.roll(e1, 1, axis=1)
    f = flow_cosine(e1, e2, 8).flow
    assert np.all(f[:, 1:] == (0, 8))


def test_cosine_zero_norm_undefined():
    e1 = np.random.default_rng(0).normal(size=(3, 3, 4))
    e2 = e1.copy()
    e2[1, 1] = 0
    ff = flow_cosine(e1, e2)
    assert not ff.defined[1, 1] and ff.defined.sum() == 8
    with pytest.raises(ValueError):
        flow_cosine(e1, e1[:2])


def test_cosine_tie_goes_to_smallest_displacement():
    e1 = np.zeros((3, 3, 2))
    e1[..., 0] = 1.0
    ff = flow_cosine(e1, e1.copy())
    assert np.all(ff.flow == 0)


def test_refine_recovers_pixel_shift():
    rng = np.random.default_rng(0)
    d1 = rng.normal(size=(16, 16, 6))
    d2 = np.roll(d1, (2, -3), axis=(0, 1))
    coarse = FlowField(np.zeros((16, 16, 2)), np.ones((16, 16), bool))
    ff = refine_dense(d1, d2, coarse, 4)
    assert np.all(ff.flow[4:12, 4:12] == (2, -3))


def test_flow_field_static_copy_mock_zero():
    x = texture(32, 4)
    ff = flow_field(CopyMock(), x, x, refine=False)
    assert ff.defined.all() and np.all(ff.flow == 0)
    assert ff.flow.shape == (32, 32, 2)
    with pytest.raises(ValueError):
        flow_field(CopyMock(), x, x, method="magic")


def test_flow_nan_roundtrip_and_rgb():
    f = np.zeros((4, 4, 2), np.float32)
    f[0, 0] = np.nan
    ff = FlowField.from_nan(f)
    assert not ff.defined[0, 0] and np.isnan(ff.with_nan()[0, 0]).all()
    rgb = flow_to_rgb(ff)
    assert rgb[0, 0].tolist() == [0, 0, 0] and rgb[1, 1].tolist() == [1, 1, 1]


# -- segments ----------------------------------------------------------------------

def rigid(size=64, rows=slice(2, 4), cols=slice(3, 5)):
    g = size // 8
    obj = np.zeros((g, g), bool)
    obj[rows, cols] = True
    return RigidMock(texture(size, 99), obj)


def test_segment_copy_mock_static_is_empty():
    x = texture(32, 7)
    seg = extract_segment(CopyMock(), x, (12, 12), radius_frac=0.0)
    assert seg.empty and not seg.mask.any()


def test_segment_rigid_square():
    m = rigid()
    seg = extract_segment(m, m.x, (20, 30), np.random.default_rng(0))
    assert not seg.empty and seg.query_in_mask
    np.testing.assert_array_equal(seg.mask, m.mask)
    assert all(check_constructive(seg))
    assert len(seg.records) == 3
    # motion grows inside, stop grows outside
    assert len(seg.records[1]["motion"]) == 2 and len(seg.records[2]["stop"]) == 2


@pytest.mark.parametrize("seed", range(10))
def test_constructive_invariants_hold(seed):
    m = rigid()
    rng = np.random.default_rng(seed)
    seg = extract_segment(m, m.x, (int(rng.integers(16, 32)), int(rng.integers(24, 40))), rng)
    assert all(check_constructive(seg))
    for r in seg.records[1:]:
        assert all(m.obj[p] for p in r["motion"]) and not any(m.obj[p] for p in r["stop"])


def test_threshold_is_strict():
    mag = np.array([[0.49, 0.51]])
    assert ((mag > 0.5) == [[False, True]]).all()


def test_patch_membership():
    mask = np.zeros((16, 16), bool)
    mask[:8, :4] = True
    assert patch_membership(mask, 8).tolist() == [[0.5, 0.0], [0.0, 0.0]]


def test_affinity_rigid_mock():
    m = rigid()
    r = 0.2 * 64
    rng = np.random.default_rng(3)
    shifts = [_draw_shift(rng, r) for _ in range(4)]
    want = np.mean([8 * np.hypot(*np.sign(s)) for s in shifts])
    assert spelke_affinity(m, m.x, (20, 30), (28, 36), np.random.default_rng(3)) == pytest.approx(want)
    assert spelke_affinity(m, m.x, (20, 30), (50, 5), np.random.default_rng(3)) == 0.0


@pytest.mark.parametrize("j", [(20, 30), (31, 39), (32, 39), (5, 5), (16, 24), (15, 24)])
def test_affinity_consistent_with_first_iteration(j):
    m = rigid()
    seg = extract_segment(m, m.x, (20, 30), np.random.default_rng(5), iters=1)
    aff = spelke_affinity(m, m.x, (20, 30), j, np.random.default_rng(5))
    assert (aff > 0.5) == bool(seg.mask[j])


def test_movability_supported_on_object():
    m = rigid(32, slice(1, 3), slice(1, 3))
    a = movability_map(m, m.x, 16, np.random.default_rng(0))
    b = movability_map(m, m.x, 16, np.random.default_rng(0))
    w = a.distribution.weights
    assert not a.degenerate
    assert abs(w.sum() - 1) < 1e-9
    assert w[~m.mask].sum() == 0 and w[m.mask].min() > 0
    np.testing.assert_array_equal(w, b.distribution.weights)
    with pytest.raises(ValueError):
        movability_map(m, m.x, 0)


def test_movability_static_falls_back_to_uniform():
    x = texture(32, 1)
    mov = movability_map(CopyMock(), x, 2, radius_frac=0.0)
    assert mov.degenerate and np.allclose(mov.distribution.weights, 1 / 1024)


def test_discover_single_object():
    m = rigid(32, slice(1, 3), slice(1, 3))
    segs = discover_objects(m, m.x, 3, np.random.default_rng(0))
    assert len(segs) == 1
    np.testing.assert_array_equal(segs[0].mask, m.mask)
    assert len(discover_objects(m, m.x, 1, np.random.default_rng(1))) <= 1
    with pytest.raises(ValueError):
        discover_objects(m, m.x, 0)


def test_embed_cached_batches_and_reuses():
    mock = CopyMock()
    calls = []
    embed = mock.embed
    mock.embed = lambda frames: calls.append(len(frames)) or embed(frames)
    frames = [texture(32, s) for s in (0, 1, 0)]
    cache = {}
    out = embed_cached(mock, frames, cache)
    np.testing.assert_array_equal(out, embed(np.stack(frames)))
    assert calls == [2] and len(cache) == 2
    embed_cached(mock, frames[:2], cache)
    assert calls == [2]


def test_keypoints_batch_matches_single_pairs():
    from cwm.predictor import PredictorConfig, init_state
    cfg = PredictorConfig(image_size=32, encoder_dim=16, encoder_depth=1, encoder_heads=2, decoder_dim=8,
                          decoder_depth=1, decoder_heads=2)
    s = init_state(cfg, 0)
    rng = np.random.default_rng(0)
    for p in s.params.values():
        p.data += rng.normal(scale=0.1, size=p.shape).astype(np.float32)
    x1 = [texture(32, 10), texture(32, 11)]
    x2 = [texture(32, 12), texture(32, 13)]
    for mode in ("greedy_argmax", "topk_eval"):
        batch = extract_keypoints_batch(s, x1, x2, 4, mode)
        for b in range(2):
            single = extract_keypoints(s, x1[b], x2[b], 4, mode)
            assert batch[b].locations == single.locations
            np.testing.assert_allclose(batch[b].mse, single.mse, rtol=1e-5)
