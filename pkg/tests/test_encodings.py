import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from pisr_lab import encodings as enc
from pisr_lab import tensor as T
from pisr_lab.gradcheck import grad_check
from pisr_lab.tensor import ShapeError, Tensor


def test_one_hot_semantic_map_sums_features():
    rng = np.random.default_rng(0)
    F = rng.standard_normal((4, 6))
    S = np.zeros((3, 6))
    S[1] = 1.0
    E = enc.semantic_encodings(Tensor(S), Tensor(F)).data
    np.testing.assert_allclose(E[1], F.sum(axis=1), atol=1e-12)
    assert not E[[0, 2]].any()


def test_uniform_semantic_map_gives_identical_rows():
    F = np.random.default_rng(1).standard_normal((4, 6))
    E = enc.semantic_encodings(Tensor(np.full((3, 6), 1 / 3)), Tensor(F)).data
    for row in E:
        np.testing.assert_allclose(row, F.sum(axis=1) / 3, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_encodings_match_summation_oracle(seed):
    rng = np.random.default_rng(seed)
    S, F = rng.random((3, 6)), rng.standard_normal((4, 6))
    np.testing.assert_allclose(enc.semantic_encodings(Tensor(S), Tensor(F)).data, oracles.encodings(S, F), rtol=0, atol=1e-12)


def test_encodings_shape_mismatch():
    with pytest.raises(ShapeError):
        enc.semantic_encodings(Tensor(np.zeros((3, 6))), Tensor(np.zeros((4, 5))))


def test_encoding_row_is_linear_in_map_row():
    rng = np.random.default_rng(2)
    S, F = rng.random((3, 6)), rng.standard_normal((4, 6))
    S2 = S.copy()
    S2[1] *= 2
    a = enc.semantic_encodings(Tensor(S), Tensor(F)).data
    b = enc.semantic_encodings(Tensor(S2), Tensor(F)).data
    np.testing.assert_array_equal(b[1], 2 * a[1])
    np.testing.assert_array_equal(b[[0, 2]], a[[0, 2]])


def test_single_peak_selected():
    M = np.zeros((5, 5))
    M[3, 1] = 1.0
    c = enc.select_centers(M, 1)
    np.testing.assert_array_equal(c.coords, [[3, 1]])


def test_plateau_uses_row_major_tie_break():
    c = enc.select_centers(np.ones((4, 4)), 2)
    np.testing.assert_array_equal(c.coords, [[0, 0], [0, 1]])


@pytest.mark.parametrize("seed", range(10))
def test_top_k_matches_enumeration(seed):
    M = np.random.default_rng(seed).random((8, 8))
    got = [tuple(rc) for rc in enc.select_centers(M, 3).coords]
    assert got == oracles.top_k_centers(M, 3)


@given(arrays(np.float64, (6, 7), elements=st.sampled_from([0.0, 0.25, 0.5, 1.0])), st.integers(0, 50))
def test_large_k_returns_all_local_maxima(M, K):
    got = [tuple(rc) for rc in enc.select_centers(M, K).coords]
    assert got == oracles.top_k_centers(M, K)
    if K >= len(oracles.local_maxima(M)):
        assert sorted(got) == sorted(oracles.local_maxima(M))


def test_zero_k_selects_nothing():
    assert len(enc.select_centers(np.random.default_rng(0).random((4, 4)), 0)) == 0


def test_things_mask_extremes():
    S = np.zeros((4, 6))
    S[0] = 1
    assert not enc.things_mask(S, (2, 3)).any()
    S = np.zeros((4, 6))
    S[3] = 1
    assert enc.things_mask(S, (2, 3)).all()


@pytest.mark.parametrize("seed", range(5))
def test_things_mask_matches_argmax_loop(seed):
    S = np.random.default_rng(seed).integers(0, 3, size=(4, 20)).astype(float)  # many ties
    np.testing.assert_array_equal(enc.things_mask(S, (2, 3))[0], oracles.argmax_things(S, (2, 3)))


def test_heatmap_is_one_where_regression_hits_center():
    h = w = 6
    O = np.zeros((2, h * w))
    O[:, 2 * w + 3] = [1.0, -2.0]  # pixel (2, 3) regresses to (3, 1)
    cands = enc.InstanceCandidates(np.array([[3, 1]]), np.array([1.0]))
    I = enc.instance_heatmaps(cands, Tensor(O), np.ones((1, h * w)), h, w, 1).data
    assert I[0, 2 * w + 3] == 1.0


def test_zero_mask_zeroes_heatmaps():
    O = np.random.default_rng(0).standard_normal((2, 36))
    cands = enc.InstanceCandidates(np.array([[1, 1], [4, 4]]), np.array([1.0, 0.5]))
    assert not enc.instance_heatmaps(cands, Tensor(O), np.zeros((1, 36)), 6, 6, 2).data.any()


@pytest.mark.parametrize("seed", range(5))
def test_heatmaps_match_direct_formula(seed):
    rng = np.random.default_rng(seed)
    O = rng.standard_normal((2, 36)) * 3
    mask = (rng.random(36) > 0.3).astype(float)
    cands = enc.select_centers(rng.random((6, 6)), 2)
    got = enc.instance_heatmaps(cands, Tensor(O), mask[None], 6, 6, 2).data
    want = oracles.heatmaps([tuple(c) for c in cands.coords], O, mask, 6, 6, 2)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@given(st.integers(0, 1000), st.integers(0, 6))
def test_heatmaps_in_unit_interval_and_padded(seed, K):
    rng = np.random.default_rng(seed)
    O = rng.standard_normal((2, 25)) * 20
    cands = enc.select_centers((rng.random((5, 5)) > 0.7).astype(float), K)
    I = enc.instance_heatmaps(cands, Tensor(O), np.ones((1, 25)), 5, 5, K).data
    assert I.shape == (K, 25)
    assert np.all((I >= 0) & (I <= 1))
    assert not I[len(cands):].any()


def test_concat_panoptic_semantic_first():
    a, b = Tensor(np.ones((4, 3))), Tensor(np.zeros((2, 3)))
    E = enc.concat_panoptic(a, b).data
    assert E.shape == (6, 3)
    np.testing.assert_array_equal(E[:4], 1)
    np.testing.assert_array_equal(E[4:], 0)


def _reweighter(seed=0, C=6):
    params = {}
    enc.init_reweighter(params, seed, C)
    return params


def test_reweighter_width():
    params = _reweighter(C=64)
    assert params["reweight.fc1.weight"].shape == (64, 16)
    assert _reweighter(C=6)["reweight.fc1.weight"].shape == (6, 8)


def test_saturated_gate_is_identity():
    params = _reweighter()
    params["reweight.fc2.bias"] = Tensor([[1000.0]])
    E = Tensor(np.random.default_rng(0).standard_normal((5, 6)))
    omega, E_tilde = enc.reweight(params, E)
    np.testing.assert_array_equal(omega.data, 1.0)
    assert E_tilde.data.tobytes() == E.data.tobytes()


def test_zero_row_zero_biases_gives_half():
    params = _reweighter()
    params["reweight.fc1.bias"] = Tensor(np.zeros((1, 8)))
    params["reweight.fc2.bias"] = Tensor(np.zeros((1, 1)))
    E = np.random.default_rng(0).standard_normal((3, 6))
    E[1] = 0
    omega, E_tilde = enc.reweight(params, Tensor(E))
    assert omega.data[1, 0] == 0.5
    assert not E_tilde.data[1].any()


@given(st.integers(0, 10_000))
def test_gate_strictly_inside_unit_interval(seed):
    E = np.random.default_rng(seed).standard_normal((4, 6))
    omega, E_tilde = enc.reweight(_reweighter(seed % 7), Tensor(E))
    assert np.all((omega.data > 0) & (omega.data < 1))
    np.testing.assert_array_equal(E_tilde.data, E * omega.data)


def test_reweight_gradcheck():
    params = _reweighter(3)
    names = ["reweight.fc1.weight", "reweight.fc1.bias", "reweight.fc2.weight", "reweight.fc2.bias"]
    rng = np.random.default_rng(4)
    w = Tensor(rng.standard_normal((5, 6)))

    def fn(E, *ps):
        omega, E_tilde = enc.reweight(dict(zip(names, ps)), E)
        return T.add(T.sum(T.mul(E_tilde, w)), T.sum(omega))

    rep = grad_check(fn, [rng.standard_normal((5, 6))] + [params[n].data for n in names])
    assert rep.passed, rep
