import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from pisr_lab.fusion import PanopticLabelMap
from pisr_lab.metrics import (
    ORACLE_MAX_SEGMENTS,
    Segment,
    extract_segments,
    match_oracle,
    match_segments,
    mean_iou,
    panoptic_quality,
)

THINGS = (2, 3)


def _random_map(rng, h=6, w=6, n_inst=3):
    sem = rng.integers(0, 4, size=(h, w))
    inst = np.where(np.isin(sem, THINGS), rng.integers(1, n_inst + 1, size=(h, w)), 0)
    return PanopticLabelMap(sem, inst)


def _blocky_map(rng, h=8, w=8):
    """Coarse 2x2 blocks so that segments overlap substantially and matches exist."""
    coarse = _random_map(rng, h // 2, w // 2, n_inst=2)
    return PanopticLabelMap(np.kron(coarse.semantic, np.ones((2, 2), int)), np.kron(coarse.instance, np.ones((2, 2), int)))


def _perturb(rng, lab, p=0.15):
    sem, inst = lab.semantic.copy(), lab.instance.copy()
    flip = rng.random(sem.shape) < p
    sem[flip] = rng.integers(0, 4, size=flip.sum())
    inst = np.where(np.isin(sem, THINGS), np.maximum(inst, 1), 0)
    return PanopticLabelMap(sem, inst)


def test_perfect_prediction():
    lab = _random_map(np.random.default_rng(0))
    rep = panoptic_quality(lab, lab, THINGS, 4)
    for s in rep.per_class.values():
        assert s.pq == s.sq == s.rq == 1.0
    assert rep.pq == rep.sq == rep.rq == 1.0
    assert rep.miou == 1.0


def test_disjoint_segments_score_zero():
    sem_a = np.zeros((4, 4), int)
    sem_a[:2] = 2
    sem_b = np.zeros((4, 4), int)
    sem_b[2:] = 2
    a = PanopticLabelMap(sem_a, (sem_a == 2).astype(int))
    b = PanopticLabelMap(sem_b, (sem_b == 2).astype(int))
    assert panoptic_quality(a, b, THINGS).per_class[2].pq == 0.0


def _boundary_case(extra):
    """GT thing segment of 10 px; prediction covers 6 of them plus ``extra`` outside."""
    gt_sem = np.zeros((6, 6), int)
    gt_sem[0, :6] = 2
    gt_sem[1, :4] = 2
    pred_sem = np.zeros((6, 6), int)
    pred_sem[0, :6] = 2
    pred_sem[5, :extra] = 2
    gt = PanopticLabelMap(gt_sem, (gt_sem == 2).astype(int))
    pred = PanopticLabelMap(pred_sem, (pred_sem == 2).astype(int))
    return panoptic_quality(pred, gt, THINGS).per_class[2]


def test_iou_exactly_half_is_unmatched():
    s = _boundary_case(2)  # 6 / (10 + 8 - 6) = 6/12
    assert (s.tp, s.fp, s.fn) == (0, 1, 1)
    assert s.pq == 0.0


def test_iou_just_above_half_is_matched():
    s = _boundary_case(1)  # 6/11
    assert (s.tp, s.fp, s.fn) == (1, 0, 0)
    assert s.pq == pytest.approx(6 / 11, abs=1e-15)


def test_oracle_trivial_cases():
    m = np.ones((2, 2), bool)
    assert match_oracle([Segment(2, 1, m)], [Segment(2, 1, m)]) == [(0, 0, 1.0)]
    assert match_oracle([], []) == []
    with pytest.raises(ValueError):
        match_oracle([Segment(0, 0, m)] * (ORACLE_MAX_SEGMENTS + 1), [])


@pytest.mark.parametrize("seed", range(30))
def test_greedy_matching_equals_exhaustive(seed):
    rng = np.random.default_rng(seed)
    gt = _blocky_map(rng)
    pred = _perturb(rng, gt)
    ps, gs = extract_segments(pred, THINGS), extract_segments(gt, THINGS)
    if max(len(ps), len(gs)) > ORACLE_MAX_SEGMENTS:
        ps, gs = ps[:ORACLE_MAX_SEGMENTS], gs[:ORACLE_MAX_SEGMENTS]
    greedy = sorted(match_segments(ps, gs))
    assert greedy == match_oracle(ps, gs)
    # uniqueness of matches above the threshold
    assert len({i for i, _, _ in greedy}) == len(greedy) == len({j for _, j, _ in greedy})


@pytest.mark.parametrize("seed", range(20))
def test_pq_matches_enumeration_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = _blocky_map(rng)
    pred = _perturb(rng, gt)
    rep = panoptic_quality(pred, gt, THINGS)
    want = oracles.pq_by_enumeration(pred.semantic, pred.instance, gt.semantic, gt.instance, THINGS)
    assert set(rep.per_class) == set(want)
    for c, w in want.items():
        s = rep.per_class[c]
        assert (s.tp, s.fp, s.fn) == (w["tp"], w["fp"], w["fn"])
        assert s.iou_sum == pytest.approx(w["iou_sum"], abs=1e-12)
        assert s.pq == pytest.approx(w["pq"], abs=1e-12)


@given(st.integers(0, 10_000))
def test_pq_invariant_to_instance_relabeling(seed):
    rng = np.random.default_rng(seed)
    gt = _blocky_map(rng)
    pred = _perturb(rng, gt)
    perm = np.concatenate([[0], rng.permutation(np.arange(1, 10))])
    relabeled = PanopticLabelMap(pred.semantic, perm[pred.instance])
    a, b = panoptic_quality(pred, gt, THINGS), panoptic_quality(relabeled, gt, THINGS)
    assert a.pq == b.pq and a.sq == b.sq and a.rq == b.rq


@given(st.integers(0, 10_000))
def test_scores_bounded_and_factorize(seed):
    rng = np.random.default_rng(seed)
    gt = _blocky_map(rng)
    rep = panoptic_quality(_perturb(rng, gt, 0.4), gt, THINGS)
    for s in rep.per_class.values():
        assert 0 <= s.sq <= 1 and 0 <= s.rq <= 1 and 0 <= s.pq <= 1
        if s.tp > 0:
            assert s.pq == pytest.approx(s.sq * s.rq, abs=1e-12)


def test_absent_classes_excluded_from_means():
    sem = np.zeros((4, 4), int)
    lab = PanopticLabelMap(sem, np.zeros_like(sem))
    rep = panoptic_quality(lab, lab, THINGS, 4)
    assert set(rep.per_class) == {0}
    assert rep.pq == 1.0 and rep.pq_th == 0.0
    assert rep.miou == 1.0


def test_miou_examples():
    a = np.zeros((3, 3), int)
    assert mean_iou(a, a, 4)[1] == 1.0
    assert mean_iou(a, np.ones((3, 3), int), 4)[1] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_miou_matches_confusion_oracle(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.integers(0, 4, (6, 6)), rng.integers(0, 4, (6, 6))
    per, m = mean_iou(p, g, 4)
    want_per, want_m = oracles.confusion_iou(p, g, 4)
    np.testing.assert_allclose(per, want_per, rtol=0, atol=1e-15)
    assert m == pytest.approx(want_m, abs=1e-15)


def test_shape_mismatch():
    a = PanopticLabelMap(np.zeros((3, 3), int), np.zeros((3, 3), int))
    b = PanopticLabelMap(np.zeros((3, 4), int), np.zeros((3, 4), int))
    with pytest.raises(ValueError):
        panoptic_quality(a, b, THINGS)


def test_csv_layout():
    lab = _random_map(np.random.default_rng(3))
    text = panoptic_quality(lab, lab, THINGS, 4).to_csv().splitlines()
    assert text[0] == "class,tp,fp,fn,iou_sum,pq,sq,rq"
    assert [r.split(",")[0] for r in text[-3:]] == ["all", "things", "stuff"]
    assert text[1].split(",")[5] == "1.000000"
