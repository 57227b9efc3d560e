import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segreward.geometry import iou
from segreward.matching import TooLarge, assign_max_iou, brute_force_match, match_objects
from segreward.structured_output import ObjectAnswer


def test_empty_side():
    m = match_objects([], [[0, 0, 1, 1]])
    assert m.pairs == () and m.unmatched_pred == (0,) and m.unmatched_gt == ()
    assert match_objects([], []).pairs == ()


def test_identity_pairing():
    boxes = [[0, 0, 10, 10], [20, 20, 30, 30], [40, 40, 50, 50]]
    m = match_objects(boxes, boxes)
    assert m.pairs == ((0, 0), (1, 1), (2, 2))
    assert m.total_iou == 3.0


def test_accepts_object_answers():
    a = ObjectAnswer((0, 0, 10, 10), (5, 5))
    assert match_objects([a], [a]).pairs == ((0, 0),)


def test_three_by_three_iou_matrix():
    ious = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.0, 0.0, 0.7]])
    # every permutation total, enumerated by hand
    totals = {p: sum(ious[i, j] for i, j in enumerate(p)) for p in itertools.permutations(range(3))}
    assert max(totals, key=totals.get) == (0, 1, 2)
    assert assign_max_iou(ious) == ((0, 0), (1, 1), (2, 2))
    assert sum(ious[i, j] for i, j in assign_max_iou(ious)) == pytest.approx(2.4, abs=1e-12)


def test_brute_force_examples():
    b = [[0, 0, 10, 10]]
    assert brute_force_match(b, b).pairs == ((0, 0),)
    same = [[0, 0, 10, 10], [0, 0, 10, 10]]
    assert brute_force_match(same, same).pairs == ((0, 0), (1, 1))
    assert match_objects(same, same).pairs == ((0, 0), (1, 1))
    with pytest.raises(TooLarge):
        brute_force_match([[0, 0, 1, 1]] * 9, [[0, 0, 1, 1]])


def test_ties_break_lexicographically():
    ious = np.full((2, 3), 0.5)
    assert assign_max_iou(ious) == ((0, 0), (1, 1))
    assert assign_max_iou(np.zeros((3, 2))) == ((0, 0), (1, 1))
    # the optimum may need to skip a row
    ious = np.array([[0.0, 0.0], [0.9, 0.0], [0.0, 0.8]])
    assert assign_max_iou(ious) == ((1, 0), (2, 1))


def test_random_four_by_five():
    rng = np.random.default_rng(7)
    c = rng.uniform(0, 60, size=(9, 2))
    s = rng.uniform(10, 40, size=(9, 2))
    boxes = np.hstack([c, c + s]).tolist()
    gt, pred = boxes[:4], boxes[4:]
    assert abs(match_objects(gt, pred).total_iou - brute_force_match(gt, pred).total_iou) <= 1e-12


box = st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(1, 30), st.integers(1, 30)).map(
    lambda t: [t[0], t[1], t[0] + t[2], t[1] + t[3]]
)


@given(st.lists(box, max_size=5), st.lists(box, max_size=5))
@settings(max_examples=300)
def test_matching_invariants(gt, pred):
    m = match_objects(gt, pred)
    assert len(m.pairs) == min(len(gt), len(pred))
    gi = [i for i, _ in m.pairs]
    pj = [j for _, j in m.pairs]
    assert len(set(gi)) == len(gi) and len(set(pj)) == len(pj)
    assert sorted(gi + list(m.unmatched_gt)) == list(range(len(gt)))
    assert sorted(pj + list(m.unmatched_pred)) == list(range(len(pred)))
    assert m.total_iou == pytest.approx(brute_force_match(gt, pred).total_iou, abs=1e-9)


@given(st.lists(box, min_size=1, max_size=5), st.lists(box, min_size=1, max_size=5), st.randoms())
@settings(max_examples=200)
def test_permutation_equivariance(gt, pred, rnd):
    perm = list(range(len(pred)))
    rnd.shuffle(perm)
    m1 = match_objects(gt, pred)
    m2 = match_objects(gt, [pred[p] for p in perm])
    assert m2.total_iou == pytest.approx(m1.total_iou, abs=1e-9)
    # mapping the permuted indices back gives an assignment of the same value
    back = [(i, perm[j]) for i, j in m2.pairs]
    assert sum(iou(gt[i], pred[j]) for i, j in back) == pytest.approx(m1.total_iou, abs=1e-9)
