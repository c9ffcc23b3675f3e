from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mdcdet.errors import CapacityError, InvalidBoxError
from mdcdet.matching import (
    Assignment,
    LossDiagnostics,
    LossWeights,
    box_loss,
    detr_loss,
    hungarian_match,
    match_cost,
    pairwise_giou,
    solve_assignment,
    total_loss,
)
from mdcdet.tensor import Tensor, gradient_check


def random_instance(rng, n_gt, P, C=4):
    probs = rng.dirichlet(np.ones(C + 1), size=P)
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (P, 2)), rng.uniform(0.05, 0.4, (P, 2))])
    classes = rng.integers(0, C, n_gt).tolist()
    gt = np.column_stack([rng.uniform(0.2, 0.8, (n_gt, 2)), rng.uniform(0.05, 0.4, (n_gt, 2))])
    return probs, boxes, classes, gt


def brute_force_cost(cost: np.ndarray) -> float:
    n, m = cost.shape
    return min(sum(cost[i, c] for i, c in enumerate(cols)) for cols in itertools.permutations(range(m), n))


def assignment_cost(cost, asg: Assignment) -> float:
    # summed in ground-truth order, the same order the brute force uses
    return sum(cost[g, p] for g, p in sorted(asg.proposal_for().items()))


# solver -----------------------------------------------------------------------


def test_single_pair_is_forced(rng):
    probs, boxes, classes, gt = random_instance(rng, 1, 1)
    assert hungarian_match(probs, boxes, classes, gt).pairs == ((0, 0),)


def test_no_ground_truth(rng):
    probs, boxes, _, _ = random_instance(rng, 0, 4)
    assert hungarian_match(probs, boxes, [], np.zeros((0, 4))).pairs == ()


def test_capacity_error(rng):
    probs, boxes, classes, gt = random_instance(rng, 3, 2)
    with pytest.raises(CapacityError):
        hungarian_match(probs, boxes, classes, gt)


def test_matches_brute_force(rng):
    for _ in range(300):
        n = int(rng.integers(1, 6))
        P = int(rng.integers(n, 9))
        probs, boxes, classes, gt = random_instance(rng, n, P)
        cost = match_cost(probs, boxes, classes, gt, LossWeights())
        asg = hungarian_match(probs, boxes, classes, gt)
        assert assignment_cost(cost, asg) == brute_force_cost(cost)


def test_solver_on_integer_costs_with_ties(rng):
    for _ in range(200):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(n, 7))
        cost = rng.integers(0, 3, (n, m)).astype(float)
        cols = solve_assignment(cost)
        assert len(set(cols)) == n
        assert sum(cost[i, c] for i, c in enumerate(cols)) == brute_force_cost(cost)


def test_ties_prefer_lowest_proposal():
    assert solve_assignment(np.zeros((1, 5))) == [0]
    assert solve_assignment(np.zeros((2, 4))) == [0, 1]


def test_assignment_structure(rng):
    probs, boxes, classes, gt = random_instance(rng, 4, 8)
    asg = hungarian_match(probs, boxes, classes, gt)
    assert sorted(g for _, g in asg.pairs) == [0, 1, 2, 3]
    assert len(set(asg.proposals)) == 4


@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.permutations(range(5)))
def test_ground_truth_permutation_invariance(seed, n, perm):
    rng = np.random.default_rng(seed)
    probs, boxes, classes, gt = random_instance(rng, n, 8)
    perm = [i for i in perm if i < n]
    base = hungarian_match(probs, boxes, classes, gt)
    permuted = hungarian_match(probs, boxes, [classes[i] for i in perm], gt[perm])
    cost = match_cost(probs, boxes, classes, gt, LossWeights())
    mapped = Assignment(tuple(sorted((p, perm[g]) for p, g in permuted.pairs)))
    assert assignment_cost(cost, mapped) == pytest.approx(assignment_cost(cost, base), abs=1e-12)
    # a unique optimum (almost sure for continuous costs) gives the same pair set
    assert mapped.pairs == base.pairs


def test_log_cost_option(rng):
    probs, boxes, classes, gt = random_instance(rng, 2, 4)
    w = LossWeights(log_match_cost=True)
    cost = match_cost(probs, boxes, classes, gt, w)
    plain = match_cost(probs, boxes, classes, gt, LossWeights())
    assert np.allclose(cost - plain, -np.log(probs[:, classes].T) + probs[:, classes].T)


# box loss ---------------------------------------------------------------------


def test_identical_boxes_zero_loss():
    terms = box_loss([0.5, 0.5, 0.2, 0.3], [0.5, 0.5, 0.2, 0.3])
    assert terms.l1.item() == 0.0 and terms.giou.item() == pytest.approx(0.0, abs=1e-15)


def test_disjoint_boxes_giou():
    # unit squares with a unit gap: enclosure 3, union 2 -> GIoU = -1/3
    terms = box_loss([0.5, 0.5, 1.0, 1.0], [2.5, 0.5, 1.0, 1.0])
    assert terms.giou.item() == pytest.approx(4 / 3, abs=1e-12)
    assert terms.giou.item() > 1.0
    assert terms.l1.item() == pytest.approx(2.0)


def test_nested_boxes_giou():
    terms = box_loss([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 1.0, 1.0])
    assert terms.giou.item() == pytest.approx(0.75, abs=1e-12)


def test_invalid_box():
    with pytest.raises(InvalidBoxError):
        box_loss([0.5, 0.5, 0.0, 0.1], [0.5, 0.5, 0.1, 0.1])
    with pytest.raises(InvalidBoxError):
        pairwise_giou(np.array([[0.5, 0.5, 0.1, -0.1]]), np.array([[0.5, 0.5, 0.1, 0.1]]))


@given(st.integers(0, 2**31 - 1))
def test_giou_term_range(seed):
    rng = np.random.default_rng(seed)
    a = np.column_stack([rng.uniform(0, 1, (5, 2)), rng.uniform(0.01, 0.5, (5, 2))])
    b = np.column_stack([rng.uniform(0, 1, (5, 2)), rng.uniform(0.01, 0.5, (5, 2))])
    g = box_loss(a, b).giou.data
    assert np.all(g >= -1e-12) and np.all(g <= 2 + 1e-12)


# detection loss ---------------------------------------------------------------


def test_perfect_prediction_has_zero_loss():
    probs = np.zeros((3, 4))
    probs[0, 1] = 1.0
    probs[1:, 3] = 1.0
    boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1], [0.7, 0.7, 0.1, 0.1]])
    loss = detr_loss(probs, boxes, [1], boxes[:1], Assignment(((0, 0),)))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_uniform_scores_closed_form():
    C = 5
    probs = np.full((1, C + 1), 1 / (C + 1))
    box = np.array([[0.5, 0.5, 0.2, 0.2]])
    loss = detr_loss(probs, box, [2], box, Assignment(((0, 0),)))
    assert loss.item() == pytest.approx(np.log(C + 1), abs=1e-12)


def test_detr_loss_matches_per_term_oracle(rng):
    w = LossWeights()
    for _ in range(10):
        probs, boxes, classes, gt = random_instance(rng, 3, 6)
        asg = hungarian_match(probs, boxes, classes, gt, w)
        bg = probs.shape[1] - 1
        matched = asg.proposal_for()
        expected = 0.0
        for g, p in matched.items():
            expected -= np.log(probs[p, classes[g]])
            expected += w.l1 * np.abs(boxes[p] - gt[g]).sum()
            expected += w.giou * (1 - pairwise_giou(boxes[p][None], gt[g][None])[0, 0])
        for p in set(range(6)) - set(matched.values()):
            expected -= w.background * np.log(probs[p, bg])
        assert detr_loss(probs, boxes, classes, gt, asg, w).item() == pytest.approx(expected, abs=1e-10)


def test_zero_probability_is_clamped_and_flagged():
    probs = np.array([[0.0, 1.0]])
    box = np.array([[0.5, 0.5, 0.2, 0.2]])
    diag = LossDiagnostics()
    loss = detr_loss(probs, box, [0], box, Assignment(((0, 0),)), diagnostics=diag)
    assert loss.item() == pytest.approx(-np.log(1e-12))
    assert diag.clamped_logs == 1


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.9))
def test_detr_loss_nonnegative_and_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    probs, boxes, classes, gt = random_instance(rng, 2, 5)
    asg = hungarian_match(probs, boxes, classes, gt)
    base = detr_loss(probs, boxes, classes, gt, asg).item()
    assert base >= 0.0
    p, g = asg.pairs[0]
    better = probs.copy()
    better[p, classes[g]] += bump
    assert detr_loss(better, boxes, classes, gt, asg).item() < base


def test_detr_loss_gradients(rng):
    for _ in range(20):
        probs, boxes, classes, gt = random_instance(rng, 2, 5)
        asg = hungarian_match(probs, boxes, classes, gt)
        pt = Tensor(probs, requires_grad=True)
        bt = Tensor(boxes, requires_grad=True)
        assert gradient_check(lambda: detr_loss(pt, bt, classes, gt, asg), [pt, bt]) <= 1e-4


def test_total_loss():
    assert total_loss(Tensor(2.0), Tensor(3.0), 0.0).item() == 2.0
    assert total_loss(Tensor(2.0), Tensor(3.0), 0.01).item() == pytest.approx(2.03)
    assert total_loss(Tensor(2.0), Tensor(3.0), 0.5).item() == 3.5
    with pytest.raises(ValueError):
        total_loss(Tensor(2.0), Tensor(3.0), -1.0)
