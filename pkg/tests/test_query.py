from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mdcdet.errors import NoTargetError, ShapeError
from mdcdet.query import RankingHead, batched_query_loss, localized_query, query_loss, rank, uniform_ranking
from mdcdet.tensor import Tensor, gradient_check, softmax


def random_head(rng, dim):
    head = RankingHead(dim)
    head.weight.data = rng.normal(size=(1, dim))
    head.bias.data = rng.normal(size=1)
    return head


def test_zero_head_ranks_uniformly(rng):
    alpha = rank(RankingHead(4), Tensor(rng.normal(size=(6, 4))))
    assert np.allclose(alpha.data, np.full(6, 1 / 6))


def test_singleton_rank():
    assert rank(RankingHead(3), Tensor(np.ones((1, 3)))).data == pytest.approx([1.0])


def test_rank_matches_score_then_softmax(rng):
    head = random_head(rng, 5)
    props = rng.normal(size=(4, 5))
    scores = props @ head.weight.data[0] + head.bias.data[0]
    expected = np.exp(scores) / np.exp(scores).sum()
    assert np.allclose(rank(head, Tensor(props)).data, expected, atol=1e-10)


def test_rank_output_length(rng):
    assert rank(random_head(rng, 3), Tensor(rng.normal(size=(2, 7, 3)))).shape == (2, 7)


def test_uniform_query_is_mean(rng):
    props = Tensor(rng.normal(size=(5, 3)))
    q = localized_query(props, uniform_ranking(props))
    assert np.allclose(q.data, props.data.mean(0), atol=1e-12)


def test_one_hot_query_selects(rng):
    props = rng.normal(size=(5, 3))
    alpha = np.zeros(5)
    alpha[3] = 1.0
    assert np.array_equal(localized_query(Tensor(props), Tensor(alpha)).data, props[3])


def test_weighted_query_oracle(rng):
    props = rng.normal(size=(6, 4))
    alpha = rng.dirichlet(np.ones(6))
    expected = sum(alpha[i] * props[i] for i in range(6))
    assert np.allclose(localized_query(Tensor(props), Tensor(alpha)).data, expected, atol=1e-12)


def test_query_length_mismatch(rng):
    with pytest.raises(ShapeError):
        localized_query(Tensor(rng.normal(size=(5, 3))), Tensor(np.full(4, 0.25)))


@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_query_in_convex_hull_bounding_box(seed, P):
    rng = np.random.default_rng(seed)
    props = rng.normal(size=(P, 3))
    q = localized_query(Tensor(props), Tensor(rng.dirichlet(np.ones(P)))).data
    assert np.all(q >= props.min(0) - 1e-12) and np.all(q <= props.max(0) + 1e-12)


def test_query_loss_near_zero_for_perfect_ranking():
    alpha = softmax(Tensor([50.0, 0.0, 0.0]))
    assert 0.0 <= query_loss(alpha, {0}).item() < 1e-15


def test_query_loss_uniform_closed_form():
    assert query_loss(Tensor(np.full(6, 1 / 6)), {4}).item() == pytest.approx(np.log(6), abs=1e-12)


def test_query_loss_hand_example():
    value = query_loss(Tensor([0.7, 0.2, 0.1]), {0, 2}).item()
    assert value == pytest.approx(-(np.log(0.7) + np.log(0.1)) / 2, abs=1e-12)
    assert value == pytest.approx(1.3297, abs=1e-4)


def test_query_loss_requires_target():
    with pytest.raises(NoTargetError):
        query_loss(Tensor([0.5, 0.5]), set())
    with pytest.raises(IndexError):
        query_loss(Tensor([0.5, 0.5]), {2})


def test_batched_query_loss_skips_empty_images(rng):
    alpha = Tensor(rng.dirichlet(np.ones(4), size=3))
    loss = batched_query_loss(alpha, [[1], [], [0, 3]])
    expected = (query_loss(Tensor(alpha.data[0]), [1]).item() + query_loss(Tensor(alpha.data[2]), [0, 3]).item()) / 2
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    assert batched_query_loss(alpha, [[], [], []]) is None


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 5.0))
def test_lowering_unmatched_scores_never_hurts(seed, drop):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=6)
    matched = {0, 3}
    lowered = scores.copy()
    lowered[[1, 2, 4, 5]] -= drop
    before = query_loss(softmax(Tensor(scores)), matched).item()
    after = query_loss(softmax(Tensor(lowered)), matched).item()
    assert after <= before + 1e-12


def test_query_loss_gradient_wrt_head(rng):
    for _ in range(20):
        head = random_head(rng, 4)
        props = Tensor(rng.normal(size=(6, 4)))
        matched = sorted(rng.choice(6, size=2, replace=False).tolist())
        assert gradient_check(lambda: query_loss(rank(head, props), matched), [head.weight, head.bias]) <= 1e-4
