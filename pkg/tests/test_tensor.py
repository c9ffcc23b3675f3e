from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mdcdet.errors import DegenerateDistributionError, DegenerateVectorError, NonFiniteError, RankError, ShapeError
from mdcdet.tensor import (
    GradientMask,
    Tensor,
    apply_gradient_mask,
    bilinear_sample,
    concat,
    cosine_similarity,
    exp,
    gradient_check,
    layer_norm,
    log,
    masked_fill,
    matmul,
    maximum,
    minimum,
    no_grad,
    relu,
    sigmoid,
    softmax,
    sqrt,
    stack,
    tabs,
    tanh,
    tsum,
)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


# matmul ---------------------------------------------------------------------


def test_matmul_identity():
    out = matmul(np.eye(2), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_orthogonal_selection():
    assert np.array_equal(matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    assert np.allclose(matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_accumulates_both_operands(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    tsum(matmul(a, b)).backward()
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ np.ones((3, 2)))


# softmax --------------------------------------------------------------------


def test_softmax_symmetric():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_masked_logit_is_exactly_zero():
    out = softmax(Tensor([0.0, -np.inf])).data
    assert out[0] == 1.0 and out[1] == 0.0


def test_softmax_matches_direct_exponentiation():
    x = np.array([1.0, 2.0, 3.0])
    assert np.allclose(softmax(Tensor(x)).data, np.exp(x) / np.exp(x).sum(), atol=1e-12)


def test_softmax_all_masked_raises():
    with pytest.raises(DegenerateDistributionError):
        softmax(Tensor([-np.inf, -np.inf]))


def test_softmax_rejects_nan():
    with pytest.raises(NonFiniteError):
        softmax(Tensor([np.nan, 0.0]))


@given(
    st.lists(st.floats(-30, 30), min_size=1, max_size=8),
    st.floats(-50, 50),
)
def test_softmax_sums_to_one_and_is_shift_invariant(values, shift):
    x = np.array(values)
    p = softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all(p >= 0)
    assert np.allclose(softmax(Tensor(x + shift)).data, p, atol=1e-12)


def test_only_softmax_accepts_neg_inf():
    with pytest.raises(NonFiniteError):
        exp(Tensor([0.0, -np.inf]))
    with pytest.raises(NonFiniteError):
        matmul(Tensor([[-np.inf]]), Tensor([[1.0]]))


def test_masked_logit_gets_no_gradient(rng):
    x = param(rng, 4)
    mask = np.array([False, True, False, True])
    p = softmax(masked_fill(x, mask, -np.inf))
    tsum(log(p[np.array([0, 2])])).backward()
    assert np.all(x.grad[mask] == 0.0)


# cosine similarity ----------------------------------------------------------


def test_cosine_self_similarity(rng):
    u = rng.normal(size=5)
    assert cosine_similarity(Tensor(u), Tensor(u)).item() == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal():
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0


def test_cosine_matches_formula(rng):
    u, v = rng.normal(size=7), rng.normal(size=7)
    expected = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
    assert cosine_similarity(Tensor(u), Tensor(v)).item() == pytest.approx(expected, abs=1e-12)


def test_cosine_zero_vector_raises():
    with pytest.raises(DegenerateVectorError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_cosine_length_mismatch():
    with pytest.raises(ShapeError):
        cosine_similarity(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_cosine_in_unit_range(u, v):
    u, v = np.array(u), np.array(v)
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    c = cosine_similarity(Tensor(u), Tensor(v)).item()
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12


# bilinear sampling ----------------------------------------------------------


def test_bilinear_on_grid_node(rng):
    fm = rng.normal(size=(4, 5, 3))
    assert np.array_equal(bilinear_sample(Tensor(fm), Tensor([3.0, 2.0])).data, fm[2, 3])


def test_bilinear_midpoint_is_mean(rng):
    fm = rng.normal(size=(4, 5, 3))
    out = bilinear_sample(Tensor(fm), Tensor([1.5, 2.0])).data
    assert np.allclose(out, (fm[2, 1] + fm[2, 2]) / 2, atol=1e-12)


def test_bilinear_matches_four_corner_oracle(rng):
    fm = rng.normal(size=(6, 6, 4))
    x, y = 2.3, 3.8
    x0, y0, fx, fy = 2, 3, 0.3, 0.8
    expected = ((1 - fx) * (1 - fy) * fm[y0, x0] + fx * (1 - fy) * fm[y0, x0 + 1]
                + (1 - fx) * fy * fm[y0 + 1, x0] + fx * fy * fm[y0 + 1, x0 + 1])
    assert np.allclose(bilinear_sample(Tensor(fm), Tensor([x, y])).data, expected, atol=1e-12)


def test_bilinear_clamps_outside_grid(rng):
    fm = rng.normal(size=(4, 4, 2))
    assert np.allclose(bilinear_sample(Tensor(fm), Tensor([-3.0, 10.0])).data, fm[3, 0])


def test_bilinear_gradients(rng):
    for _ in range(5):
        fm = param(rng, 2, 5, 6, 3)
        loc = Tensor(rng.uniform(0.2, 4.8, (2, 7, 2)), requires_grad=True)
        w = rng.normal(size=(2, 7, 3))
        assert gradient_check(lambda: tsum(bilinear_sample(fm, loc) * w), [fm, loc]) <= 1e-4


# backward -------------------------------------------------------------------


def test_sum_gives_unit_gradient(rng):
    p = param(rng, 2, 3, 4)
    tsum(p).backward()
    assert np.array_equal(p.grad, np.ones((2, 3, 4)))


def test_quadratic_gradient(rng):
    p = param(rng, 5)
    tsum(p * p).backward()
    assert np.allclose(p.grad, 2 * p.data)


def test_backward_accumulates(rng):
    p = param(rng, 3)
    tsum(p).backward()
    tsum(p).backward()
    assert np.array_equal(p.grad, 2 * np.ones(3))
    p.zero_grad()
    assert p.grad is None


def test_backward_needs_scalar(rng):
    with pytest.raises(RankError):
        (param(rng, 3) * 2).backward()


def test_no_grad_records_nothing(rng):
    p = param(rng, 3)
    with no_grad():
        out = tsum(p * p)
    assert not out.requires_grad


def _random_graph(rng, kind: int):
    a, b = param(rng, 3, 4), param(rng, 4, 3)
    g, beta = param(rng, 4), param(rng, 4)
    w = rng.normal(size=(3, 3))
    graphs = [
        lambda: tsum(matmul(a, b) * w),
        lambda: tsum(softmax(matmul(a, b), axis=-1) * w),
        lambda: tsum(layer_norm(a, g, beta) ** 2),
        lambda: tsum(sigmoid(a) * tanh(a) + relu(a) * 0.5),
        lambda: tsum(log(exp(a) + 1.0) + sqrt(a * a + 1.0)),
        lambda: tsum(tabs(a - 0.1) + maximum(a, 0.2) - minimum(a, -0.1)),
        lambda: tsum(concat([a, a * 2.0], axis=0) ** 2) + tsum(stack([a, a], axis=1)[:, 0] * 3.0),
        lambda: tsum(cosine_similarity(a, b.T, axis=-1)),
        lambda: tsum((a / (tabs(a) + 1.0)).mean(axis=0) * np.arange(4.0)),
        lambda: tsum(a[np.array([0, 2])] * a[1:]),
    ]
    return graphs[kind % len(graphs)], [a, b, g, beta]


def test_finite_difference_oracle_over_100_graphs():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        fn, params = _random_graph(rng, i)
        worst = max(worst, gradient_check(fn, params))
    assert worst <= 1e-4


# gradient masks -------------------------------------------------------------


def test_empty_mask_is_identity(rng):
    g = rng.normal(size=(4, 3))
    assert np.array_equal(apply_gradient_mask(g, GradientMask("w")), g)


def test_full_mask_zeroes(rng):
    g = rng.normal(size=(4, 3))
    assert np.array_equal(apply_gradient_mask(g, GradientMask("w", (0, 1, 2, 3))), np.zeros((4, 3)))


def test_mask_rows(rng):
    g = rng.normal(size=(4, 3))
    out = apply_gradient_mask(g, GradientMask("w", (0, 2)))
    assert np.all(out[[0, 2]] == 0.0)
    assert np.array_equal(out[[1, 3]], g[[1, 3]])


def test_mask_along_other_axis(rng):
    g = rng.normal(size=(2, 3, 5))
    out = apply_gradient_mask(g, GradientMask("m", (1, 4), axis=2))
    assert np.all(out[..., [1, 4]] == 0.0)
    assert np.array_equal(out[..., [0, 2, 3]], g[..., [0, 2, 3]])


def test_mask_out_of_range(rng):
    with pytest.raises(IndexError):
        apply_gradient_mask(rng.normal(size=(2, 2)), GradientMask("w", (2,)))


@given(st.sets(st.integers(0, 5)), st.integers(0, 2**31 - 1))
def test_mask_idempotent(rows, seed):
    g = np.random.default_rng(seed).normal(size=(6, 2))
    m = GradientMask("w", tuple(sorted(rows)))
    once = apply_gradient_mask(g, m)
    assert np.array_equal(apply_gradient_mask(once, m), once)
