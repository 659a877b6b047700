# coding: utf-8
"""Autodiff kernels, whitening and power iteration tests."""

from __future__ import absolute_import
from __future__ import unicode_literals

import logging

import numpy as np
import pytest

from salsa import (Parameter, Tensor, backward, finite_diff_check,
                   fit_pca_whitener, power_iteration)
from salsa._numeric import (grouped_attention, l2_normalize_rows, layer_norm,
                            matmul, mlp2, softmax_rows, square, sum_all)
from salsa.errors import (ConvergenceError, DomainError, NonFiniteError,
                          ShapeError)


def test_matmul_gradient(rng):
    """Analytic matmul gradients match central differences."""
    a = Parameter(rng.normal(size=(3, 4)), "a")
    b = Parameter(rng.normal(size=(4, 2)), "b")
    error = finite_diff_check(lambda: sum_all(square(matmul(a, b))), [a, b],
                              eps=1e-5, num_samples=20, rng=rng)
    assert error < 1e-4


def test_layer_norm_and_normalize_gradients(rng):
    """Layer norm and row normalization gradients are correct."""
    x = Parameter(rng.normal(size=(5, 6)), "x")
    gain = Parameter(rng.uniform(0.5, 1.5, size=(1, 6)), "gain")
    bias = Parameter(rng.normal(size=(1, 6)), "bias")
    target = rng.normal(size=(5, 6))

    def loss():
        out = l2_normalize_rows(layer_norm(x, gain, bias))
        return sum_all(out * Tensor(target))

    error = finite_diff_check(loss, [x, gain, bias], eps=1e-5,
                              num_samples=30, rng=rng)
    assert error < 1e-4


def test_mlp2_gradient(rng):
    """Gradients flow through both layers of the perceptron."""
    x = Parameter(rng.normal(size=(4, 3)), "x")
    w1 = Parameter(rng.normal(size=(3, 5)), "w1")
    b1 = Parameter(rng.normal(size=(1, 5)), "b1")
    w2 = Parameter(rng.normal(size=(5, 2)), "w2")
    b2 = Parameter(rng.normal(size=(1, 2)), "b2")
    error = finite_diff_check(
        lambda: sum_all(square(mlp2(x, w1, b1, w2, b2))),
        [x, w1, b1, w2, b2], eps=1e-6, num_samples=30, rng=rng)
    assert error < 1e-3


def test_grouped_attention_matches_masked_dense(rng):
    """Window attention equals dense attention with a block mask."""
    q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
    groups = np.array([0, 1, 0, 2, 1, 0])
    out = grouped_attention(q, k, v, groups, 0.5).data

    logits = q @ k.T * 0.5
    logits[groups[:, None] != groups[None, :]] = -np.inf
    weights = np.exp(logits - logits.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, weights @ v, atol=1e-12)
    np.testing.assert_array_equal(out[3], v[3])


def test_grouped_attention_gradient(rng):
    """Attention gradients match central differences."""
    q = Parameter(rng.normal(size=(5, 3)), "q")
    k = Parameter(rng.normal(size=(5, 3)), "k")
    v = Parameter(rng.normal(size=(5, 3)), "v")
    groups = np.array([0, 0, 1, 1, 1])
    error = finite_diff_check(
        lambda: sum_all(square(grouped_attention(q, k, v, groups, 0.7))),
        [q, k, v], eps=1e-5, num_samples=30, rng=rng)
    assert error < 1e-4


def test_softmax_rejects_non_finite():
    """Softmax refuses NaN logits."""
    with pytest.raises(NonFiniteError):
        softmax_rows(np.array([[0.0, np.nan]]))


def test_softmax_rows_sum_to_one(rng):
    """Every softmax row is a distribution."""
    out = softmax_rows(rng.normal(size=(4, 7)) * 50.0).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0)
    assert np.all(out >= 0)


def test_backward_accumulates():
    """A second backward pass adds to the stored gradient."""
    w = Parameter(np.array([[2.0]]), "w")
    loss = sum_all(square(w))
    backward(loss)
    assert w.grad[0, 0] == pytest.approx(4.0)
    backward(loss)
    assert w.grad[0, 0] == pytest.approx(8.0)
    w.zero_grad()
    assert w.grad[0, 0] == 0.0


def test_backward_needs_scalar(rng):
    """Only 1x1 losses can be differentiated."""
    with pytest.raises(ShapeError):
        backward(Tensor(rng.normal(size=(2, 2))))


def test_shared_subexpression_gradient():
    """A node used twice receives both adjoints."""
    w = Parameter(np.array([[3.0]]), "w")
    y = square(w)
    backward(sum_all(y + y))
    assert w.grad[0, 0] == pytest.approx(12.0)


def test_whitener_identity_covariance(rng):
    """Whitened fitting data has identity covariance."""
    x = rng.normal(size=(300, 6)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.1])
    whitener = fit_pca_whitener(x, 4)
    assert (whitener.e_in, whitener.e_out) == (6, 4)
    y = whitener.transform(x)
    centered = y - y.mean(axis=0)
    np.testing.assert_allclose(centered.T @ centered / len(x), np.eye(4),
                               atol=1e-8)


def test_whitener_needs_more_samples_than_components(rng):
    """Fitting k components needs more than k samples."""
    with pytest.raises(ShapeError):
        fit_pca_whitener(rng.normal(size=(3, 5)), 3)
    with pytest.raises(ShapeError):
        fit_pca_whitener(rng.normal(size=(10, 5)), 6)


def test_whitener_transform_checks_length(rng):
    """Vectors of the wrong length are rejected."""
    whitener = fit_pca_whitener(rng.normal(size=(20, 4)), 2)
    with pytest.raises(ShapeError):
        whitener.transform(np.zeros(3))


def test_power_iteration_leading_eigenpair(rng):
    """The leading eigenpair of a positive matrix is found."""
    a = rng.uniform(0.0, 1.0, size=(8, 8))
    m = a + a.T
    pair = power_iteration(m, tol=1e-10, max_iter=10000)
    values, vectors = np.linalg.eigh(m)
    assert pair.value == pytest.approx(values[-1], rel=1e-8)
    expected = vectors[:, -1] * np.sign(vectors[np.argmax(
        np.abs(vectors[:, -1])), -1])
    np.testing.assert_allclose(pair.vector, expected, atol=1e-6)
    assert np.linalg.norm(pair.vector) == pytest.approx(1.0)


def test_power_iteration_shift_reports_unshifted_value():
    """The shift changes the iteration, not the reported eigenvalue."""
    m = np.ones((4, 4)) - np.eye(4)
    pair = power_iteration(m, shift=1.0)
    assert pair.value == pytest.approx(3.0)


def test_power_iteration_zero_matrix():
    """The zero matrix has leading eigenvalue zero."""
    assert power_iteration(np.zeros((3, 3))).value == 0.0


def test_power_iteration_budget():
    """Running out of iterations raises with the last iterate."""
    m = np.array([[2.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ConvergenceError) as info:
        power_iteration(m, tol=1e-12, max_iter=1)
    assert info.value.iterations == 1
    assert info.value.vector.shape == (2,)
    assert info.value.value > 0


def test_power_iteration_rejects_asymmetric():
    """Non-symmetric or negative input is refused."""
    with pytest.raises(DomainError):
        power_iteration(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(DomainError):
        power_iteration(np.array([[0.0, -1.0], [-1.0, 0.0]]))


def test_power_iteration_flags_repeated_eigenvalue(caplog):
    """A repeated leading eigenvalue is reported, a simple one is not."""
    with caplog.at_level(logging.DEBUG, logger="salsa"):
        pair = power_iteration(np.eye(4))
    assert pair.value == pytest.approx(1.0)
    assert pair.degenerate
    assert "repeated" in caplog.text

    blocks = np.zeros((6, 6))
    blocks[:3, :3] = blocks[3:, 3:] = np.ones((3, 3)) - np.eye(3)
    assert power_iteration(blocks, shift=1.0).degenerate

    simple = np.ones((4, 4)) - np.eye(4)
    pair = power_iteration(simple, shift=1.0)
    assert pair.value == pytest.approx(3.0)
    assert not pair.degenerate
