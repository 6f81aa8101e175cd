import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mafl.core import LabeledDataset, make_blobs
from mafl.training import (LogisticLoss, ModelState, QuadraticLoss, aggregate, global_gradient, global_loss,
                           local_train, make_loss, regularized_gradient, regularized_loss)


def central_diff(f, w, h=1e-6):
    g = np.zeros_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (f(w + e) - f(w - e)) / (2 * h)
    return g


@pytest.mark.parametrize("loss", [QuadraticLoss(), LogisticLoss(3)])
def test_point_gradients_match_finite_differences(loss, rng):
    data = make_blobs(12, 3, 3, seed=2)
    w = rng.normal(size=loss.dim(data))
    for k in range(len(data)):
        pt = (data.features[k], data.labels[k])
        fd = central_diff(lambda v: loss.loss_fn(v, pt), w)
        np.testing.assert_allclose(loss.grad_fn(w, pt), fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("loss", [QuadraticLoss(), LogisticLoss(3)])
def test_mean_grad_matches_point_mean(loss, rng):
    data = make_blobs(20, 3, 3, seed=4)
    w = rng.normal(size=loss.dim(data))
    np.testing.assert_allclose(loss.mean_grad(w, data.features, data.labels),
                               loss.point_grads(w, data.features, data.labels).mean(axis=0), atol=1e-12)


def test_regularized_gradient_finite_difference(rng):
    loss = LogisticLoss(3)
    data = make_blobs(15, 2, 3, seed=1)
    w0 = rng.normal(size=loss.dim(data))
    w = rng.normal(size=w0.size)
    fd = central_diff(lambda v: regularized_loss(v, w0, 0.7, loss, data), w)
    np.testing.assert_allclose(regularized_gradient(w, w0, 0.7, loss, data), fd, rtol=1e-6, atol=1e-8)


def test_logistic_zero_model_is_uniform():
    loss = LogisticLoss(4)
    data = make_blobs(8, 2, 4, seed=0)
    np.testing.assert_allclose(loss.point_losses(np.zeros(12), data.features, data.labels), np.log(4))


def test_make_loss_unknown():
    assert isinstance(make_loss("quadratic"), QuadraticLoss)
    with pytest.raises(ValueError):
        make_loss("hinge")


def test_local_train_trace_consistency():
    loss = LogisticLoss(3)
    data = make_blobs(30, 2, 3, seed=3)
    w0 = ModelState(np.zeros(loss.dim(data)), 0, 2)
    out, tr = local_train(w0, 4, 5, 0.1, 1.0, loss, data, [1, 2, 3])
    assert tr.iterations == 4 and tr.weights.shape == (5, w0.weights.size)
    for ell in range(4):
        np.testing.assert_allclose(tr.weights[ell + 1], tr.weights[ell] - 0.1 * tr.grads[ell])
        batch = data.subset(tr.batch_indices[ell])
        assert len(set(tr.batch_indices[ell])) == 5
        np.testing.assert_allclose(tr.grads[ell], regularized_gradient(tr.weights[ell], w0.weights, 1.0, loss, batch))
    np.testing.assert_allclose(tr.accumulated_update(), w0.weights - out.weights, atol=1e-12)
    again, _ = local_train(w0, 4, 5, 0.1, 1.0, loss, data, [1, 2, 3])
    np.testing.assert_array_equal(again.weights, out.weights)


def test_local_train_quadratic_full_batch_closed_form():
    # with B = D the step is deterministic: w <- w - eta((1 + rho) w - mean - rho w0)
    data = LabeledDataset(np.array([[1.0, 2.0], [3.0, 0.0]]), np.zeros(2, dtype=int), 1)
    w0 = ModelState(np.array([0.5, -0.5]))
    out, _ = local_train(w0, 2, 2, 0.1, 0.5, QuadraticLoss(), data, 0)
    w, m = w0.weights.copy(), np.array([2.0, 1.0])
    for _ in range(2):
        w = w - 0.1 * ((w - m) + 0.5 * (w - w0.weights))
    np.testing.assert_allclose(out.weights, w)


@pytest.mark.parametrize("e,B", [(0, 1), (1, 0), (1, 100)])
def test_local_train_rejects_bad_sizes(e, B):
    data = make_blobs(10, 2, 2, seed=0)
    with pytest.raises(ValueError):
        local_train(ModelState(np.zeros(6)), e, B, 0.1, 1.0, LogisticLoss(2), data, 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_local_train_diverging_step_raises():
    data = LabeledDataset(np.array([[1e200, 0.0]]), np.zeros(1, dtype=int), 1)
    with pytest.raises(FloatingPointError):
        local_train(ModelState(np.zeros(2)), 5, 1, 1e200, 0.0, QuadraticLoss(), data, 0)


@given(alpha=st.floats(0.0, 1.0), seed=st.integers(0, 1000))
def test_aggregate_is_convex_combination(alpha, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=4), r.normal(size=4)
    out = aggregate(ModelState(a, 0, 3), ModelState(b, 0), alpha)
    np.testing.assert_allclose(out.weights, (1 - alpha) * a + alpha * b)
    assert out.version == 4
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(out.weights >= lo - 1e-12) and np.all(out.weights <= hi + 1e-12)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate(ModelState(np.zeros(2)), ModelState(np.zeros(3)), 0.5)
    with pytest.raises(ValueError):
        aggregate(ModelState(np.zeros(2), 0), ModelState(np.zeros(2), 1), 0.5)
    with pytest.raises(ValueError):
        aggregate(ModelState(np.zeros(2)), ModelState(np.zeros(2)), 1.5)


def test_global_gradient_matches_global_loss(rng):
    loss = LogisticLoss(3)
    parts = [make_blobs(10, 2, 3, seed=s) for s in range(3)]
    w = rng.normal(size=9)
    fd = central_diff(lambda v: global_loss(ModelState(v), parts, loss), w)
    np.testing.assert_allclose(global_gradient(w, parts, loss), fd, rtol=1e-6, atol=1e-8)
