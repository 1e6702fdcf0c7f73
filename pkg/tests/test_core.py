import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsim.core import (FD_ATOL, FD_RTOL, FD_STEP, Batch, Model, ShapeError, gradient, init_model,
                         loss, num_params, sgd_steps)


def random_case(kind, seed, n=7):
    rng = np.random.default_rng(seed)
    d, c, h = 4, 3, 5
    if kind == "linreg":
        model = Model("linreg", d, params=rng.normal(size=d + 1))
        batch = Batch(rng.normal(size=(n, d)), rng.normal(size=n))
    elif kind == "logreg":
        model = Model("logreg", d, c, params=rng.normal(size=num_params("logreg", d, c)))
        batch = Batch(rng.normal(size=(n, d)), rng.integers(0, c, size=n))
    elif kind == "mlp1":
        model = Model("mlp1", d, c, h, params=rng.normal(size=num_params("mlp1", d, c, h)))
        batch = Batch(rng.normal(size=(n, d)), rng.integers(0, c, size=n))
    else:
        a = rng.normal(size=(n, d, d))
        a = np.einsum("nij,nkj->nik", a, a) + np.eye(d)
        feats = np.hstack([a.reshape(n, -1), rng.normal(size=(n, d))])
        model = Model("quadratic", d, params=rng.normal(size=d))
        batch = Batch(feats, np.zeros(n))
    return model, batch


def fd_gradient(model, batch, h=FD_STEP):
    out = np.zeros(model.dim)
    for i in range(model.dim):
        up = model.params.copy(); up[i] += h
        dn = model.params.copy(); dn[i] -= h
        out[i] = (loss(model.with_params(up), batch) - loss(model.with_params(dn), batch)) / (2 * h)
    return out


def test_linreg_zero_params_zero_targets_has_zero_loss():
    m = Model("linreg", 3)
    b = Batch(np.ones((4, 3)), np.zeros(4))
    assert loss(m, b) == 0.0
    assert np.all(gradient(m, b) == 0.0)


def test_logreg_zero_params_two_classes_loss_is_ln2():
    m = Model("logreg", 3, 2)
    b = Batch(np.arange(6.0).reshape(2, 3), [0, 1])
    assert loss(m, b) == pytest.approx(math.log(2), abs=1e-15)


def test_logreg_single_sample_gradient_closed_form():
    x = np.array([0.5, -1.0, 2.0])
    m = Model("logreg", 3, 2)
    g = gradient(m, Batch(x[None, :], [1]))
    # (softmax - onehot) outer x, softmax = (0.5, 0.5), label 1
    coef = np.array([0.5, -0.5])
    expected = np.concatenate([np.outer(coef, x).ravel(), coef])
    np.testing.assert_allclose(g, expected, rtol=0, atol=1e-15)


def _mlp_forward_scalar(params, x_rows, labels, d, h, c):
    """Plain-Python tanh MLP with softmax cross-entropy."""
    p = list(params)
    w1 = [[p[i * d + j] for j in range(d)] for i in range(h)]
    b1 = p[h * d:h * d + h]
    o = h * d + h
    w2 = [[p[o + i * h + j] for j in range(h)] for i in range(c)]
    b2 = p[o + c * h:o + c * h + c]
    total = 0.0
    for x, y in zip(x_rows, labels):
        hid = [math.tanh(sum(w1[i][j] * x[j] for j in range(d)) + b1[i]) for i in range(h)]
        z = [sum(w2[k][i] * hid[i] for i in range(h)) + b2[k] for k in range(c)]
        mx = max(z)
        lse = mx + math.log(sum(math.exp(v - mx) for v in z))
        total += lse - z[int(y)]
    return total / len(labels)


def test_mlp1_loss_matches_scalar_forward():
    rng = np.random.default_rng(123)
    d, h, c = 3, 4, 3
    m = Model("mlp1", d, c, h, params=rng.normal(size=num_params("mlp1", d, c, h)))
    x = rng.normal(size=(3, d))
    y = np.array([0, 2, 1])
    expected = _mlp_forward_scalar(m.params, x.tolist(), y.tolist(), d, h, c)
    assert loss(m, Batch(x, y)) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("kind", ["linreg", "logreg", "mlp1", "quadratic"])
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(kind, seed):
    model, batch = random_case(kind, seed)
    np.testing.assert_allclose(gradient(model, batch), fd_gradient(model, batch), rtol=FD_RTOL, atol=FD_ATOL)


@pytest.mark.parametrize("kind", ["linreg", "logreg", "mlp1"])
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_loss_is_non_negative(kind, seed):
    model, batch = random_case(kind, seed)
    assert loss(model, batch) >= 0.0


def test_dimension_mismatch_raises_shape_error():
    with pytest.raises(ShapeError):
        loss(Model("linreg", 3), Batch(np.ones((2, 4)), np.zeros(2)))
    with pytest.raises(ShapeError):
        Model("logreg", 3, 2, params=np.zeros(5))
    with pytest.raises(ShapeError):
        loss(Model("logreg", 2, 2), Batch(np.ones((1, 2)), [2]))


def test_sgd_zero_steps_returns_model_unchanged():
    model, batch = random_case("logreg", 1)
    assert sgd_steps(model, batch, 0.1, 0, 4, 0) is model


def test_sgd_prox_mu_zero_is_bitwise_identical():
    model, batch = random_case("mlp1", 2, n=20)
    plain = sgd_steps(model, batch, 0.05, 9, 4, 17)
    prox = sgd_steps(model, batch, 0.05, 9, 4, 17, prox=(0.0, np.ones(model.dim)))
    assert plain.params.tobytes() == prox.params.tobytes()


def test_sgd_single_full_batch_step_is_gradient_step():
    model, batch = random_case("linreg", 3, n=10)
    out = sgd_steps(model, batch, 0.3, 1, len(batch), 0)
    # the shuffled row order changes summation order only
    np.testing.assert_allclose(out.params, model.params - 0.3 * gradient(model, batch), rtol=0, atol=1e-14)


def test_sgd_is_deterministic_per_seed():
    model, batch = random_case("logreg", 4, n=30)
    a = sgd_steps(model, batch, 0.1, 12, 7, (5, 1, 2))
    b = sgd_steps(model, batch, 0.1, 12, 7, (5, 1, 2))
    c = sgd_steps(model, batch, 0.1, 12, 7, (5, 1, 3))
    assert a.params.tobytes() == b.params.tobytes()
    assert a.params.tobytes() != c.params.tobytes()


def test_init_model_sizes():
    assert init_model("mlp1", 4, 3, 5, seed=1).dim == num_params("mlp1", 4, 3, 5)
    assert np.all(init_model("logreg", 4, 3).params == 0)
    with pytest.raises(ValueError):
        num_params("cnn", 3)
