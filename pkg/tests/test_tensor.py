import math

import numpy as np
import pytest

from motionpose import tensor as T
from motionpose.tensor import GraphStateError, ShapeError, Tensor


def param(a):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)


def test_conv_shape_and_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
    w = param(rng.standard_normal((1, 1, 3, 3)))
    assert T.conv2d(Tensor(x), w, param([0.0]), 1, 1).shape == (1, 1, 8, 8)
    ident = T.conv2d(Tensor(x), param(np.ones((1, 1, 1, 1))), param([0.0]))
    np.testing.assert_array_equal(ident.data, x)


def test_transposed_conv_output_size(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    w = param(rng.standard_normal((3, 4, 4, 4)))
    assert T.conv_transpose2d(x, w, param(np.zeros(4)), 2, 1).shape == (2, 4, 10, 10)


def test_transposed_conv_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv_transpose(y)> with the same weights and no bias
    x = rng.standard_normal((1, 2, 7, 7)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    y = T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    z = rng.standard_normal(y.shape).astype(np.float32)
    back = T.conv_transpose2d(Tensor(z), Tensor(w), None, 2, 1).data
    assert back.shape == x.shape
    assert np.sum(y * z) == pytest.approx(np.sum(x * back), rel=1e-4)


def test_softmax_ce_uniform_logits():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((1, 2))), np.array([0]))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_softmax_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_euclidean_zero_at_target(rng):
    x = param(rng.standard_normal((2, 3)))
    loss = T.euclidean_loss(x, x.data.copy())
    loss.backward()
    assert loss.item() == 0.0
    assert np.all(x.grad == 0)


def test_fc_sum_gradient_is_outer_product(rng):
    x = rng.standard_normal((1, 5)).astype(np.float32)
    w = param(rng.standard_normal((3, 5)))
    b = param(np.zeros(3))
    T.sum_all(T.linear(Tensor(x), w, b)).backward()
    np.testing.assert_allclose(w.grad, np.outer(np.ones(3), x[0]), rtol=1e-6)
    np.testing.assert_allclose(b.grad, np.ones(3))


def test_shared_parameter_gradients_add(rng):
    w = param(rng.standard_normal((4, 6)))
    x1, x2 = (Tensor(rng.standard_normal((2, 6))) for _ in range(2))

    def grad_of(*xs):
        w.grad = None
        total = None
        for x in xs:
            l = T.sum_all(T.relu(T.linear(x, w)))
            total = l if total is None else T.add(total, l)
        total.backward()
        return w.grad.copy()

    g1, g2 = grad_of(x1), grad_of(x2)
    np.testing.assert_allclose(grad_of(x1, x2), g1 + g2, rtol=1e-6, atol=1e-7)


def test_gather_rows_accumulates_repeats():
    x = param(np.arange(6).reshape(3, 2))
    T.sum_all(T.gather_rows(x, [0, 2, 2, 2])).backward()
    np.testing.assert_array_equal(x.grad[:, 0], [1, 0, 3])


def test_backward_errors():
    with pytest.raises(GraphStateError):
        Tensor(np.ones(())).backward()
    x = param(np.ones((2, 2)))
    with pytest.raises(GraphStateError):
        T.relu(x).backward()
    loss = T.sum_all(x)
    loss.backward()
    with pytest.raises(GraphStateError):
        loss.backward()


def test_shape_errors_are_descriptive():
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 5, 5))), param(np.ones((1, 3, 3, 3))))


def test_conv_and_fc_are_linear_without_bias(rng):
    w = Tensor(rng.standard_normal((2, 3, 3, 3)))
    a, b = rng.standard_normal((2, 1, 3, 6, 6)).astype(np.float32)
    f = lambda x: T.conv2d(Tensor(x), w, None, 1, 1).data
    np.testing.assert_allclose(f(a + b), f(a) + f(b), rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(f(2.5 * a), 2.5 * f(a), rtol=1e-4, atol=1e-5)
    W = Tensor(rng.standard_normal((4, 7)))
    x, y = rng.standard_normal((2, 3, 7)).astype(np.float32)
    g = lambda v: T.linear(Tensor(v), W).data
    np.testing.assert_allclose(g(x + y), g(x) + g(y), rtol=1e-4, atol=1e-5)


def test_forward_backward_stay_finite(rng):
    x = Tensor(rng.standard_normal((2, 1, 12, 12)) * 100)
    w = param(rng.standard_normal((3, 1, 3, 3)))
    y = T.max_pool2d(T.relu(T.conv2d(x, w, param(np.zeros(3)), 1, 1)), 2, 2)
    loss = T.softmax_cross_entropy(T.linear(T.flatten(y), param(rng.standard_normal((2, 108)))), np.array([0, 1]))
    loss.backward()
    assert np.isfinite(loss.item())
    assert np.all(np.isfinite(w.grad))
