import numpy as np
import pytest

from embedding_align_lab.errors import ContractError, DegenerateEmbeddingError, DimensionError
from embedding_align_lab.lab_tools import tensor as T
from embedding_align_lab.lab_tools.tensor import Tensor, finite_diff_gradient, precision, relative_error


def test_softmax_rows_are_stochastic(rng):
    x = Tensor(rng.normal(size=(5, 7)) * 10)
    y = T.softmax_rows(x).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_survives_large_logits():
    y = T.softmax_rows(Tensor([[1000.0, 1000.0, -1000.0]])).data
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]], atol=1e-6)


def test_log_softmax_matches_log_of_softmax(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_allclose(T.log_softmax_rows(x).data, np.log(T.softmax_rows(x).data), atol=1e-5)


def test_layer_norm_zero_mean_unit_variance(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(4, 16)))
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ContractError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert (2, 3) in err.value.shapes and (4, 5) in err.value.shapes


def test_add_broadcasts_trailing_block_and_reduces_gradient():
    x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    table = Tensor(np.zeros((3, 4)), requires_grad=True)
    T.backward(T.sum(T.add(x, table)))
    np.testing.assert_array_equal(table.grad, np.full((3, 4), 2.0))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_add_rejects_non_trailing_shapes():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.scale(x, 2.0))


def test_l2_normalize_zero_vector_fails():
    with pytest.raises(DegenerateEmbeddingError):
        T.l2_normalize(Tensor(np.zeros((1, 4))))


def test_l2_normalize_gives_unit_rows(rng):
    y = T.l2_normalize(Tensor(rng.normal(size=(6, 5)))).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-6)


def test_take_rows_accumulates_repeated_ids():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    T.backward(T.sum(T.take_rows(table, np.array([[0, 2, 0]]))))
    np.testing.assert_array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_shared_subexpression_gradient_is_summed():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_precision_context_restores_default():
    assert T.get_default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_composite_gradient_matches_finite_differences(rng):
    with precision(np.float64):
        w = Tensor(rng.normal(size=(4, 3)))
        gamma = Tensor(rng.normal(size=3))
        beta = Tensor(rng.normal(size=3))
        weights = rng.normal(size=(5, 3))

        def f(x):
            h = T.layer_norm(T.matmul(x, w), gamma, beta)
            return T.sum(T.mul_const(T.softmax_rows(h), weights))

        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        T.backward(f(x))
        numeric = finite_diff_gradient(f, x)
    assert relative_error(x.grad, numeric) < 1e-5


def test_permute_and_reshape_gradients_round_trip(rng):
    with precision(np.float64):
        target = rng.normal(size=(3, 2, 4))

        def f(x):
            moved = T.reshape(T.permute(x, (1, 0, 2)), (3, 2, 4))
            return T.sum(T.mul_const(moved, target))

        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        T.backward(f(x))
        numeric = finite_diff_gradient(f, x)
    assert relative_error(x.grad, numeric) < 1e-6


def test_finite_diff_on_selected_indices(rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=(3, 3)))
        values = finite_diff_gradient(lambda t: T.sum(T.mul(t, t)), x, indices=[0, 4, 8])
    np.testing.assert_allclose(values, 2 * x.data.reshape(-1)[[0, 4, 8]], atol=1e-6)


def test_matmul_hand_computed_product():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([[5.0], [6.0]])
    out = T.matmul(a, b)
    np.testing.assert_allclose(out.data, [[17.0], [39.0]])
    T.backward(T.sum(out))
    np.testing.assert_allclose(a.grad, np.ones((2, 1)) @ b.data.T)


def test_relu_values_and_gradient_mask():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = T.relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    T.backward(T.sum(y))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_repeated_backward_accumulates_until_reset():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = T.sum(T.mul(x, x))
    loss.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    loss.backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0, 12.0])
    x.zero_grad()
    loss.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_fan_out_visits_each_node_once():
    x = Tensor(np.ones(4), requires_grad=True)
    graph = T.backward(T.add(T.sum(x), T.sum(x)))
    assert len(graph) == len({id(node) for node in graph}) == 4
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0, 2.0])
