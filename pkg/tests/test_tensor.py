import math

import numpy as np
import pytest

from almt import tensor as T
from almt.tensor import ComputationTape, ContractError, DimensionError, NonFiniteError, Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def grad_err(f, params):
    with T.default_dtype(np.float64):
        return T.finite_diff_check(f, params, h=1e-4)


@pytest.fixture(autouse=True)
def f64():
    with T.default_dtype(np.float64):
        yield


def test_default_dtype_is_float32_outside_context():
    with T.default_dtype(np.float32):
        assert Tensor([1.0]).dtype == np.float32


def test_rank_above_three_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1)))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_construction_rejected(bad):
    with pytest.raises(NonFiniteError):
        Tensor([1.0, bad])


def test_non_finite_op_result_rejected():
    big = Tensor([1e308])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        T.mul(big, big)


def test_matmul_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_forward_values_match_numpy(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)
    x = rng.normal(size=(3, 6)) * 10
    s = T.softmax_rows(Tensor(x)).data
    ref = np.exp(x - x.max(-1, keepdims=True))
    np.testing.assert_allclose(s, ref / ref.sum(-1, keepdims=True))
    g = T.gelu(Tensor(x)).data
    np.testing.assert_allclose(g, [[0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in row] for row in x])


def test_softmax_survives_large_scores():
    out = T.softmax_rows(Tensor([[1000.0, 0.0, -1000.0]])).data
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]])


def test_layer_norm_forward(rng):
    x = rng.normal(size=(2, 3, 5))
    g, b = rng.normal(size=5), rng.normal(size=5)
    out = T.layer_norm_rows(Tensor(x), Tensor(g), Tensor(b)).data
    mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5) * g + b)


UNARY = {
    "gelu": T.gelu,
    "softmax": T.softmax_rows,
    "transpose": T.transpose,
    "mean_rows": T.mean_rows,
    "scale": lambda x: T.scale(x, -2.5),
    "slice": lambda x: T.slice_rows(x, 1, 3),
    "heads": lambda x: T.merge_heads(T.split_heads(x, 2), 2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(rng, name):
    x = leaf(rng, 2, 4, 6)
    w = Tensor(rng.normal(size=UNARY[name](x).shape))
    assert grad_err(lambda p: T.sum_all(T.mul(UNARY[name](p[0]), w)), [x]) < 1e-6


def test_binary_and_broadcast_gradients(rng):
    a, b, bias = leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
    c = leaf(rng, 2, 3, 5)

    def f(p):
        y = T.add(T.matmul(p[0], p[1]), p[2])
        return T.mean_all(T.mul(T.sub(y, p[3]), y))

    assert grad_err(f, [a, b, bias, c]) < 1e-6


def test_batched_matmul_and_concat_gradients(rng):
    a, b, c = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 3), leaf(rng, 2, 3, 2)

    def f(p):
        y = T.concat_cols([T.matmul(p[0], p[1]), p[2]])
        y = T.concat_rows([T.slice_rows(y, 0, 1), y])
        return T.sum_all(T.mul(y, y))

    assert grad_err(f, [a, b, c]) < 1e-6


def test_layer_norm_gradients(rng):
    x, g, b = leaf(rng, 2, 3, 5), leaf(rng, 5), leaf(rng, 5)
    w = Tensor(rng.normal(size=(2, 3, 5)))
    assert grad_err(lambda p: T.sum_all(T.mul(T.layer_norm_rows(*p), w)), [x, g, b]) < 1e-6


def test_expand_batch_gradient_sums(rng):
    x = leaf(rng, 3, 4)
    y = T.sum_all(T.expand_batch(x, 5))
    T.backward(y)
    np.testing.assert_allclose(x.grad, np.full((3, 4), 5.0))


def test_gradient_accumulates_over_reuse(rng):
    x = leaf(rng, 3)
    T.backward(T.sum_all(T.add(T.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_requires_scalar(rng):
    with pytest.raises(ContractError):
        T.backward(T.mul(leaf(rng, 3), 2.0))


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with T.no_grad():
        y = T.mul(x, x)
    assert y._parents == () and not y.requires_grad


def test_tape_is_topological(rng):
    x, w = leaf(rng, 2, 3), leaf(rng, 3, 2)
    h = T.matmul(x, w)
    loss = T.mean_all(T.gelu(h))
    tape = ComputationTape.trace(loss)
    order = {id(n): i for i, n in enumerate(tape.entries)}
    for node in tape.entries:
        for parent in node._parents:
            assert order[id(parent)] < order[id(node)]
    assert set(map(id, tape.leaves())) >= {id(x), id(w)}
    assert h in tape


def test_finite_diff_step_contract(rng):
    x = leaf(rng, 2)
    with pytest.raises(ContractError):
        T.finite_diff_check(lambda p: T.sum_all(p[0]), [x], h=1e-6)
    with pytest.raises(ContractError):
        T.finite_diff_check(lambda p: T.sum_all(p[0]), [x], order=3)


def test_finite_diff_detects_wrong_gradient(rng):
    x = leaf(rng, 4)

    def bad(p):
        y = T.mul(p[0], p[0])
        y._backward = lambda g: (g * 0.0,)  # deliberately wrong
        return T.sum_all(y)

    assert T.finite_diff_check(bad, [x], h=1e-4) > 0.5


def test_dropout_train_scaling(rng):
    x = Tensor(np.ones((200, 50)))
    y = T.dropout(x, 0.2, np.random.default_rng(0)).data
    kept = y != 0
    np.testing.assert_allclose(y[kept], 1 / 0.8)
    assert abs(kept.mean() - 0.8) < 0.02
