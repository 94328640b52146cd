import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlab.tensorcore import (Adam, GraphError, NonFiniteError, ShapeError, Tensor, abs_, adam_step, add,
                              AdamState, backward, concat, cross_entropy_loss, dropout, embedding_lookup, gelu,
                              l1_loss, layer_norm, masked_fill_rows, matmul, mean, mse_loss, mul, neg, relu,
                              reshape, slice_, softmax, square, straight_through, sub, sum_, transpose)

from gradcheck import TOL, away_from_zero, check
from oracles import scalar_adam


def _cases():
    """(name, fn, arrays) for every primitive, several shapes each."""
    out = []
    for s in range(3):
        r = np.random.default_rng(100 + s)
        a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
        out += [
            (f"add{s}", add, [a, b]),
            (f"add_bias{s}", add, [r.normal(size=(2, 3, 4)), r.normal(size=4)]),
            (f"sub{s}", sub, [a, b]),
            (f"neg{s}", neg, [a]),
            (f"mul{s}", mul, [a, b]),
            (f"mul_bias{s}", mul, [r.normal(size=(5, 4)), r.normal(size=4)]),
            (f"gelu{s}", gelu, [r.normal(size=(4, 5)) * 2]),
            (f"relu{s}", relu, [away_from_zero(r, (4, 5))]),
            (f"abs{s}", abs_, [away_from_zero(r, (4, 5))]),
            (f"square{s}", square, [a]),
            (f"matmul{s}", matmul, [r.normal(size=(3, 5)), r.normal(size=(5, 2))]),
            (f"matmul_batched{s}", matmul, [r.normal(size=(2, 3, 3, 4)), r.normal(size=(2, 3, 4, 2))]),
            (f"matmul_rank3x2{s}", matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
            (f"sum_axis{s}", lambda x: sum_(x, axis=1), [r.normal(size=(3, 4, 2))]),
            (f"sum_keep{s}", lambda x: sum_(x, axis=-1, keepdims=True), [a]),
            (f"mean{s}", lambda x: mean(x, axis=0), [a]),
            (f"reshape{s}", lambda x: reshape(x, (4, 3)), [a]),
            (f"transpose{s}", lambda x: transpose(x, (1, 0, 2)), [r.normal(size=(2, 3, 4))]),
            (f"slice{s}", lambda x: slice_(x, (slice(1, 3), [0, 2, 2])), [a]),
            (f"concat{s}", lambda x, y: concat([x, y], axis=1), [a, r.normal(size=(3, 2))]),
            (f"layer_norm{s}", lambda x, g, bb: layer_norm(x, g, bb), [r.normal(size=(3, 6)), r.normal(size=6),
                                                                    r.normal(size=6)]),
            (f"softmax{s}", lambda x: softmax(x, axis=-1), [r.normal(size=(3, 5))]),
            (f"embedding{s}", lambda t: embedding_lookup(t, np.array([[0, 2], [2, 3]])), [r.normal(size=(4, 3))]),
            (f"cross_entropy{s}", lambda x: cross_entropy_loss(x, np.array([0, 3, 1, 4]), np.array([1, 0, 2, .5])),
             [r.normal(size=(4, 5))]),
            (f"l1{s}", lambda x, y: l1_loss(x, y, weights=np.array([1.0, 0.0, 2.0])),
             [r.normal(size=(3, 4)), r.normal(size=(3, 4)) + 3.0]),
            (f"mse{s}", mse_loss, [a, b]),
            (f"masked_fill{s}", lambda x, f: masked_fill_rows(x, np.array([[True, False, True], [False] * 3]), f),
             [r.normal(size=(2, 3, 4)), r.normal(size=4)]),
            (f"dropout{s}", lambda x: dropout(x, 0.3, np.random.default_rng(7)), [a]),
        ]
    return out


CASES = _cases()


@pytest.mark.parametrize("name,fn,arrays", CASES, ids=[c[0] for c in CASES])
def test_primitive_gradients(name, fn, arrays):
    assert check(fn, arrays) <= TOL


def test_straight_through_forward_and_identity_gradient():
    z = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    q = np.full((2, 3), 7.0)
    out = straight_through(z, Tensor(q))
    assert np.array_equal(out.data, q)
    w = np.arange(6.0).reshape(2, 3)
    backward(sum_(mul(out, Tensor(w))))
    assert np.array_equal(z.grad, w)
    with pytest.raises(ShapeError):
        straight_through(z, Tensor(np.zeros(3)))


def test_broadcasting_is_narrow():
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 1))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_non_finite_fails_fast():
    with pytest.raises(NonFiniteError):
        mul(Tensor(np.array([1e308])), Tensor(np.array([1e308])))


def test_backward_contract():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(mul(x, 2.0))
    loss = sum_(mul(x, 2.0))
    backward(loss)
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])
    with pytest.raises(GraphError):
        backward(loss)
    with pytest.raises(GraphError):
        backward(sum_(Tensor(np.ones(3))))


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = mul(x, x)
    backward(sum_(add(y, y)))
    assert np.allclose(x.grad, 4 * x.data)


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=25)
    p = np.array([0.3])
    st = AdamState()
    for g in grads:
        adam_step([p], [np.array([g])], st, lr=0.01)
    assert p[0] == pytest.approx(scalar_adam(0.3, grads, 0.01), rel=1e-12, abs=1e-14)


def test_adam_none_grad_is_zero():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_softmax_rows_are_distributions(n, v, seed):
    x = np.random.default_rng(seed).normal(size=(n, v)) * 10
    y = softmax(Tensor(x)).data
    assert np.allclose(y.sum(-1), 1.0) and (y >= 0).all()


def test_cross_entropy_zero_weight_rejected():
    with pytest.raises(ValueError):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), np.array([0, 1]), np.zeros(2))
