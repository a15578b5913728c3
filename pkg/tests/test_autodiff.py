import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icdistill import autodiff as ad
from icdistill.autodiff import Tape, Tensor, backward, finite_difference_check


def _grad(f, *xs):
    for x in xs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        loss = f(*xs)
    backward(tape, loss)
    return [x.grad for x in xs]


# -- worked examples ---------------------------------------------------------


def test_softmax_symmetric():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).values, [0.5, 0.5])


def test_matmul_identity():
    A = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(A)).values, A)


def test_cross_entropy_uniform_three_classes():
    loss = ad.cross_entropy(Tensor([0.0, 0.0, 0.0]), 1)
    assert loss.item() == pytest.approx(math.log(3), abs=1e-15)
    assert loss.item() == pytest.approx(1.0986, abs=1e-4)


def test_sum_of_squares_gradient():
    (g,) = _grad(lambda x: (x * x).sum(), Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_cross_entropy_gradient_is_p_minus_onehot():
    (g,) = _grad(lambda z: ad.cross_entropy(z, [0]), Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(g, [[-0.5, 0.5]], atol=1e-15)


def test_fd_check_on_linear_sum():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    assert finite_difference_check(lambda t: t.sum(), x) <= 1e-9


# -- errors ------------------------------------------------------------------


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as info:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_non_finite_leaf_rejected():
    with pytest.raises(ad.NonFiniteError):
        Tensor([1.0, np.nan])


def test_non_finite_result_rejected():
    x = Tensor([1e308, 1e308])
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError, match="scale"):
        ad.scale(x, 10.0)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x
    with pytest.raises(ad.BackwardError):
        backward(tape, y)


def test_backward_twice_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    backward(tape, y)
    with pytest.raises(ad.BackwardError):
        backward(tape, y)
    tape.reset()
    with tape:
        y = (x * x).sum()
    backward(tape, y)


def test_no_recording_without_tape():
    x = Tensor([1.0], requires_grad=True)
    y = x * x
    assert y.node is None


def test_unreached_leaf_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
        _ = z * z
    backward(tape, loss)
    np.testing.assert_array_equal(z.grad, [0.0])


def test_tape_parents_precede_children():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        ad.softmax(ad.gelu(x @ w)).sum()
    position = {id(n.out): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        for p in node.parents:
            if p.node is not None:
                assert position[id(p)] < i


# -- invariants --------------------------------------------------------------

_dims = st.integers(1, 8)


def _rand(rng, *shape):
    return rng.normal(size=shape)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), _dims, _dims)
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, n, k):
    rng = np.random.default_rng(seed)
    x = _rand(rng, n, k) * 5
    c = rng.normal() * 10
    y = ad.softmax(Tensor(x)).values
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)
    np.testing.assert_allclose(ad.softmax(Tensor(x + c)).values, y, atol=1e-12, rtol=0)


def test_fan_out_accumulates_exactly():
    rng = np.random.default_rng(3)
    x = Tensor(_rand(rng, 4, 5))
    w = Tensor(_rand(rng, 5, 3))

    def f(t):
        return ad.softmax(ad.gelu(t @ w)).mean()

    (g1,) = _grad(f, x)
    (g2,) = _grad(lambda t: ad.add(f(t), f(t)), x)
    np.testing.assert_array_equal(g2, 2 * g1)


# Each primitive is checked against central differences with h=1e-5.
# The loss is a fixed random projection of the output so every output entry matters.


def _project(out: Tensor, rng) -> Tensor:
    c = Tensor(rng.normal(size=out.shape))
    return ad.mul(out, c).sum()


_FD_TOL = 1e-4

PRIMITIVE_CASES = {
    "matmul_left": lambda rng, n, k, m: (lambda x: _project(ad.matmul(x, Tensor(_rand(rng, k, m))), rng), _rand(rng, n, k)),
    "matmul_right": lambda rng, n, k, m: (lambda x: _project(ad.matmul(Tensor(_rand(rng, n, k)), x), rng), _rand(rng, k, m)),
    "matmul_rowwise": lambda rng, n, k, m: (lambda x: _project(ad.matmul(x, Tensor(_rand(rng, k, m)), rowwise=True), rng), _rand(rng, n, k)),
    "transpose": lambda rng, n, k, m: (lambda x: _project(ad.transpose(x), rng), _rand(rng, n, k)),
    "add": lambda rng, n, k, m: (lambda x: _project(ad.add(x, Tensor(_rand(rng, n, k))), rng), _rand(rng, n, k)),
    "add_bias": lambda rng, n, k, m: (lambda b: _project(ad.add(Tensor(_rand(rng, n, k)), b), rng), _rand(rng, k)),
    "mul": lambda rng, n, k, m: (lambda x: _project(ad.mul(x, Tensor(_rand(rng, n, k))), rng), _rand(rng, n, k)),
    "mul_column": lambda rng, n, k, m: (lambda c: _project(ad.mul(Tensor(_rand(rng, n, k)), c), rng), _rand(rng, n, 1)),
    "scale": lambda rng, n, k, m: (lambda x: _project(ad.scale(x, 1.7), rng), _rand(rng, n, k)),
    "gelu": lambda rng, n, k, m: (lambda x: _project(ad.gelu(x), rng), _rand(rng, n, k) * 2),
    "layernorm_x": lambda rng, n, k, m: (
        lambda x: _project(ad.layernorm(x, Tensor(_rand(rng, k + 1)), Tensor(_rand(rng, k + 1))), rng),
        _rand(rng, n, k + 1),
    ),
    "layernorm_gain": lambda rng, n, k, m: (
        lambda g: _project(ad.layernorm(Tensor(_rand(rng, n, k + 1)), g, Tensor(_rand(rng, k + 1))), rng),
        _rand(rng, k + 1),
    ),
    "layernorm_bias": lambda rng, n, k, m: (
        lambda b: _project(ad.layernorm(Tensor(_rand(rng, n, k + 1)), Tensor(_rand(rng, k + 1)), b), rng),
        _rand(rng, k + 1),
    ),
    "softmax": lambda rng, n, k, m: (lambda x: _project(ad.softmax(x), rng), _rand(rng, n, k)),
    "embed_lookup": lambda rng, n, k, m: (
        lambda t: _project(ad.embed_lookup(t, rng.integers(0, m, size=n)), rng),
        _rand(rng, m, k),
    ),
    "concat": lambda rng, n, k, m: (lambda x: _project(ad.concat([x, Tensor(_rand(rng, n, m)), x], axis=1), rng), _rand(rng, n, k)),
    "narrow": lambda rng, n, k, m: (lambda x: _project(ad.narrow(x, 0, max(1, k // 2), axis=1), rng), _rand(rng, n, k)),
    "sum_axis": lambda rng, n, k, m: (lambda x: _project(ad.reduce_sum(x, axis=-1, keepdims=True), rng), _rand(rng, n, k)),
    "mean": lambda rng, n, k, m: (lambda x: ad.scale(ad.mean(x), 3.0), _rand(rng, n, k)),
    "mean_axis": lambda rng, n, k, m: (lambda x: _project(ad.mean(x, axis=0), rng), _rand(rng, n, k)),
    "cross_entropy": lambda rng, n, k, m: (
        lambda x: ad.cross_entropy(x, rng.integers(0, k + 1, size=n)),
        _rand(rng, n, k + 1),
    ),
}


@pytest.mark.parametrize("case", sorted(PRIMITIVE_CASES))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=_dims, k=_dims, m=_dims)
def test_primitive_gradients_match_finite_differences(case, seed, n, k, m):
    build = PRIMITIVE_CASES[case]
    # the closures draw their constants from rng on every call, so each
    # evaluation rebuilds the generator to replay the same draws
    _, x0 = build(np.random.default_rng(seed), n, k, m)

    def f_det(x):
        f, _ = build(np.random.default_rng(seed), n, k, m)
        return f(x)

    err = finite_difference_check(f_det, Tensor(x0), h=1e-5)
    assert err <= _FD_TOL, (case, err)
