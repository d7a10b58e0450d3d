import numpy as np
import pytest

from plmarl import autodiff as ad
from plmarl.gradcheck import max_rel_error, numeric_grad


def check_unary(op, x, tol=1e-6, weight_seed=0):
    """Compare the gradient of sum(w * op(x)) with finite differences."""
    w = np.random.default_rng(weight_seed).normal(size=np.shape(op(ad.Tensor(x)).data))
    t = ad.Tensor(x, requires_grad=True)
    (ad.Tensor(w) * op(t)).sum().backward()
    fd = numeric_grad(lambda: float(np.sum(w * op(ad.Tensor(x)).data)), x)
    assert max_rel_error(t.grad, fd) < tol


def check_binary(op, x, y, tol=1e-6):
    out_shape = np.shape(op(ad.Tensor(x), ad.Tensor(y)).data)
    w = np.random.default_rng(1).normal(size=out_shape)
    tx, ty = ad.Tensor(x, requires_grad=True), ad.Tensor(y, requires_grad=True)
    (ad.Tensor(w) * op(tx, ty)).sum().backward()
    f = lambda: float(np.sum(w * op(ad.Tensor(x), ad.Tensor(y)).data))  # noqa: E731
    assert max_rel_error(tx.grad, numeric_grad(f, x)) < tol
    assert max_rel_error(ty.grad, numeric_grad(f, y)) < tol


rng = np.random.default_rng(0)


@pytest.mark.parametrize(
    "name,op",
    [
        ("exp", ad.exp),
        ("tanh", ad.tanh),
        ("gelu", ad.gelu),
        ("neg", ad.neg),
        ("square", lambda t: t ** 2),
        ("softmax", lambda t: ad.softmax(t, axis=-1)),
        ("log_softmax", lambda t: ad.log_softmax(t, axis=-1)),
        ("sum_axis", lambda t: ad.sum_(t, axis=1)),
        ("mean_keep", lambda t: ad.mean(t, axis=0, keepdims=True)),
        ("reshape", lambda t: ad.reshape(t, (4, 3))),
        ("transpose", lambda t: ad.transpose(t, (1, 0))),
        ("getitem", lambda t: t[1:, ::2]),
        ("clip", lambda t: ad.clip(t, -0.5, 0.5)),
    ],
)
def test_unary_ops(name, op):
    x = rng.normal(size=(3, 4))
    if name == "clip":
        # keep clear of the kinks at +-0.5
        x = np.array([[-1.2, -0.3, 0.1, 0.2], [0.4, 0.9, -0.7, 0.0], [1.5, -0.1, 0.3, -2.0]])
    check_unary(op, x)


def test_log():
    check_unary(ad.log, rng.uniform(0.5, 2.0, size=(5,)))


@pytest.mark.parametrize(
    "op,xs,ys",
    [
        (ad.add, (3, 4), (4,)),
        (ad.sub, (3, 1), (1, 4)),
        (ad.mul, (2, 3, 4), (3, 4)),
        (ad.div, (3, 4), (3, 4)),
        (ad.matmul, (3, 4), (4, 5)),
        (ad.matmul, (2, 3, 4), (4, 2)),
        (ad.matmul, (2, 3, 4), (2, 4, 5)),
    ],
)
def test_binary_ops(op, xs, ys):
    x = rng.normal(size=xs)
    y = rng.normal(size=ys)
    if op is ad.div:
        y = np.abs(y) + 0.5
    check_binary(op, x, y)


def test_minimum_routes_gradient():
    a = ad.Tensor(np.array([1.0, 3.0, 2.0]), requires_grad=True)
    b = ad.Tensor(np.array([2.0, 1.0, 2.0]), requires_grad=True)
    ad.minimum(a, b).sum().backward()
    assert a.grad.tolist() == [1.0, 0.0, 1.0]
    assert b.grad.tolist() == [0.0, 1.0, 0.0]


def test_layer_norm():
    x = rng.normal(size=(2, 3, 5))
    g = rng.normal(size=5)
    b = rng.normal(size=5)
    check_unary(lambda t: ad.layer_norm(t, g, b), x)
    check_binary(lambda tg, tb: ad.layer_norm(x, tg, tb), g, b)


def test_masked_softmax_zeroes_and_grad():
    x = rng.normal(size=(4, 4))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    out = ad.softmax(ad.Tensor(x), mask=mask).data
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    check_unary(lambda t: ad.softmax(t, mask=mask), x)


def test_take_along_axis_and_embedding():
    x = rng.normal(size=(3, 4, 2))
    idx = np.array([[3, 0, 1, 2], [1, 2, 3, 0], [0, 1, 2, 3]])[..., None]
    check_unary(lambda t: ad.take_along_axis(t, np.broadcast_to(idx, (3, 4, 2)), axis=1), x)
    w = rng.normal(size=(5, 3))
    ids = np.array([[0, 0, 4], [2, 4, 4]])
    check_unary(lambda t: ad.embedding(t, ids), w)


def test_concat():
    check_binary(lambda a, b: ad.concat([a, b], axis=1), rng.normal(size=(2, 3)), rng.normal(size=(2, 2)))


def test_shared_subexpression_accumulates():
    x = ad.Tensor(np.array(3.0), requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == pytest.approx(7.0)


def test_non_scalar_backward_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad and y._parents == ()


def test_function_wrapper():
    sq = ad.function(lambda x: x ** 3, lambda x, y, g: 3 * x ** 2 * g)
    check_unary(sq, rng.normal(size=(4,)))


def test_float32_preserved():
    x = ad.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = (x * 2.0 + 1.0).sum()
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32
