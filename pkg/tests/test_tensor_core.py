import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gradcheck
from rocl import tensor_core as tc


def test_docstring_example():
    g = tc.Graph()
    x = g.leaf("x")
    loss = (x * x).sum()
    grads = tc.grad(g, loss, ["x"], {"x": np.array([1.0, 2.0, 3.0])})
    np.testing.assert_allclose(grads["x"], [2.0, 4.0, 6.0])


@pytest.mark.parametrize("name", sorted(gradcheck.PRIMITIVE_CASES))
def test_primitive_gradients_f64(name):
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    for _ in range(10):
        assert gradcheck.check_case(gradcheck.PRIMITIVE_CASES[name](rng), "float64") < 1e-6


def test_every_primitive_has_a_gradient_case():
    assert set(tc.PRIMITIVES) - {"leaf"} == set(gradcheck.PRIMITIVE_CASES)


def test_forward_matches_numpy_reference(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    g = tc.Graph()
    va, vb = g.leaf("a"), g.leaf("b")
    out = ((va @ vb).exp() + 1.0).log().max(axis=1)
    with tc.precision("float64"):
        got = tc.forward(g, {"a": a, "b": b}, [out])[out.id]
    np.testing.assert_allclose(got, np.log(np.exp(a @ b) + 1).max(axis=1), rtol=1e-12)


def test_conv2d_matches_direct_loop(rng):
    x, w = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))
    g = tc.Graph()
    out = g.conv2d(g.leaf("x"), g.leaf("w"), stride=2, padding=1)
    with tc.precision("float64"):
        got = tc.forward(g, {"x": x, "w": w}, [out])[out.id]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for f in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, f, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[f])
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_batch_norm_train_and_eval(rng):
    x = rng.standard_normal((6, 2)) * 3 + 1
    g = tc.Graph()
    out = g.batch_norm(g.leaf("x"), g.leaf("g"), g.leaf("b"), g.leaf("m"), g.leaf("v"), name="bn0")
    bind = {"x": x, "g": np.ones(2), "b": np.zeros(2), "m": np.zeros(2), "v": np.ones(2)}
    with tc.precision("float64"):
        ev = tc.evaluate(g, bind, [out], mode="train")
        np.testing.assert_allclose(ev[out].mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(ev[out].var(axis=0), 1, rtol=1e-4)
        np.testing.assert_allclose(ev.bn_stats["bn0"][0], x.mean(axis=0))
        plain = tc.forward(g, bind, [out], mode="eval")[out.id]
    np.testing.assert_allclose(plain, x / np.sqrt(1 + 1e-5), rtol=1e-10)


def test_relu_gradient_at_zero_is_zero():
    g = tc.Graph()
    x = g.leaf("x")
    grads = tc.grad(g, x.relu().sum(), ["x"], {"x": np.zeros(3)})
    np.testing.assert_array_equal(grads["x"], 0)


def test_max_ties_route_gradient_to_first():
    g = tc.Graph()
    x = g.leaf("x")
    grads = tc.grad(g, x.max(), ["x"], {"x": np.array([1.0, 3.0, 3.0])})
    np.testing.assert_array_equal(grads["x"], [0, 1, 0])


def test_shared_subexpression_accumulates():
    g = tc.Graph()
    x = g.leaf("x")
    y = x * 2.0
    grads = tc.grad(g, (y * y + y).sum(), ["x"], {"x": np.array([1.0, -1.0])})
    np.testing.assert_allclose(grads["x"], 8 * np.array([1.0, -1.0]) + 2)


def test_unused_leaf_gets_zero_gradient():
    g = tc.Graph()
    x, unused = g.leaf("x"), g.leaf("u")
    grads = tc.grad(g, x.sum(), ["x", "u"], {"x": np.ones(2), "u": np.ones((3, 1))})
    np.testing.assert_array_equal(grads["u"], np.zeros((3, 1)))


def test_errors():
    g = tc.Graph()
    x = g.leaf("x")
    with pytest.raises(tc.GraphError):
        g.leaf("x")
    with pytest.raises(tc.UnboundLeafError):
        tc.forward(g, {}, [x.exp()])
    with pytest.raises(tc.ShapeError):
        tc.forward(g, {"x": np.ones((2, 3))}, [x @ np.ones((2, 2))])
    with pytest.raises(tc.ShapeError):
        tc.grad(g, x * 2.0, ["x"], {"x": np.ones(3)})
    with pytest.raises(tc.GraphError):
        g.apply("softmax", x)
    with pytest.raises(ValueError):
        tc.set_precision("float16")


@pytest.mark.parametrize("expr, value", [
    (lambda x: x.log(), -1.0),
    (lambda x: x.sqrt(), -1.0),
    (lambda x: x.exp(), 1e4),
    (lambda x: x ** -1.0, 0.0),
])
def test_non_finite_values_raise(expr, value):
    g = tc.Graph()
    out = expr(g.leaf("x"))
    with pytest.raises(tc.NonFiniteError) as info:
        tc.forward(g, {"x": np.array([value])}, [out])
    assert info.value.node_id == out.id


def test_l2_normalize_zero_vector_raises():
    g = tc.Graph()
    out = g.l2_normalize(g.leaf("x"))
    with pytest.raises(tc.NonFiniteError):
        tc.forward(g, {"x": np.zeros((1, 3))}, [out])


def test_precision_context_is_thread_local():
    seen = {}

    def other():
        seen["dtype"] = tc.get_dtype()

    with tc.precision("float64"):
        assert tc.get_dtype() is np.float64
        t = threading.Thread(target=other)
        t.start()
        t.join()
    assert seen["dtype"] is np.float32
    assert tc.get_dtype() is np.float32


def test_outputs_follow_precision():
    g = tc.Graph()
    out = g.leaf("x") * 2.0
    assert tc.forward(g, {"x": np.ones(2)}, [out])[out.id].dtype == np.float32
    with tc.precision("float64"):
        assert tc.forward(g, {"x": np.ones(2)}, [out])[out.id].dtype == np.float64


def test_evaluation_does_not_mutate_graph():
    g, out = tc.trace(lambda a, b: (a * b).sum(), ["a", "b"])
    n = len(g)
    tc.grad(g, out, ["a"], {"a": np.ones(3), "b": np.arange(3.0)})
    assert len(g) == n


def test_finite_difference_validates_step():
    g, out = tc.trace(lambda a: (a * a).sum(), ["a"])
    with pytest.raises(ValueError):
        tc.finite_difference(g, out, ["a"], {"a": np.ones(2)}, h=0)
    with tc.precision("float64"):
        fd = tc.finite_difference(g, out, ["a"], {"a": np.array([1.0, 2.0])}, h=1e-4)
    np.testing.assert_allclose(fd["a"], [2.0, 4.0], rtol=1e-8)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_sum_of_squares_gradient_property(x):
    g, out = tc.trace(lambda a: (a * a).sum(), ["a"])
    with tc.precision("float64"):
        np.testing.assert_allclose(tc.grad(g, out, ["a"], {"a": x})["a"], 2 * x, rtol=1e-12)


@given(st.integers(0, 2 ** 31))
def test_transpose_reshape_roundtrip_property(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 3, 4))
    axes = tuple(int(i) for i in r.permutation(3))
    g = tc.Graph()
    v = g.leaf("x")
    out = v.transpose(axes).transpose(tuple(np.argsort(axes))).reshape(6, 4)
    with tc.precision("float64"):
        np.testing.assert_array_equal(tc.forward(g, {"x": x}, [out])[out.id], x.reshape(6, 4))
