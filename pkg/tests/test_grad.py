import numpy as np
import pytest

from snri_lab import grad as G
from snri_lab.errors import NonFiniteValue, NonScalarLoss, ShapeMismatch, SpentGraph
from snri_lab.gradsuite import check_primitives


def test_sigmoid_value_and_slope():
    x = G.parameter(np.array(0.0))
    y = G.sigmoid(x)
    assert y.item() == 0.5
    assert G.backward(y)[x] == pytest.approx(0.25, abs=1e-15)


def test_concat_shape_rule():
    a, b = G.constant(np.zeros((5, 4))), G.constant(np.ones((5, 1)))
    assert G.concat([a, b], axis=-1).shape == (5, 5)


def test_matmul_square_gradient_matches_analytic():
    rng = np.random.default_rng(0)
    w = G.parameter(rng.standard_normal((3, 4)))
    x = rng.standard_normal((4, 2))
    g = G.backward(G.sum_(G.square(G.matmul(w, G.constant(x)))))[w]
    np.testing.assert_allclose(g, 2 * (w.value @ x) @ x.T, rtol=0, atol=1e-10)


@pytest.mark.parametrize("result", check_primitives(seed=0), ids=lambda r: r.name)
def test_primitive_gradients(result):
    assert result.passed, f"{result.name}: {result.max_rel_error}"


def test_stop_gradient_barrier():
    p = G.parameter(np.array([1.5, -2.0]))
    assert np.array_equal(G.stop_gradient(p).value, p.value)
    g = G.backward(G.sum_(G.square(G.stop_gradient(p))), [p])[p]
    assert np.array_equal(g, np.zeros(2))
    g = G.backward(G.sum_(G.add(G.square(p), G.square(G.stop_gradient(p)))), [p])[p]
    assert np.array_equal(g, 2 * p.value)


def test_disconnected_parameter_gets_zero():
    a, b = G.parameter(np.ones(3)), G.parameter(np.ones(2))
    g = G.backward(G.sum_(G.square(a)), [a, b])
    assert np.array_equal(g[b], np.zeros(2))


def test_diamond_accumulates():
    x = G.parameter(np.array([0.7, -1.1]))
    y = G.add(G.mul(x, 3.0), G.square(x))
    g = G.backward(G.sum_(y))[x]
    np.testing.assert_allclose(g, 3.0 + 2 * x.value, atol=1e-15)


def test_second_backward_is_an_error():
    x = G.parameter(np.ones(2))
    loss = G.sum_(G.square(x))
    G.backward(loss)
    with pytest.raises(SpentGraph):
        G.backward(loss)


def test_contract_errors():
    with pytest.raises(NonScalarLoss):
        G.backward(G.square(G.parameter(np.ones(2))))
    with pytest.raises(ShapeMismatch):
        G.add(G.constant(np.ones((2, 3))), G.constant(np.ones((3,))))
    with pytest.raises(NonFiniteValue):
        G.log(G.constant(np.array([0.0, 1.0])))


def test_backward_is_deterministic():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 16, 3))
    w = G.parameter(rng.standard_normal((3, 3, 4)))
    grads = [G.backward(G.sum_(G.square(G.conv1d(G.constant(x), w, dilation=2))))[w]
             for _ in range(2)]
    assert grads[0].tobytes() == grads[1].tobytes()


def test_adam_zero_gradient_and_descent():
    p = G.parameter(np.array([1.0, -1.0]))
    st = G.AdamState(learning_rate=0.1)
    G.adam_step({"p": p}, {"p": np.zeros(2)}, st)
    assert st.step == 1 and np.array_equal(p.value, [1.0, -1.0])
    for _ in range(10):
        G.adam_step({"p": p}, {"p": np.array([1.0, -1.0])}, st)
    assert p.value[0] < 1.0 and p.value[1] > -1.0
    with pytest.raises(ShapeMismatch):
        G.adam_step({"p": p}, {"p": np.zeros(3)}, st)


def test_adam_quadratic_bowl():
    theta = G.parameter(np.array(1.0))
    st = G.AdamState(learning_rate=1e-2)
    for _ in range(5000):
        g = G.backward(G.square(theta))[theta]
        G.adam_step({"t": theta}, {"t": g}, st)
    assert abs(theta.item()) < 1e-3


def test_grad_check_flags_a_corrupted_backward(monkeypatch):
    real = G.mul

    def bad_mul(a, b):
        out = real(a, b)
        inner = out._backward
        out._backward = lambda g: tuple(2.0 * gi for gi in inner(g))
        return out

    monkeypatch.setattr(G, "mul", bad_mul)
    a = G.parameter(np.array([1.0, 2.0]))
    b = G.parameter(np.array([3.0, -1.0]))
    rep = G.grad_check(lambda: G.sum_(G.mul(a, b)), {"a": a, "b": b})
    assert not rep.passed
