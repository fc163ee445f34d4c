import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpcasr import autodiff as ad
from cpcasr.autodiff import AdamState, Graph, adam_step, check_gradients, corrupt_adjoint
from cpcasr.errors import NonScalarLoss, ShapeMismatch
from cpcasr.gradcheck import primitive_cases


def test_log_softmax_uniform():
    g = Graph()
    out = ad.log_softmax(g.const([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.value, -np.log(3.0) * np.ones(3), rtol=0, atol=1e-15)


def test_conv_length_example():
    g = Graph()
    out = ad.conv1d(g.const(np.ones((1, 16, 1))), g.const(np.ones((1, 1, 4))), stride=2)
    assert out.shape == (1, 7, 1)
    assert ad.conv1d_length(16, 4, 2) == 7


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(2, 11, 3)), rng.normal(size=(4, 3, 3))
    g = Graph()
    out = ad.conv1d(g.const(x), g.const(w), stride=2).value
    for b in range(2):
        for t in range(out.shape[1]):
            for o in range(4):
                expected = sum(w[o, c, j] * x[b, 2 * t + j, c] for c in range(3) for j in range(3))
                assert out[b, t, o] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(length=st.integers(1, 60), kernel=st.integers(1, 12), stride=st.integers(1, 6))
def test_conv_length_property(length, kernel, stride):
    if length < kernel:
        return
    g = Graph()
    out = ad.conv1d(g.const(np.zeros((1, length, 1))), g.const(np.zeros((1, 1, kernel))), stride)
    assert out.shape[1] == (length - kernel) // stride + 1 == ad.conv1d_length(length, kernel, stride)


def test_matmul_shape_mismatch():
    g = Graph()
    with pytest.raises(ShapeMismatch):
        ad.matmul(g.const(np.ones((2, 3))), g.const(np.ones((4, 5))))


def test_add_shape_mismatch():
    g = Graph()
    with pytest.raises(ShapeMismatch):
        ad.add(g.const(np.ones(3)), g.const(np.ones(4)))


def test_square_sum_gradient():
    g = Graph()
    w = g.param("w", [1.0, 2.0, 3.0])
    grads = g.backward(ad.sum_(w * w))
    np.testing.assert_array_equal(grads["w"], [2.0, 4.0, 6.0])


def test_log_softmax_nll_gradient():
    wv = np.array([0.3, -1.2, 2.0, 0.5])
    g = Graph()
    w = g.param("w", wv)
    grads = g.backward(ad.log_softmax(w)[2])
    soft = np.exp(wv) / np.exp(wv).sum()
    np.testing.assert_allclose(grads["w"], np.eye(4)[2] - soft, atol=1e-15)
    assert abs(grads["w"].sum()) < 1e-15


def test_nll_gradient_sums_to_zero_per_row():
    rng = np.random.default_rng(5)
    g = Graph()
    w = g.param("w", rng.normal(size=(6, 5)))
    targets = rng.integers(0, 5, size=6)
    loss = -ad.sum_(ad.take(ad.reshape(ad.log_softmax(w), (30,)), np.arange(6) * 5 + targets))
    grads = g.backward(loss)
    np.testing.assert_allclose(grads["w"].sum(axis=1), 0.0, atol=1e-14)


def test_non_scalar_loss():
    g = Graph()
    w = g.param("w", [1.0, 2.0])
    with pytest.raises(NonScalarLoss):
        g.backward(w * 2.0)


def test_unused_param_gets_zero_gradient():
    g = Graph()
    a = g.param("a", [1.0, 2.0])
    g.param("b", np.ones((2, 2)))
    grads = g.backward(ad.sum_(a))
    np.testing.assert_array_equal(grads["b"], np.zeros((2, 2)))


def test_shared_node_accumulates():
    g = Graph()
    w = g.param("w", [3.0])
    y = w * w
    grads = g.backward(ad.sum_(y + y))
    assert grads["w"][0] == 12.0


def test_backward_is_bit_identical():
    rng = np.random.default_rng(9)
    wv = rng.normal(size=(5, 3))

    def run():
        g = Graph()
        w = g.param("w", wv)
        h = ad.tanh(ad.matmul(g.const(np.ones((4, 5))), w))
        return g.backward(ad.mean(ad.log_softmax(h)))["w"]

    assert run().tobytes() == run().tobytes()


def test_quadratic_check_is_tight():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    report = check_gradients(lambda p: ad.sum_(ad.matmul(p["x"], a) * p["x"]), {"x": rng.normal(size=(3, 4))})
    assert report.max_rel_err < 1e-9
    assert report.n_coords == 12


@pytest.mark.parametrize("name", sorted(primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients(name):
    build, params = primitive_cases(np.random.default_rng(0))[name]
    assert check_gradients(build, params).passed


def test_fault_injection_is_caught():
    rng = np.random.default_rng(1)
    params = {"x": rng.normal(size=(3, 4))}

    def build(p):
        return ad.sum_(ad.tanh(p["x"]))

    assert check_gradients(build, params).passed
    with corrupt_adjoint("tanh"):
        assert not check_gradients(build, params).passed
    assert check_gradients(build, params).passed


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(p, {"w": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.t == 1

    def test_first_step_is_lr_times_sign(self):
        p = {"w": np.zeros(3)}
        new, _ = adam_step(p, {"w": np.array([0.5, -3.0, 1e-2])}, AdamState(lr=1e-3))
        np.testing.assert_allclose(new["w"], -1e-3 * np.array([1.0, -1.0, 1.0]), rtol=1e-5)

    def test_deterministic_and_pure(self):
        p = {"w": np.array([1.0, 2.0])}
        grads = {"w": np.array([0.1, -0.4])}
        s0 = AdamState()
        a, sa = adam_step(p, grads, s0)
        b, sb = adam_step(p, grads, s0)
        assert a["w"].tobytes() == b["w"].tobytes()
        assert sa.m["w"].tobytes() == sb.m["w"].tobytes()
        assert s0.t == 0 and not s0.m
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
        with pytest.raises(ShapeMismatch):
            adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState())

    def test_minimises_quadratic(self):
        p = {"w": np.array([3.0, -2.0])}
        state = AdamState(lr=0.1)
        for _ in range(300):
            p, state = adam_step(p, {"w": 2 * p["w"]}, state)
        assert np.all(np.abs(p["w"]) < 0.05)
