import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from tip import diffeng as ad
from tip.core import ShapeMismatch


def grads_of(fn, **arrays):
    tape = ad.Tape()
    P = tape.params(arrays)
    return ad.backward(tape, fn(P))


class TestPrimitives:
    def test_sigmoid_zero(self):
        assert ad.sigmoid(np.array(0.0)).data == 0.5

    def test_softmax_equal_logits(self):
        y = ad.softmax(np.full(3, 2.5)).data
        assert np.allclose(y, 1 / 3, atol=1e-15)

    def test_square_derivative(self):
        g = grads_of(lambda P: ad.sum_(P["x"] * P["x"]), x=np.array([3.0]))
        assert g["x"][0] == 6.0

    def test_softmax_extreme_logits_stable(self):
        y = ad.softmax(np.array([1000.0, 0.0, -1000.0])).data
        assert np.isfinite(y).all() and abs(y[0] - 1.0) < 1e-12

    def test_log_domain(self):
        with pytest.raises(ad.DomainError):
            ad.log(np.array([1.0, 0.0]))

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(np.zeros(3), np.zeros(4))

    def test_matmul_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_relu_subgradient_at_zero(self):
        g = grads_of(lambda P: ad.sum_(ad.relu(P["x"])), x=np.array([-1.0, 0.0, 2.0]))
        assert np.array_equal(g["x"], [0.0, 0.0, 1.0])

    def test_max_axis_routes_to_first(self):
        g = grads_of(lambda P: ad.sum_(ad.max_axis(P["x"])), x=np.array([[1.0, 5.0, 5.0]]))
        assert np.array_equal(g["x"], [[0.0, 1.0, 0.0]])

    def test_mask_select(self):
        m = np.array([True, False, True])
        g = grads_of(lambda P: ad.sum_(ad.where(m, P["x"], 0.0)), x=np.ones(3))
        assert np.array_equal(g["x"], m.astype(float))

    def test_dropout_inverted_scaling(self):
        rng = np.random.default_rng(0)
        x = np.ones(200_000)
        y = ad.dropout(x, 0.1, rng, True).data
        kept = y[y > 0]
        assert np.allclose(kept, 1 / 0.9)
        assert abs(y.mean() - 1.0) < 0.01
        assert ad.dropout(x, 0.1, rng, False).data is x or np.array_equal(ad.dropout(x, 0.1, rng, False).data, x)

    def test_slice_and_concat_backward(self):
        def f(P):
            c = ad.concat([P["a"], P["b"]], axis=0)
            return ad.sum_(c[1:3] * np.array([2.0, 3.0]))
        g = grads_of(f, a=np.zeros(2), b=np.zeros(2))
        assert np.array_equal(g["a"], [0.0, 2.0]) and np.array_equal(g["b"], [3.0, 0.0])


class TestBackward:
    def test_sum_gives_ones(self):
        g = grads_of(lambda P: ad.sum_(P["w"]), w=np.arange(6.0).reshape(2, 3))
        assert np.array_equal(g["w"], np.ones((2, 3)))

    def test_detached_parameter_zero(self):
        g = grads_of(lambda P: ad.sum_(P["a"]), a=np.ones(2), b=np.ones(3))
        assert np.array_equal(g["b"], np.zeros(3))

    def test_fan_out_accumulates(self):
        g = grads_of(lambda P: ad.sum_(P["x"] + P["x"] * 2.0), x=np.ones(3))
        assert np.array_equal(g["x"], np.full(3, 3.0))

    def test_not_scalar(self):
        tape = ad.Tape()
        P = tape.params({"x": np.ones(3)})
        with pytest.raises(ad.NotScalarOutput):
            ad.backward(tape, P["x"] * 2.0)

    def test_two_layer_network_vs_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 3))
        params = {"w1": rng.normal(size=(3, 4)), "b1": rng.normal(size=4),
                  "w2": rng.normal(size=(4, 2)), "b2": rng.normal(size=2)}

        def f(tape, P):
            h = ad.tanh(x @ P["w1"] + P["b1"])
            out = ad.softmax(h @ P["w2"] + P["b2"])
            return ad.sum_(ad.log(out[:, 0]))

        assert ad.grad_check(f, params, eps=1e-5) < 1e-4

    def test_tape_is_topological(self):
        tape = ad.Tape()
        P = tape.params({"x": np.ones(2)})
        ad.sum_(ad.exp(P["x"]) * ad.tanh(P["x"]))
        for i, (_, parents, _) in enumerate(tape.nodes):
            assert all(p < i for p in parents)


class TestGradCheck:
    def test_quadratic(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        assert ad.grad_check(lambda t, P: ad.sum_(P["x"] * (P["x"] @ A)), {"x": np.array([[0.3, -1.2]])}) < 1e-8

    def test_constant(self):
        assert ad.grad_check(lambda t, P: ad.sum_(ad.mul(P["x"], 0.0)) + 1.0, {"x": np.ones(3)}) == 0.0

    def test_detects_wrong_gradient(self):
        def f(tape, P):
            x = P["x"]
            # forward value x^2 but a deliberately wrong backward rule
            bad = ad._result("bad", x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,))
            return ad.sum_(bad)
        assert ad.grad_check(f, {"x": np.array([1.0, 2.0])}) > 0.1


def adam_reference(x, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return x


class TestAdam:
    def test_zero_gradient_fresh_state(self):
        p, s = ad.adam_step({"x": np.array([1.0])}, {"x": np.array([0.0])}, ad.AdamState(), lr=0.1)
        assert p["x"][0] == 1.0 and s.m["x"][0] == 0.0 and s.v["x"][0] == 0.0

    def test_zero_gradient_moments_decay(self):
        state = ad.AdamState(3, {"x": np.array([0.5])}, {"x": np.array([0.2])})
        _, s = ad.adam_step({"x": np.array([1.0])}, {"x": np.array([0.0])}, state, lr=0.1)
        assert s.m["x"][0] == 0.9 * 0.5 and s.v["x"][0] == 0.999 * 0.2 and s.step == 4

    def test_first_step_is_sign(self):
        g = np.array([3.0, -0.01, 250.0])
        p, s = ad.adam_step({"x": np.zeros(3)}, {"x": g}, ad.AdamState(), lr=0.01)
        assert np.allclose(p["x"], -0.01 * np.sign(g), rtol=1e-6)
        assert s.step == 1

    def test_quadratic_converges_like_reference(self):
        params, state = {"x": np.array([1.0])}, ad.AdamState()
        for _ in range(100):
            params, state = ad.adam_step(params, {"x": 2 * params["x"]}, state, lr=0.1)
        ref = adam_reference(1.0, lambda x: 2 * x, 100, 0.1)
        assert abs(params["x"][0]) < 0.1
        assert abs(params["x"][0] - ref) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.adam_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, ad.AdamState())


# ---------------------------------------------------------------------------
# properties

vec = hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50))


@pytest.mark.criterion(9)
@given(vec, st.floats(-1e3, 1e3))
def test_softmax_normalized_and_shift_invariant(v, c):
    y = ad.softmax(v).data
    assert abs(y.sum() - 1.0) < 1e-9
    assert np.allclose(ad.softmax(v + c).data, y, atol=1e-9, rtol=0)


@pytest.mark.criterion(9)
@given(hnp.arrays(np.float64, st.integers(1, 10), elements=st.integers(-3, 3).map(float)))
def test_min_routes_gradient_to_earliest_argmin(v):
    g = grads_of(lambda P: ad.min_axis(P["x"]) * 1.0, x=v)["x"]
    expected = np.zeros_like(v)
    expected[int(np.flatnonzero(v == v.min())[0])] = 1.0
    assert np.array_equal(g, expected)


@pytest.mark.criterion(9)
@given(st.integers(0, 2**32 - 1))
def test_random_composite_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    params = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}

    def f(tape, P):
        z = ad.sigmoid(x @ P["w"] + P["b"])
        d = ad.norm(z - 0.3, axis=-1)
        return ad.mean(ad.exp(ad.mul(d, -1.0))) + ad.sum_(ad.min_axis(z, axis=0))

    assert ad.grad_check(f, params) < 1e-4
