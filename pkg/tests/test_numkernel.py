import numpy as np
import pytest

from app.backend.exceptions import ShapeError, StateError
from app.backend.kernel import numkernel as nk
from app.backend.kernel.numkernel import Tape


def conv_reference(x, kernel, bias):
    L, din = x.shape
    d = kernel.shape[1]
    out = np.zeros((L, d))
    for t in range(L):
        for j in range(d):
            acc = bias[j]
            for k, offset in enumerate((-1, 0, 1)):
                s = t + offset
                if 0 <= s < L:
                    for i in range(din):
                        acc += x[s, i] * kernel[k * din + i, j]
            out[t, j] = max(acc, 0.0)
    return out


def kink_free_conv_case(rng, L, din, d, margin=1e-3):
    for _ in range(200):
        x = rng.uniform(-2, 2, size=(L, din))
        kernel = rng.uniform(-2, 2, size=(3 * din, d))
        bias = rng.uniform(-2, 2, size=(1, d))
        _, pre = nk._conv_pre(x, kernel, bias)
        if np.min(np.abs(pre)) > margin:
            return x, kernel, bias
    raise AssertionError("no kink-free sample found")


class TestConv1d:
    def test_identity_center_kernel(self):
        kernel = np.zeros((6, 2))
        kernel[2:4] = np.eye(2)
        out = nk.conv1d(np.array([[1.0, -2.0], [3.0, 4.0]]), kernel, [0.0, 0.0])
        np.testing.assert_array_equal(out, [[1.0, 0.0], [3.0, 4.0]])

    def test_zero_input_keeps_clamped_bias(self):
        out = nk.conv1d(np.zeros((3, 2)), np.ones((6, 2)), [0.5, -0.5])
        np.testing.assert_array_equal(out, [[0.5, 0.0]] * 3)

    def test_matches_triple_loop(self, rng):
        x = rng.normal(size=(4, 2))
        kernel = rng.normal(size=(6, 3))
        bias = rng.normal(size=3)
        np.testing.assert_allclose(nk.conv1d(x, kernel, bias), conv_reference(x, kernel, bias), atol=1e-12)

    def test_identity_kernel_is_relu_of_input(self, rng):
        x = rng.normal(size=(7, 3))
        kernel = np.zeros((9, 3))
        kernel[3:6] = np.eye(3)
        np.testing.assert_array_equal(nk.conv1d(x, kernel, np.zeros(3)), np.maximum(x, 0.0))

    def test_kernel_rows_must_match_input(self):
        with pytest.raises(ShapeError):
            nk.conv1d(np.zeros((3, 2)), np.zeros((5, 2)), np.zeros(2))

    def test_pure(self, rng):
        x, kernel, bias = rng.normal(size=(5, 2)), rng.normal(size=(6, 4)), rng.normal(size=4)
        assert nk.conv1d(x, kernel, bias).tobytes() == nk.conv1d(x, kernel, bias).tobytes()


class TestSigmoid:
    def test_zero(self):
        assert nk.sigmoid(np.zeros((1, 1)))[0, 0] == 0.5

    def test_symmetry(self, rng):
        x = rng.normal(scale=5, size=(4, 6))
        np.testing.assert_allclose(nk.sigmoid(x) + nk.sigmoid(-x), 1.0, atol=1e-15)

    @pytest.mark.parametrize("value", [50.0, -50.0, 800.0, -800.0])
    def test_large_inputs_stay_open_interval(self, value):
        y = nk.sigmoid(np.full((1, 2), value))
        assert np.all(np.isfinite(y))
        assert np.all((y > 0.0) & (y < 1.0))


class TestSoftmax:
    def test_uniform_logits(self):
        np.testing.assert_allclose(nk.softmax_rows(np.ones((1, 4))), [[0.25] * 4])

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        np.testing.assert_allclose(nk.softmax_rows(x + 17.0), nk.softmax_rows(x), atol=1e-13)

    def test_large_logits(self):
        y = nk.softmax_rows(np.array([[1000.0, 1000.5]]))
        np.testing.assert_allclose(y, nk.softmax_rows(np.array([[0.0, 0.5]])), atol=1e-15)

    def test_rows_sum_to_one_on_random_cases(self, rng):
        for _ in range(10_000):
            rows, cols = rng.integers(1, 5), rng.integers(1, 9)
            y = nk.softmax_rows(rng.normal(scale=rng.uniform(0.1, 50), size=(rows, cols)))
            assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)


class TestPoolAndLoss:
    def test_weighted_pool_hand_case(self):
        out = nk.weighted_pool(np.array([[0.2, 0.6]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-7)

    def test_nll_floor(self):
        assert nk.nll(np.array([[0.0, 1.0]]), [0]) == pytest.approx(-np.log(nk.PROB_FLOOR))

    def test_nll_is_row_mean(self):
        p = np.array([[0.5, 0.5], [0.25, 0.75]])
        assert nk.nll(p, [0, 1]) == pytest.approx((np.log(2) - np.log(0.75)) / 2)


def scalar_loss(tape, node, weights):
    """Projects a node onto a fixed random direction so every entry gets a distinct gradient."""
    return tape.sum(tape.mul_const(node, weights))


OP_CASES = {
    "matmul": (lambda t, a, rng: t.matmul(a, t.constant(rng.normal(size=(4, 2)))), (3, 4)),
    "matmul_right": (lambda t, a, rng: t.matmul(t.constant(rng.normal(size=(2, 3))), a), (3, 4)),
    "transpose": (lambda t, a, rng: t.transpose(a), (3, 4)),
    "sigmoid": (lambda t, a, rng: t.sigmoid(a), (3, 4)),
    "softmax_rows": (lambda t, a, rng: t.softmax_rows(a), (3, 4)),
    "select_row": (lambda t, a, rng: t.select_row(a, 1), (3, 4)),
    "weighted_pool_h": (lambda t, a, rng: t.weighted_pool(t.constant(rng.uniform(0.1, 1, size=(1, 3))), a), (3, 4)),
}


class TestTapeGradients:
    @pytest.mark.parametrize("op", sorted(OP_CASES))
    def test_op_matches_finite_differences(self, op, numeric_grad, rel_err):
        build, shape = OP_CASES[op]
        x = np.random.default_rng(5).uniform(-2, 2, size=shape)

        def forward():
            tape = Tape()
            rng = np.random.default_rng(9)
            leaf = tape.leaf(x, "x")
            out = build(tape, leaf, rng)
            weights = rng.normal(size=out.shape)
            return tape, scalar_loss(tape, out, weights)

        tape, loss = forward()
        analytic = tape.backward(loss)["x"]
        numeric = numeric_grad(lambda: float(forward()[1].value[0, 0]), x)
        assert rel_err(analytic, numeric) < 1e-4

    def test_weighted_pool_weights(self, numeric_grad, rel_err):
        w = np.random.default_rng(3).uniform(0.1, 1.0, size=(1, 5))
        h = np.random.default_rng(4).normal(size=(5, 3))
        g = np.random.default_rng(6).normal(size=(1, 3))

        def forward():
            tape = Tape()
            leaf = tape.leaf(w, "w")
            return tape, scalar_loss(tape, tape.weighted_pool(leaf, tape.constant(h)), g)

        tape, loss = forward()
        numeric = numeric_grad(lambda: float(forward()[1].value[0, 0]), w)
        assert rel_err(tape.backward(loss)["w"], numeric) < 1e-4

    def test_small_weight_sum_is_still_a_mean(self):
        h = np.array([[1.0, -2.0]])
        np.testing.assert_allclose(nk.weighted_pool(np.array([[1e-4]]), h), h, rtol=1e-12)
        frames = np.array([[1.0, 4.0], [3.0, 0.0]])
        np.testing.assert_allclose(nk.weighted_pool(np.array([[1e-3, 3e-3]]), frames), [[2.5, 1.0]], rtol=1e-12)

    def test_small_weight_sum_gradient(self, numeric_grad, rel_err):
        w = np.array([[2e-3, 5e-4, 1e-3]])
        h = np.random.default_rng(8).normal(size=(3, 2))
        g = np.array([[0.7, -1.3]])

        def forward():
            tape = Tape()
            leaf = tape.leaf(w, "w")
            return tape, scalar_loss(tape, tape.weighted_pool(leaf, tape.constant(h)), g)

        tape, loss = forward()
        numeric = numeric_grad(lambda: float(forward()[1].value[0, 0]), w, 1e-8)
        assert rel_err(tape.backward(loss)["w"], numeric) < 1e-4

    def test_all_zero_weights_pool_to_zero(self):
        h = np.array([[1.0, 2.0], [3.0, 4.0]])
        g = np.array([[1.0, -1.0]])
        tape = Tape()
        leaf = tape.leaf(np.zeros((1, 2)), "w")
        out = tape.weighted_pool(leaf, tape.constant(h))
        np.testing.assert_array_equal(out.value, np.zeros((1, 2)))
        grads = tape.backward(tape.sum(tape.mul_const(out, g)))
        np.testing.assert_allclose(grads["w"], (g @ h.T) / nk.POOL_EPS)

    def test_conv1d_all_inputs(self, rng, numeric_grad, rel_err):
        x, kernel, bias = kink_free_conv_case(rng, 6, 3, 4)
        g = rng.normal(size=(6, 4))
        values = {"x": x, "kernel": kernel, "bias": bias}

        def forward():
            tape = Tape()
            leaves = {k: tape.leaf(v, k) for k, v in values.items()}
            out = tape.conv1d(leaves["x"], leaves["kernel"], leaves["bias"])
            return tape, scalar_loss(tape, out, g)

        tape, loss = forward()
        grads = tape.backward(loss)
        for name, value in values.items():
            numeric = numeric_grad(lambda: float(forward()[1].value[0, 0]), value)
            assert rel_err(grads[name], numeric) < 1e-4, name

    def test_nll_softmax_gives_p_minus_y(self):
        z = np.array([[0.1, 2.0, -0.5]])
        tape = Tape()
        leaf = tape.leaf(z, "z")
        p = tape.softmax_rows(leaf)
        grads = tape.backward(tape.nll(p, [1]))
        np.testing.assert_allclose(grads["z"], p.value - np.array([[0.0, 1.0, 0.0]]), atol=1e-12)

    def test_sum_of_params_gives_ones(self):
        tape = Tape()
        leaf = tape.leaf(np.arange(6.0).reshape(2, 3), "w")
        np.testing.assert_array_equal(tape.backward(tape.sum(leaf))["w"], np.ones((2, 3)))

    def test_gradients_accumulate_over_shared_leaf(self):
        tape = Tape()
        a = tape.leaf(np.array([[2.0]]), "a")
        loss = tape.add(tape.matmul(a, a), a)
        assert tape.backward(loss)["a"][0, 0] == pytest.approx(5.0)

    def test_ops_are_recorded_in_forward_order(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 2)), "a")
        tape.sum(tape.sigmoid(tape.transpose(a)))
        assert tape.ops == ["transpose", "sigmoid", "sum"]


class TestTapeMisuse:
    def test_backward_before_forward(self):
        tape = Tape()
        tape.leaf(np.ones((1, 1)), "a")
        with pytest.raises(StateError):
            tape.backward(tape.constant(np.ones((1, 1))))

    def test_backward_twice(self):
        tape = Tape()
        loss = tape.sum(tape.leaf(np.ones((2, 2)), "a"))
        tape.backward(loss)
        with pytest.raises(StateError):
            tape.backward(loss)

    def test_loss_must_be_scalar(self):
        tape = Tape()
        out = tape.sigmoid(tape.leaf(np.ones((2, 2)), "a"))
        with pytest.raises(ShapeError):
            tape.backward(out)

    def test_duplicate_leaf(self):
        tape = Tape()
        tape.leaf(np.ones((1, 1)), "a")
        with pytest.raises(StateError):
            tape.leaf(np.ones((1, 1)), "a")
