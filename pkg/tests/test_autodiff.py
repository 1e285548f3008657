import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from imslearn.autodiff import Tape, gradient_check, register_custom


def test_softmax_ce_zero_logits_two_classes():
    # Uniform softmax, true class 0: per-sample loss log(2), gradient (-1/2, 1/2).
    tape = Tape()
    logits = tape.input(np.zeros((1, 2)))
    loss = tape.sum(tape.softmax_cross_entropy(logits, np.array([0])))
    assert loss.item() == pytest.approx(np.log(2.0))
    tape.backward(loss)
    assert np.allclose(logits.adjoint, [[-0.5, 0.5]])


def test_softmax_ce_matches_direct_formula():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 3))
    y = np.array([0, 2, 1, 1, 0])
    tape = Tape()
    node = tape.softmax_cross_entropy(tape.input(z), y)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert np.allclose(node.value, -np.log(p[np.arange(5), y]))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-30, 30)),
    st.floats(-50, 50),
)
def test_softmax_ce_invariant_to_logit_shift(z, c):
    y = np.array([1, 3, 0])
    t1, t2 = Tape(), Tape()
    a = t1.softmax_cross_entropy(t1.input(z), y)
    b = t2.softmax_cross_entropy(t2.input(z + c), y)
    assert np.allclose(a.value, b.value, atol=1e-9)


class TestPrimitiveGradients:
    """Every primitive against the central-difference oracle."""

    def check(self, build, params, tol=1e-6):
        report = gradient_check(build, params, step=1e-5, tolerance=tol)
        assert report.passed, f"rel errors {report.per_input}"

    def test_matmul(self):
        rng = np.random.default_rng(1)
        self.check(
            lambda t, n: t.sum(t.matmul(n["a"], n["b"])),
            {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))},
        )

    def test_add_with_bias_broadcast(self):
        rng = np.random.default_rng(2)
        self.check(
            lambda t, n: t.sum(t.square(t.add(n["x"], n["b"]))),
            {"x": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)},
        )

    def test_tanh(self):
        rng = np.random.default_rng(3)
        self.check(
            lambda t, n: t.sum(t.tanh(n["x"])),
            {"x": rng.standard_normal((3, 3))},
        )

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 4))
        x[np.abs(x) < 0.1] = 0.5
        self.check(lambda t, n: t.sum(t.relu(n["x"])), {"x": x})

    def test_scale_square_weighted_sum(self):
        rng = np.random.default_rng(5)
        w = rng.random((3, 2))
        self.check(
            lambda t, n: t.sum(t.square(t.scale(n["x"], 2.5)), weights=w),
            {"x": rng.standard_normal((3, 2))},
        )

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(6)
        y = np.array([0, 1, 2, 1])
        w = np.full(4, 0.25)
        self.check(
            lambda t, n: t.sum(t.softmax_cross_entropy(n["z"], y), weights=w),
            {"z": rng.standard_normal((4, 3))},
        )

    def test_two_layer_composite(self):
        rng = np.random.default_rng(7)
        y = np.array([0, 1, 0, 1, 1])
        params = {
            "w1": rng.standard_normal((3, 4)) * 0.5,
            "b1": rng.standard_normal(4) * 0.1,
            "w2": rng.standard_normal((4, 2)) * 0.5,
        }
        x = rng.standard_normal((5, 3))

        def build(t, n):
            h = t.tanh(t.add(t.matmul(t.input(x), n["w1"]), n["b1"]))
            logits = t.matmul(h, n["w2"])
            return t.sum(t.softmax_cross_entropy(logits, y), weights=np.full(5, 0.2))

        self.check(build, params)


class TestCustomOps:
    def test_quadratic_custom_op(self):
        op = register_custom(
            forward=lambda m: float((m**2).sum()),
            backward=lambda m: 2.0 * m,
            name="sumsq",
        )
        rng = np.random.default_rng(8)
        x = rng.standard_normal((3, 3))
        tape = Tape()
        node = tape.input(x)
        out = tape.custom(op, node)
        assert out.item() == pytest.approx((x**2).sum())
        tape.backward(out)
        assert np.allclose(node.adjoint, 2.0 * x)

    def test_custom_op_chains_with_scale(self):
        op = register_custom(
            forward=lambda m: float((m**2).sum()),
            backward=lambda m: 2.0 * m,
        )
        rng = np.random.default_rng(9)
        report = gradient_check(
            lambda t, n: t.scale(t.custom(op, t.tanh(n["x"])), 0.3),
            {"x": rng.standard_normal((2, 3))},
            step=1e-5,
            tolerance=1e-6,
        )
        assert report.passed

    def test_bad_backward_shape_raises_at_backward_time(self):
        op = register_custom(
            forward=lambda m: float(m.sum()),
            backward=lambda m: np.ones(m.shape[0]),
            name="broken",
        )
        tape = Tape()
        out = tape.custom(op, tape.input(np.ones((2, 2))))
        with pytest.raises(ValueError, match="broken"):
            tape.backward(out)

    def test_gradient_check_flags_wrong_gradient(self):
        op = register_custom(
            forward=lambda m: float((m**2).sum()),
            backward=lambda m: 3.0 * m,
        )
        report = gradient_check(
            lambda t, n: t.custom(op, n["x"]),
            {"x": np.ones((2, 2))},
        )
        assert not report.passed


class TestTapeMechanics:
    def test_repeated_backward_is_idempotent(self):
        tape = Tape()
        x = tape.input(np.array([[1.0, 2.0]]))
        loss = tape.sum(tape.square(x))
        tape.backward(loss)
        first = x.adjoint.copy()
        tape.backward(loss)
        assert np.array_equal(x.adjoint, first)

    def test_fan_out_accumulates(self):
        # x used twice: d/dx [sum(x) + sum(x^2)] = 1 + 2x
        tape = Tape()
        x = tape.input(np.array([[1.0, -2.0]]))
        loss = tape.add(tape.sum(x), tape.sum(tape.square(x)))
        tape.backward(loss)
        assert np.allclose(x.adjoint, 1.0 + 2.0 * x.value)

    def test_backward_rejects_vector_target(self):
        tape = Tape()
        x = tape.input(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(x)

    def test_backward_rejects_foreign_node(self):
        t1, t2 = Tape(), Tape()
        loss = t1.sum(t1.input(np.ones(2)))
        t2.input(np.ones(2))
        with pytest.raises(ValueError, match="tape"):
            t2.backward(loss)

    def test_shape_mismatch_errors(self):
        tape = Tape()
        a = tape.input(np.ones((2, 3)))
        b = tape.input(np.ones((2, 3)))
        with pytest.raises(ValueError, match="matmul"):
            tape.matmul(a, b)
        with pytest.raises(ValueError, match="add"):
            tape.add(a, tape.input(np.ones((4, 5))))
        with pytest.raises(ValueError, match="label"):
            tape.softmax_cross_entropy(a, np.array([0, 3]))

    def test_values_are_float64(self):
        tape = Tape()
        x = tape.input(np.ones((2, 2), dtype=np.float32))
        assert x.value.dtype == np.float64
