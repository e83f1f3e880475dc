import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camhfa import tensor as tn
from camhfa.tensor import ContractError, GradTape, ShapeError, Tensor, finite_difference_gradient


def naive_matmul(a, b):
    a, b = np.asarray(a), np.asarray(b)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


finite_vectors = arrays(np.float64, st.integers(1, 12),
                        elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False))


class TestMatmul:
    def test_identity(self):
        x = [[1.0, 2.0], [3.0, 4.0]]
        np.testing.assert_array_equal(tn.matmul(np.eye(2), x).data, x)

    def test_selector_row(self):
        np.testing.assert_array_equal(tn.matmul([[1.0, 0.0]], [[5.0], [7.0]]).data, [[5.0]])

    def test_seed7_matches_triple_loop_bitwise(self):
        rng = np.random.default_rng(7)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert np.array_equal(tn.matmul(a, b).data, naive_matmul(a, b))

    @pytest.mark.parametrize("seed", range(20))
    def test_bitwise_vs_loop_up_to_dim_8(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n = rng.integers(1, 9, size=3)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        assert np.array_equal(tn.matmul(a, b).data, naive_matmul(a, b))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tn.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_batched_broadcast(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 3, 5)), rng.standard_normal((5, 2))
        out = tn.matmul(a, b).data
        for i in range(4):
            assert np.array_equal(out[i], naive_matmul(a[i], b))


class TestSoftmax:
    @pytest.mark.parametrize("c", [-3.0, 0.0, 2.5, 1e3])
    def test_constant_input_is_uniform(self, c):
        np.testing.assert_allclose(tn.softmax(np.full(4, c)).data, 0.25, atol=1e-15)

    def test_log3(self):
        np.testing.assert_allclose(tn.softmax([0.0, math.log(3.0)]).data, [0.25, 0.75], atol=1e-15)

    def test_large_values_stay_finite(self):
        out = tn.softmax([1000.0, 1001.0]).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, tn.softmax([0.0, 1.0]).data, atol=1e-15)

    @given(finite_vectors)
    def test_sums_to_one(self, x):
        out = tn.softmax(x).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) <= 1e-12

    @given(finite_vectors, st.floats(-100, 100))
    def test_shift_invariance(self, x, c):
        np.testing.assert_allclose(tn.softmax(x + c).data, tn.softmax(x).data, atol=1e-12, rtol=0)

    def test_axis(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(tn.softmax(x, axis=0).data.sum(axis=0), 1.0, atol=1e-15)


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        with GradTape() as tape:
            loss = tn.sum(x * x)
        (g,) = tn.backward(tape, loss, [x])
        np.testing.assert_array_equal(g, [6.0])

    def test_sum_of_softmax_has_zero_gradient(self):
        x = Tensor([0.3, -1.2, 2.0, 0.7], requires_grad=True)
        with GradTape() as tape:
            loss = tn.sum(tn.softmax(x))
        (g,) = tape.gradient(loss, [x])
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError, match="scalar"):
            tape.gradient(y, [x])

    def test_loss_from_another_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with GradTape():
            y = tn.sum(x * x)
        with GradTape() as other:
            pass
        with pytest.raises(ContractError):
            other.gradient(y, [x])

    def test_each_record_replayed_once(self):
        calls = []
        x = Tensor([1.5, -0.5], requires_grad=True)

        def counting(name, x):
            def vjp(g):
                calls.append(name)
                return (g,)
            return tn.apply_op(name, x.data.copy(), (x,), vjp)

        with GradTape() as tape:
            a = counting("a", x)
            b = counting("b", a)
            c = counting("c", a)  # a feeds two consumers
            loss = tn.sum(b * c)
        tape.gradient(loss, [x])
        assert calls == ["c", "b", "a"]
        assert tape.op_names == ["a", "b", "c", "mul", "sum"]

    def test_unused_source_gets_zeros(self):
        x = Tensor([1.0], requires_grad=True)
        z = Tensor([[2.0, 3.0]], requires_grad=True)
        with GradTape() as tape:
            loss = tn.sum(x * 4.0)
        gx, gz = tape.gradient(loss, [x, z])
        np.testing.assert_array_equal(gx, [4.0])
        np.testing.assert_array_equal(gz, [[0.0, 0.0]])

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a0, b0 = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))

        def run():
            a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
            with GradTape() as tape:
                loss = tn.sum(tn.log_softmax(tn.matmul(a, b)) * 1.7)
            return tape.gradient(loss, [a, b])

        for x, y in zip(run(), run()):
            assert np.array_equal(x, y)

    def test_no_tape_no_recording(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        assert not y.requires_grad


def _squared_sum(x):
    return tn.sum(x * x)


PRIMITIVE_CASES = {
    "add_broadcast": (lambda a, b: tn.sum(tn.add(a, b) * tn.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: tn.sum(tn.sub(a, b) * a), [(3, 4), (1, 4)]),
    "div": (lambda a, b: tn.sum(tn.div(a, tn.exp(b))), [(2, 3), (2, 3)]),
    "matmul_batched": (lambda a, b: tn.sum(tn.matmul(a, b) * tn.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    "log_softmax": (lambda a, b: tn.sum(tn.log_softmax(a, axis=0) * b), [(4, 3), (4, 3)]),
    "softmax": (lambda a, b: tn.sum(tn.softmax(a, axis=-1) * b), [(2, 5), (2, 5)]),
    "sqrt_log": (lambda a, b: tn.sum(tn.log(tn.sqrt(a * a + 1.0)) * b), [(3,), (3,)]),
    "pad_slice_concat": (lambda a, b: _squared_sum(tn.concat([tn.slice_axis(tn.pad(a, 0, 2, 1), 0, 1, 5), b], axis=1)),
                         [(4, 2), (4, 3)]),
    "transpose_reshape": (lambda a, b: tn.sum(tn.reshape(tn.transpose(a), (-1,)) * b), [(2, 3), (6,)]),
    "mean_keepdims": (lambda a, b: tn.sum(tn.mean(a, axis=1, keepdims=True) * b), [(3, 4), (3, 1)]),
    "where_clip": (lambda a, b: tn.sum(tn.where(a.data > 0, tn.clip(a, -0.5, 0.5), b * b)), [(5,), (5,)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    values = [rng.uniform(0.2, 1.5, size=s) * rng.choice([-1, 1], size=s) for s in shapes]
    leaves = [Tensor(v, requires_grad=True) for v in values]
    with GradTape() as tape:
        loss = fn(*leaves)
    grads = tape.gradient(loss, leaves)
    for i, v in enumerate(values):
        def f(x, i=i):
            args = [Tensor(w) for w in values]
            args[i] = Tensor(x)
            return fn(*args).item()
        numeric = finite_difference_gradient(f, v, 1e-6)
        np.testing.assert_allclose(grads[i], numeric, rtol=1e-6, atol=1e-8)


class TestFiniteDifference:
    def test_quadratic(self):
        g = finite_difference_gradient(lambda x: float(np.sum(x * x)), np.array([1.0, 2.0]), 1e-6)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_constant(self):
        g = finite_difference_gradient(lambda x: 3.0, np.array([1.0, -2.0, 0.5]), 1e-6)
        np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ContractError):
            finite_difference_gradient(lambda x: 0.0, np.zeros(2), 0.0)

    def test_object_array_stays_in_extended_precision(self):
        import mpmath
        x = np.array([mpmath.mpf(1), mpmath.mpf(2)], dtype=object)
        with mpmath.workdps(40):
            g = finite_difference_gradient(lambda v: v[0] ** 3 + v[1] ** 2, x, 1e-6)
        # d/dx x^3 at 1 is 3, central-difference truncation is eps^2 = 1e-12
        assert abs(g[0] - 3.0) < 2e-12
        assert abs(g[1] - 4.0) < 1e-20 + 1e-15


def test_relative_error_floor():
    assert tn.max_relative_error([1e-12], [0.0]) == pytest.approx(1e-4)
    assert tn.max_relative_error([2.0], [2.0]) == 0.0
