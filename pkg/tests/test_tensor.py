"""Unit tests for the autodiff tensor core.

Forward values are checked against hand-computed or numpy-computed
oracles; gradients against closed-form expressions or the central
difference checker.  Property tests cover the algebraic invariants
(linearity of upsampling, adjointness, determinism).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixseg.tensor import (
    LOG_EPS,
    RankError,
    ShapeMismatchError,
    Tape,
    Tensor,
    TensorFileError,
    absolute,
    add,
    axis_max,
    conv2d,
    div,
    elementwise,
    index0,
    load_tensor,
    minimum,
    mul,
    neg,
    no_grad,
    reduce,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    safe_log,
    save_tensor,
    sigmoid,
    stack,
    sub,
    upsample_bilinear,
)


def scalar(t: Tensor) -> float:
    return t.item()


def grad_of(expr: Tensor, leaf: Tensor) -> np.ndarray:
    expr.backward()
    assert leaf.grad is not None
    return leaf.grad


# ---------------------------------------------------------------------------
# Construction and bookkeeping


class TestTensorBasics:
    def test_default_dtype_is_float64(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float64

    def test_float32_preserved(self):
        t = Tensor(np.zeros(3, dtype=np.float32))
        assert t.dtype == np.float32

    def test_item_requires_scalar(self):
        with pytest.raises(ValueError):
            Tensor([1.0, 2.0]).item()
        assert Tensor(5.0).item() == 5.0

    def test_detach_shares_values_but_not_graph(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = mul(a, 3.0)
        d = b.detach()
        assert not d.requires_grad
        assert d._parents == ()
        np.testing.assert_array_equal(d.data, b.data)

    def test_backward_requires_scalar(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            mul(a, 2.0).backward()

    def test_backward_requires_grad(self):
        with pytest.raises(ValueError):
            Tensor(3.0).backward()

    def test_operator_sugar(self):
        a = Tensor(3.0, requires_grad=True)
        b = Tensor(2.0, requires_grad=True)
        assert (a + b).item() == 5.0
        assert (a - b).item() == 1.0
        assert (a * b).item() == 6.0
        assert (a / b).item() == 1.5
        assert (-a).item() == -3.0
        assert (1.0 + a).item() == 4.0
        assert (1.0 - a).item() == -2.0
        assert (2.0 * a).item() == 6.0


class TestGraphMechanics:
    def test_diamond_accumulation(self):
        # y = x*x + x  =>  dy/dx = 2x + 1
        x = Tensor(3.0, requires_grad=True)
        y = add(mul(x, x), x)
        g = grad_of(y, x)
        assert g == pytest.approx(7.0)

    def test_shared_subexpression_counted_once_per_path(self):
        # s = x + x  =>  ds/dx = 2
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = reduce_sum(add(x, x))
        np.testing.assert_allclose(grad_of(y, x), [2.0, 2.0])

    def test_no_grad_blocks_recording(self):
        x = Tensor(2.0, requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad
        assert y._parents == ()

    def test_no_grad_restores_state(self):
        with no_grad():
            pass
        x = Tensor(2.0, requires_grad=True)
        assert mul(x, x).requires_grad

    def test_constant_graph_records_nothing(self):
        y = mul(Tensor(2.0), Tensor(3.0))
        assert not y.requires_grad
        assert y._parents == ()

    def test_tape_orders_parents_before_children(self):
        x = Tensor(1.0, requires_grad=True)
        a = mul(x, 2.0)
        b = add(a, x)
        tape = Tape(b)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        assert pos[id(x)] < pos[id(a)] < pos[id(b)]

    def test_backward_twice_is_deterministic(self):
        def run():
            x = Tensor(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
            y = reduce_mean(mul(sigmoid(x), x))
            y.backward()
            return x.grad.copy()

        g1, g2 = run(), run()
        np.testing.assert_array_equal(g1, g2)

    def test_deep_chain_does_not_recurse(self):
        # The tape walk is iterative, so graph depth far beyond the
        # interpreter recursion limit must still work.
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = add(y, 1.0)
        g = grad_of(y, x)
        assert g == pytest.approx(1.0)
        assert y.item() == pytest.approx(5001.0)


# ---------------------------------------------------------------------------
# Elementwise ops


class TestElementwise:
    def test_add_sub_mul_div_grads(self):
        a = Tensor([1.0, -2.0, 0.5], requires_grad=True)
        b = Tensor([3.0, 4.0, -1.0], requires_grad=True)
        y = reduce_sum(div(mul(add(a, b), sub(a, b)), b))
        y.backward()
        ad, bd = a.data, b.data
        # y = (a^2 - b^2) / b ; dy/da = 2a/b ; dy/db = -(a^2/b^2) - 1
        np.testing.assert_allclose(a.grad, 2 * ad / bd, rtol=1e-12)
        np.testing.assert_allclose(b.grad, -(ad**2) / bd**2 - 1, rtol=1e-12)

    def test_scalar_second_operand(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        y = reduce_sum(div(a, 4.0))
        np.testing.assert_allclose(grad_of(y, a), [0.25, 0.25])

    def test_shape_mismatch_raises(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((3, 2)))
        with pytest.raises(ShapeMismatchError):
            add(a, b)

    def test_minimum_values(self):
        a = Tensor([1.0, 5.0, 2.0])
        b = Tensor([3.0, 4.0, 2.0])
        np.testing.assert_array_equal(minimum(a, b).data, [1.0, 4.0, 2.0])

    def test_minimum_grad_routes_to_smaller(self):
        a = Tensor([1.0, 5.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        reduce_sum(minimum(a, b)).backward()
        np.testing.assert_array_equal(a.grad, [1.0, 0.0])
        np.testing.assert_array_equal(b.grad, [0.0, 1.0])

    def test_minimum_tie_routes_to_first(self):
        a = Tensor([2.0], requires_grad=True)
        b = Tensor([2.0], requires_grad=True)
        reduce_sum(minimum(a, b)).backward()
        np.testing.assert_array_equal(a.grad, [1.0])
        np.testing.assert_array_equal(b.grad, [0.0])

    def test_absolute_zero_subgradient(self):
        a = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
        reduce_sum(absolute(a)).backward()
        np.testing.assert_array_equal(a.grad, [-1.0, 0.0, 1.0])

    def test_relu(self):
        a = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        y = relu(a)
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
        reduce_sum(y).backward()
        np.testing.assert_array_equal(a.grad, [0.0, 0.0, 1.0])

    def test_elementwise_dispatch(self):
        a = Tensor([1.0, -2.0])
        b = Tensor([3.0, 4.0])
        np.testing.assert_array_equal(elementwise("add", a, b).data, [4.0, 2.0])
        np.testing.assert_array_equal(elementwise("min", a, b).data, [1.0, -2.0])
        np.testing.assert_array_equal(elementwise("abs", a).data, [1.0, 2.0])
        np.testing.assert_array_equal(elementwise("neg", a).data, [-1.0, 2.0])

    def test_elementwise_dispatch_errors(self):
        a = Tensor([1.0])
        with pytest.raises(ValueError):
            elementwise("pow", a, a)
        with pytest.raises(ValueError):
            elementwise("abs", a, a)
        with pytest.raises(ValueError):
            elementwise("add", a)


class TestSigmoid:
    def test_midpoint(self):
        assert sigmoid(Tensor(0.0)).item() == pytest.approx(0.5)

    def test_open_interval_under_saturation(self):
        y = sigmoid(Tensor([-1000.0, -50.0, 50.0, 1000.0]))
        assert np.all(y.data > 0.0)
        assert np.all(y.data < 1.0)

    def test_open_interval_float32(self):
        y = sigmoid(Tensor(np.array([-1000.0, 1000.0], dtype=np.float32)))
        assert np.all(y.data > 0.0)
        assert np.all(y.data < 1.0)

    def test_gradient_matches_closed_form(self):
        x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
        y = sigmoid(x)
        reduce_sum(y).backward()
        np.testing.assert_allclose(x.grad, y.data * (1 - y.data), rtol=1e-12)


class TestSafeLog:
    def test_log_of_zero_is_log_eps(self):
        assert safe_log(Tensor(0.0)).item() == pytest.approx(math.log(LOG_EPS))

    def test_log_above_eps_is_exact(self):
        assert safe_log(Tensor(math.e)).item() == pytest.approx(1.0)

    def test_gradient_zero_where_clamped(self):
        x = Tensor([0.0, 1e-9, 0.5], requires_grad=True)
        reduce_sum(safe_log(x)).backward()
        np.testing.assert_allclose(x.grad, [0.0, 0.0, 2.0])

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            safe_log(Tensor(1.0), eps=0.0)


# ---------------------------------------------------------------------------
# Axis max


class TestAxisMax:
    A = np.array([[0.1, 0.9], [0.4, 0.2]])

    def test_rows_projection(self):
        out = axis_max(Tensor(self.A), "rows")
        assert out.shape == (1, 2)
        np.testing.assert_allclose(out.data, [[0.4, 0.9]])

    def test_cols_projection(self):
        out = axis_max(Tensor(self.A), "cols")
        assert out.shape == (2, 1)
        np.testing.assert_allclose(out.data, [[0.9], [0.4]])

    def test_matches_numpy_on_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = rng.standard_normal((5, 7))
            np.testing.assert_array_equal(
                axis_max(Tensor(m), "rows").data, m.max(axis=0, keepdims=True)
            )
            np.testing.assert_array_equal(
                axis_max(Tensor(m), "cols").data, m.max(axis=1, keepdims=True)
            )

    def test_grad_routes_to_argmax(self):
        x = Tensor(self.A, requires_grad=True)
        w = Tensor([[2.0, 3.0]])
        reduce_sum(mul(axis_max(x, "rows"), w)).backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 3.0], [2.0, 0.0]])

    def test_grad_ties_route_to_first(self):
        x = Tensor(np.ones((3, 1)), requires_grad=True)
        reduce_sum(axis_max(x, "rows")).backward()
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])

    def test_rejects_non_2d(self):
        with pytest.raises(RankError):
            axis_max(Tensor(np.zeros((2, 2, 2))), "rows")

    def test_rejects_unknown_axis(self):
        with pytest.raises(ValueError):
            axis_max(Tensor(np.zeros((2, 2))), "diag")


# ---------------------------------------------------------------------------
# Reductions


class TestReduce:
    def test_sum_and_mean(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert reduce(x, "sum").item() == 10.0
        assert reduce(x, "mean").item() == 2.5

    def test_sum_of_empty_is_zero(self):
        assert reduce_sum(Tensor(np.zeros((0,)))).item() == 0.0

    def test_mean_of_empty_raises(self):
        with pytest.raises(ValueError):
            reduce_mean(Tensor(np.zeros((0,))))

    def test_grads(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        reduce_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
        y = Tensor(np.ones((2, 3)), requires_grad=True)
        reduce_mean(y).backward()
        np.testing.assert_allclose(y.grad, np.full((2, 3), 1 / 6))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            reduce(Tensor([1.0]), "max")


# ---------------------------------------------------------------------------
# Convolution


class TestConv2d:
    def test_ones_kernel_padded_counts_neighbourhood(self):
        x = Tensor(np.ones((1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, pad=1)
        expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
        np.testing.assert_allclose(out.data[0], expected)

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 5, 5))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), pad=1)
        np.testing.assert_allclose(out.data, x)

    def test_stride_two_shape(self):
        x = Tensor(np.zeros((3, 8, 8)))
        w = Tensor(np.zeros((5, 3, 3, 3)))
        assert conv2d(x, w, stride=2, pad=1).shape == (5, 4, 4)

    def test_batch_matches_per_sample(self):
        rng = np.random.default_rng(2)
        xs = rng.standard_normal((4, 3, 6, 6))
        w = Tensor(rng.standard_normal((2, 3, 3, 3)))
        b = Tensor(rng.standard_normal(2))
        batched = conv2d(Tensor(xs), w, bias=b, stride=2, pad=1)
        for i in range(4):
            single = conv2d(Tensor(xs[i]), w, bias=b, stride=2, pad=1)
            # The whole batch goes through one GEMM, so summation order
            # differs from the single-image call by float reassociation.
            np.testing.assert_allclose(batched.data[i], single.data, atol=1e-12)

    def test_matches_scipy_correlate(self):
        from scipy.signal import correlate2d

        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 7, 7))
        w = rng.standard_normal((1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), pad=1)
        expected = correlate2d(x[0], w[0, 0], mode="same")
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-12)

    def test_bias_adds_per_channel(self):
        x = Tensor(np.zeros((1, 4, 4)))
        w = Tensor(np.zeros((3, 1, 1, 1)))
        b = Tensor(np.array([1.0, -2.0, 0.5]))
        out = conv2d(x, w, bias=b)
        for c, v in enumerate([1.0, -2.0, 0.5]):
            np.testing.assert_array_equal(out.data[c], np.full((4, 4), v))

    def test_weight_grad_on_constant_input(self):
        # With x == 1 everywhere and no padding, d(sum out)/dw is the
        # number of kernel placements for every weight.
        x = Tensor(np.ones((1, 5, 5)), requires_grad=True)
        w = Tensor(np.zeros((1, 1, 3, 3)), requires_grad=True)
        reduce_sum(conv2d(x, w)).backward()
        np.testing.assert_allclose(w.grad, np.full((1, 1, 3, 3), 9.0))

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_rejects_wrong_pad(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), pad=2)

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_rejects_bad_rank(self):
        with pytest.raises(RankError):
            conv2d(Tensor(np.zeros((4, 4))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_rejects_oversized_kernel(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


# ---------------------------------------------------------------------------
# Upsampling


class TestUpsampleBilinear:
    def test_doubling_one_row(self):
        x = Tensor(np.array([[0.0, 1.0]]))
        out = upsample_bilinear(x, 1, 4)
        np.testing.assert_allclose(out.data, [[0.0, 0.25, 0.75, 1.0]])

    def test_constant_map_is_preserved(self):
        x = Tensor(np.full((3, 5), 2.5))
        out = upsample_bilinear(x, 9, 20)
        np.testing.assert_allclose(out.data, np.full((9, 20), 2.5))

    def test_identity_when_same_size(self):
        x = np.random.default_rng(0).standard_normal((4, 6))
        np.testing.assert_allclose(upsample_bilinear(Tensor(x), 4, 6).data, x)

    def test_leading_axes_pass_through(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 4, 4))
        out = upsample_bilinear(Tensor(x), 8, 8)
        assert out.shape == (2, 3, 8, 8)
        single = upsample_bilinear(Tensor(x[1, 2]), 8, 8)
        np.testing.assert_array_equal(out.data[1, 2], single.data)

    def test_rejects_downsampling(self):
        with pytest.raises(ValueError):
            upsample_bilinear(Tensor(np.zeros((4, 4))), 2, 4)

    def test_gradient_is_exact_adjoint(self):
        # <g, U x> must equal <U^T g, x> for the linear op U.
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        g = rng.standard_normal((6, 8))
        out = upsample_bilinear(x, 6, 8)
        reduce_sum(mul(out, Tensor(g))).backward()
        lhs = float((g * out.data).sum())
        rhs = float((x.grad * x.data).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(2, 5),
        st.integers(2, 5),
        st.integers(0, 2**32 - 1),
        st.floats(-3, 3),
        st.floats(-3, 3),
    )
    def test_linearity(self, h, w, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((h, w))
        b = rng.standard_normal((h, w))
        oh, ow = 2 * h + 1, 3 * w
        mixed = upsample_bilinear(Tensor(alpha * a + beta * b), oh, ow).data
        parts = (
            alpha * upsample_bilinear(Tensor(a), oh, ow).data
            + beta * upsample_bilinear(Tensor(b), oh, ow).data
        )
        np.testing.assert_allclose(mixed, parts, atol=1e-10)


# ---------------------------------------------------------------------------
# Stack / index / reshape


class TestStructuralOps:
    def test_stack_and_index_roundtrip(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        s = stack([a, b])
        assert s.shape == (2, 2)
        np.testing.assert_array_equal(index0(s, 1).data, [3.0, 4.0])

    def test_stack_grad_splits(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        s = stack([a, b])
        reduce_sum(mul(index0(s, 0), 2.0)).backward()
        np.testing.assert_array_equal(a.grad, [2.0, 2.0])
        np.testing.assert_array_equal(b.grad, [0.0, 0.0])

    def test_stack_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            stack([Tensor([1.0]), Tensor([1.0, 2.0])])

    def test_stack_empty(self):
        with pytest.raises(ValueError):
            stack([])

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            index0(Tensor(np.zeros((2, 3))), 2)

    def test_reshape_roundtrip_grad(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        y = reshape(x, (3, 2))
        np.testing.assert_array_equal(y.data, x.data.reshape(3, 2))
        reduce_sum(mul(y, y)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            reshape(Tensor(np.zeros((2, 3))), (4, 2))


# ---------------------------------------------------------------------------
# Raw tensor files


class TestTensorFiles:
    def test_roundtrip_f64(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((2, 3, 4))
        p = tmp_path / "t.mxt"
        save_tensor(p, arr)
        back = load_tensor(p)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, arr)

    def test_roundtrip_f32(self, tmp_path):
        arr = np.random.default_rng(1).standard_normal((5,)).astype(np.float32)
        p = tmp_path / "t.mxt"
        save_tensor(p, arr)
        back = load_tensor(p)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, arr)

    def test_roundtrip_scalar_rank0(self, tmp_path):
        p = tmp_path / "t.mxt"
        save_tensor(p, np.float64(7.25))
        back = load_tensor(p)
        assert back.shape == ()
        assert back == 7.25

    def test_header_layout(self, tmp_path):
        p = tmp_path / "t.mxt"
        save_tensor(p, np.zeros((2, 3), dtype=np.float32))
        blob = p.read_bytes()
        assert blob[:8] == b"MXTENSOR"
        assert blob[8] == 1  # f32 code
        assert blob[9] == 2  # rank
        assert int.from_bytes(blob[10:14], "little") == 2
        assert int.from_bytes(blob[14:18], "little") == 3
        assert len(blob) == 18 + 2 * 3 * 4

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.mxt"
        p.write_bytes(b"NOTMAGIC" + bytes(16))
        with pytest.raises(TensorFileError):
            load_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.mxt"
        save_tensor(p, np.zeros(8))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(TensorFileError):
            load_tensor(p)

    def test_unknown_dtype_code(self, tmp_path):
        p = tmp_path / "t.mxt"
        save_tensor(p, np.zeros(1))
        blob = bytearray(p.read_bytes())
        blob[8] = 9
        p.write_bytes(bytes(blob))
        with pytest.raises(TensorFileError):
            load_tensor(p)

    def test_rejects_integer_array(self, tmp_path):
        with pytest.raises(TensorFileError):
            save_tensor(tmp_path / "t.mxt", np.zeros(3, dtype=np.int32))
