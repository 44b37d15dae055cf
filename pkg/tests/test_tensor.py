import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.tensor import (
    Graph,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    elementwise,
    matmul,
    no_grad,
    resize_bilinear2x,
    scatter_rows,
    upsample_nearest2x,
)
from tests.conftest import numeric_gradient

F64 = np.float64


def leaf(array) -> Tensor:
    return Tensor(np.array(array, dtype=F64), requires_grad=True, dtype=F64)


def check_gradient(build, *arrays, tol=1e-4):
    """Compare backward() of sum(build(*leaves) * weights) against finite differences."""
    leaves = [leaf(a) for a in arrays]
    out = build(*leaves)
    weights = np.random.default_rng(0).normal(size=out.shape)
    (out * Tensor(weights, dtype=F64)).sum().backward()

    for i, array in enumerate(arrays):
        def scalar(x, i=i):
            args = [Tensor(a, dtype=F64) for a in arrays]
            args[i] = Tensor(x, dtype=F64)
            return float((build(*args).data * weights).sum())

        expected = numeric_gradient(scalar, np.array(array, dtype=F64))
        got = leaves[i].grad
        scale = max(np.abs(expected).max(), 1e-8)
        assert np.abs(got - expected).max() / scale < tol


class TestElementwise:
    def test_exp_of_zero_is_one(self):
        assert np.all(elementwise("exp", Tensor(np.zeros(5))).numpy() == 1.0)

    def test_sigmoid_of_zero_is_half(self):
        assert elementwise("sigmoid", Tensor(np.zeros(3))).numpy() == pytest.approx([0.5, 0.5, 0.5])

    def test_square_gradient(self):
        x = leaf(3.0)
        elementwise("mul", x, x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="Unknown elementwise op"):
            elementwise("cosh", Tensor(1.0))

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_scalar_broadcast_gradient(self):
        a = leaf(np.ones((2, 3)))
        b = leaf(2.0)
        (a * b).sum().backward()
        assert b.grad == pytest.approx(6.0)
        assert np.allclose(a.grad, 2.0)

    @pytest.mark.parametrize("op", ["exp", "tanh", "sigmoid", "softplus", "neg"])
    def test_unary_gradients(self, op, rng):
        check_gradient(lambda x: elementwise(op, x), rng.normal(size=(3, 4)))

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_gradients(self, op, rng):
        a = rng.normal(size=(2, 5))
        b = rng.uniform(0.5, 2.0, size=(2, 5))
        check_gradient(lambda x, y: elementwise(op, x, y), a, b)

    def test_log_and_pow_gradients(self, rng):
        x = rng.uniform(0.5, 2.0, size=(4,))
        check_gradient(lambda t: t.log(), x)
        check_gradient(lambda t: t ** 3, x)

    def test_relu_abs_clamp_gradients(self, rng):
        # keep away from kinks
        x = rng.choice([-1.0, 1.0], size=(3, 3)) * rng.uniform(0.2, 0.4, size=(3, 3))
        check_gradient(lambda t: t.relu(), x)
        check_gradient(lambda t: t.abs(), x)
        check_gradient(lambda t: t.clamp(-0.3, 0.3), x)


class TestMatmul:
    def test_identity(self):
        v = np.array([[1.0], [2.0], [3.0]])
        assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(v)).numpy(), v)

    def test_hand_arithmetic(self):
        out = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])) @ Tensor(np.ones((2, 1)))
        assert np.array_equal(out.numpy(), [[3.0], [7.0]])

    def test_gradient(self, rng):
        check_gradient(lambda a, b: a @ b, rng.normal(size=(4, 5)), rng.normal(size=(5, 3)))

    def test_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_zero_kernel(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 5)))
        assert np.all(conv2d(x, Tensor(np.zeros((3, 2, 3, 3)))).numpy() == 0.0)

    def test_center_tap_is_identity(self, rng):
        x = rng.normal(size=(1, 6, 6))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x, dtype=F64), Tensor(kernel, dtype=F64)).numpy()
        assert np.allclose(out, x)

    def test_gradient(self, rng):
        check_gradient(conv2d, rng.normal(size=(2, 8, 8)), rng.normal(size=(4, 2, 3, 3)))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((1, 2, 3, 3))))


class TestShapeOps:
    def test_reduction_gradients(self, rng):
        x = rng.normal(size=(3, 4))
        check_gradient(lambda t: t.sum(axis=1), x)
        check_gradient(lambda t: t.mean(axis=0, keepdims=True), x)
        check_gradient(lambda t: t.max(axis=0), x)

    def test_reshape_transpose_expand_getitem(self, rng):
        x = rng.normal(size=(2, 3))
        check_gradient(lambda t: t.reshape(3, 2), x)
        check_gradient(lambda t: t.transpose(1, 0), x)
        check_gradient(lambda t: t[:, :1].expand(2, 4), x)
        check_gradient(lambda t: t[np.array([0, 0, 1])], x)

    def test_cumsum_exclusive(self, rng):
        x = rng.normal(size=(2, 5))
        out = Tensor(x, dtype=F64).cumsum_exclusive(axis=1).numpy()
        assert np.allclose(out[:, 0], 0.0)
        assert np.allclose(out[:, -1], x[:, :-1].sum(axis=1))
        check_gradient(lambda t: t.cumsum_exclusive(axis=1), x)

    def test_concat_gradient(self, rng):
        check_gradient(lambda a, b: concat([a, b], axis=1), rng.normal(size=(2, 2)), rng.normal(size=(2, 3)))

    def test_expand_rejects_rank_change(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((1, 3))).expand(3)

    def test_scatter_rows(self, rng):
        values = rng.normal(size=(2, 3))
        out = scatter_rows(Tensor(values, dtype=F64), np.array([3, 0]), 5, 0.25).numpy()
        assert np.allclose(out[3], values[0])
        assert np.allclose(out[0], values[1])
        assert np.all(out[[1, 2, 4]] == 0.25)
        check_gradient(lambda t: scatter_rows(t, np.array([3, 0]), 5, 0.0), values)

    def test_resizes(self, rng):
        x = rng.normal(size=(2, 4, 3))
        assert upsample_nearest2x(Tensor(x)).shape == (2, 8, 6)
        check_gradient(upsample_nearest2x, x)
        check_gradient(resize_bilinear2x, x)

    def test_bilinear_of_constant_is_constant(self):
        out = resize_bilinear2x(Tensor(np.full((1, 4, 4), 0.3), dtype=F64)).numpy()
        assert np.allclose(out, 0.3)


class TestGraph:
    def test_leaf_grad_has_leaf_shape(self, rng):
        a = leaf(rng.normal(size=(3, 2)))
        (a.sigmoid() * 2.0).sum().backward()
        assert a.grad.shape == a.shape

    def test_detached_tensor_gets_no_gradient(self):
        a = leaf([1.0, 2.0])
        d = a.detach()
        (d * 3.0).sum().backward()
        assert a.grad is None

    def test_trace_is_in_creation_order(self):
        a = leaf([1.0, 2.0])
        out = ((a * 2.0).exp() + a).sum()
        records = Graph.trace(out).records
        assert [r.seq for r in records] == sorted(r.seq for r in records)
        assert [r.op for r in records] == ["mul", "exp", "add", "sum"]

    def test_shared_subexpression_accumulates(self):
        a = leaf(2.0)
        b = a * a
        (b + b).backward()
        assert a.grad == pytest.approx(8.0)

    def test_no_grad_records_nothing(self):
        a = leaf([1.0])
        with no_grad():
            out = a * 2.0
        assert out.node is None and not out.requires_grad

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError, match="single-element"):
            (leaf([1.0, 2.0]) * 2.0).backward()


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_composite_expression_gradient(seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(3, 4))
    b = r.normal(size=(4, 2))
    check_gradient(lambda x, y: ((x @ y).tanh() * 2.0 + 1.0).softplus(), a, b)
