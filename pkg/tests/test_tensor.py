"""Numerics core: op semantics, spec'd examples, and the finite-difference oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efadiff import tensor as T
from efadiff.errors import EvaluationError, ShapeError
from efadiff.tensor import Tensor, conv2d, grad_check, matmul, silu, softmax_lastdim


def rand(rng, *shape, requires_grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        b = Tensor(np.arange(9.0).reshape(3, 3))
        out = matmul(Tensor(np.eye(3)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_hand_evaluated(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_allclose(out.data, [[2.0], [4.0]])

    def test_zero_annihilation(self):
        rng = np.random.default_rng(0)
        a = rand(rng, 3, 4)
        out = matmul(a, Tensor.zeros((4, 2)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor.zeros((2, 3)), Tensor.zeros((2, 3)))

    def test_batched(self):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 2, 3, 4), rand(rng, 2, 4, 5)
        out = matmul(a, b)
        for i in range(2):
            np.testing.assert_allclose(out.data[i], a.data[i] @ b.data[i])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_associativity(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rand(rng, 4, 4) for _ in range(3))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        np.testing.assert_allclose(left, right, atol=1e-10)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3)

    def test_stabilized_no_overflow(self):
        out = softmax_lastdim(Tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_closed_form(self):
        out = softmax_lastdim(Tensor([np.log(1.0), np.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75])

    def test_empty_lastdim_rejected(self):
        with pytest.raises(ShapeError):
            softmax_lastdim(Tensor(np.zeros((3, 0))))

    @given(
        st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=8),
        st.integers(1, 4),
    )
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, row, nrows):
        x = Tensor(np.tile(np.asarray(row), (nrows, 1)))
        s = softmax_lastdim(x).data
        assert (s >= 0).all()
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(nrows), atol=1e-6)


class TestSilu:
    def test_zero(self):
        assert silu(Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        x = 50.0
        assert abs(silu(Tensor([x])).data[0] - x) < 1e-12

    def test_closed_form_at_one(self):
        np.testing.assert_allclose(silu(Tensor([1.0])).data[0], 1 / (1 + np.exp(-1)), rtol=1e-12)
        assert abs(silu(Tensor([1.0])).data[0] - 0.731059) < 1e-6


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 1, 5, 5)
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = conv2d(x, w, Tensor.zeros((1,)))
        np.testing.assert_allclose(out.data, x.data)

    def test_zero_weights_gives_bias(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 2, 4, 4)
        out = conv2d(x, Tensor.zeros((3, 2, 3, 3)), Tensor([1.0, -2.0, 0.5]))
        for c, b in enumerate([1.0, -2.0, 0.5]):
            np.testing.assert_allclose(out.data[c], np.full((4, 4), b))

    def test_averaging_kernel_preserves_constant(self):
        x = Tensor(np.full((1, 6, 6), 3.25))
        w = Tensor(np.full((1, 1, 3, 3), 1 / 9))
        out = conv2d(x, w, Tensor.zeros((1,)))
        # interior only: zero padding shrinks border sums
        np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], np.full((4, 4), 3.25))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel"):
            conv2d(Tensor.zeros((2, 4, 4)), Tensor.zeros((1, 3, 3, 3)), Tensor.zeros((1,)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            conv2d(Tensor.zeros((1, 4, 4)), Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1,)))

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(4)
        x, w, b = rand(rng, 3, 5, 4), rand(rng, 2, 3, 3, 3), rand(rng, 2)
        out = conv2d(x, w, b).data
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 5, 4))
        for o in range(2):
            for y in range(5):
                for xx in range(4):
                    ref[o, y, xx] = (xp[:, y : y + 3, xx : xx + 3] * w.data[o]).sum() + b.data[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestGradCheck:
    def test_sum_loss(self):
        rng = np.random.default_rng(5)
        theta = rand(rng, 4, requires_grad=True)
        report = grad_check(lambda p: p["theta"].sum(), {"theta": theta})
        np.testing.assert_allclose(theta.grad, np.ones(4))
        assert report.max_relative_error < 1e-8

    def test_squared_norm(self):
        rng = np.random.default_rng(6)
        theta = rand(rng, 5, requires_grad=True)
        report = grad_check(lambda p: (p["theta"] * p["theta"]).sum(), {"theta": theta})
        np.testing.assert_allclose(theta.grad, 2 * theta.data, rtol=1e-10)
        assert report.max_relative_error < 1e-6

    def test_report_max_is_max_of_per_parameter(self):
        rng = np.random.default_rng(7)
        params = {"a": rand(rng, 3, requires_grad=True), "b": rand(rng, 2, requires_grad=True)}
        report = grad_check(lambda p: (p["a"] * p["a"]).sum() + silu(p["b"]).sum(), params)
        assert report.max_relative_error == max(report.per_parameter_errors.values())
        assert set(report.per_parameter_errors) == {"a", "b"}

    def test_nonfinite_loss_rejected(self):
        theta = Tensor([1.0], requires_grad=True)
        with pytest.raises(EvaluationError):
            grad_check(lambda p: p["theta"] * np.inf, {"theta": theta})


def _gradcheck_op(seed, build):
    """Run grad_check for a closure over freshly drawn params."""
    rng = np.random.default_rng(seed)
    params, fn = build(rng)
    report = grad_check(fn, params, epsilon=1e-6)
    assert report.max_relative_error < 1e-6, report.per_parameter_errors


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize(
    "build",
    [
        lambda rng: (
            {"a": rand(rng, 3, 4, requires_grad=True), "b": rand(rng, 4, 2, requires_grad=True)},
            lambda p: matmul(p["a"], p["b"]).sum(),
        ),
        lambda rng: (
            {"x": rand(rng, 2, 5, requires_grad=True)},
            lambda p, m=Tensor(rng.standard_normal((2, 5))): (softmax_lastdim(p["x"]) * m).sum(),
        ),
        lambda rng: (
            {"x": rand(rng, 7, requires_grad=True)},
            lambda p: silu(p["x"]).sum(),
        ),
        lambda rng: (
            {
                "x": rand(rng, 2, 4, 4, requires_grad=True),
                "w": rand(rng, 3, 2, 3, 3, requires_grad=True),
                "b": rand(rng, 3, requires_grad=True),
            },
            lambda p, m=None: (conv2d(p["x"], p["w"], p["b"]) * (m or Tensor(np.arange(48.0).reshape(3, 4, 4) / 24 - 1))).sum(),
        ),
        lambda rng: (
            {"x": rand(rng, 1, 3, 4, 4, requires_grad=True)},
            lambda p: T.upsample_nearest(T.avgpool2d(p["x"], 2), 2).sum(),
        ),
        lambda rng: (
            {"t": rand(rng, 5, 3, requires_grad=True)},
            lambda p: T.absolute(T.embedding_lookup(p["t"], [0, 2, 2, 4])).sum(),
        ),
        lambda rng: (
            {"x": rand(rng, 4, 6, requires_grad=True)},
            lambda p: T.concat([p["x"][:2], p["x"][2:] * 2.0], axis=0).mean(),
        ),
        lambda rng: (
            {"x": rand(rng, 3, 4, requires_grad=True)},
            lambda p: T.stack([p["x"][i] for i in range(3)]).transpose(1, 0).reshape(12).sum(),
        ),
    ],
    ids=["matmul", "softmax", "silu", "conv2d", "pool-upsample", "embed-abs", "slice-concat", "stack-reshape"],
)
def test_gradients_match_finite_differences(build, seed):
    _gradcheck_op(seed, build)


class TestTensorBasics:
    def test_flat_invariant(self):
        t = Tensor(np.arange(12.0).reshape(3, 4))
        assert int(np.prod(t.shape)) == t.data.size

    def test_grad_shape_matches(self):
        t = Tensor(np.ones((2, 3)), requires_grad=True)
        (t * 2.0).sum().backward()
        assert t.grad.shape == t.shape

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(8)
        x = rand(rng, 4, 4)
        for out in [silu(x), softmax_lastdim(x), x * x, x + x]:
            assert np.isfinite(out.data).all()

    def test_broadcast_add_backward(self):
        a = Tensor(np.ones((2, 3, 4)), requires_grad=True)
        b = Tensor(np.ones((3, 1)), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3, 4)))
        np.testing.assert_array_equal(b.grad, np.full((3, 1), 8.0))

    def test_no_grad_graph_not_recorded(self):
        x = Tensor(np.ones(3))
        y = silu(x) + 1.0
        assert y._parents == () and not y.requires_grad

    def test_diamond_reuse_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x + x * 2.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])
