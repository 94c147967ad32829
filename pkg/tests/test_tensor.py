import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmil import tensor as T
from gridmil.tensor import Tensor, grad_check


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal((a @ b).data, [[1.0, 2.0], [3.0, 4.0]])

    def test_selector_row(self):
        out = Tensor([[1.0, 0.0]]) @ Tensor([[2.0], [3.0]])
        assert np.array_equal(out.data, [[2.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_gradient_matches_finite_differences(self):
        rs = np.random.RandomState(0)
        b = Tensor(rs.randn(4, 3))
        a = Tensor(rs.randn(2, 4))
        err = grad_check(lambda x: (x @ b).sum(), a)
        assert err < 1e-6
        # gradient of sum(A @ B) w.r.t. A is ones @ B^T
        a2 = Tensor(np.array(a.data), requires_grad=True)
        (a2 @ b).sum().backward()
        assert np.allclose(a2.grad, np.ones((2, 3)) @ b.data.T)


class TestSegmentSoftmax:
    def test_uniform_logits(self):
        out = T.segment_softmax(Tensor([0.0, 0.0, 0.0]), np.zeros(3, dtype=int), 1)
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_singleton_segment(self):
        out = T.segment_softmax(Tensor([5.0]), np.zeros(1, dtype=int), 1)
        assert np.allclose(out.data, [1.0])

    def test_closed_form(self):
        out = T.segment_softmax(Tensor([math.log(2.0), 0.0]), np.zeros(2, dtype=int), 1)
        assert np.allclose(out.data, [2 / 3, 1 / 3])

    def test_empty_input(self):
        out = T.segment_softmax(Tensor(np.zeros(0)), np.zeros(0, dtype=int), 0)
        assert out.data.size == 0

    @settings(max_examples=50, deadline=None)
    @given(
        logits=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_segments_sum_to_one(self, logits, seed):
        rs = np.random.RandomState(seed)
        seg = np.sort(rs.randint(0, 4, len(logits)))
        out = T.segment_softmax(Tensor(np.array(logits)), seg, 4)
        for s in np.unique(seg):
            assert abs(out.data[seg == s].sum() - 1.0) < 1e-9

    def test_gradient(self):
        rs = np.random.RandomState(3)
        seg = np.sort(rs.randint(0, 5, 20))
        weights = Tensor(rs.randn(20))
        x = Tensor(rs.randn(20))
        err = grad_check(lambda t: (T.segment_softmax(t, seg, 5) * weights).sum(), x)
        assert err < 1e-6


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(Tensor([[1.0, 1.0, 1.0, 1.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = T.layer_norm(
            Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12
        )
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)

    def test_gradient(self):
        rs = np.random.RandomState(7)
        gain = Tensor(rs.randn(8))
        bias = Tensor(rs.randn(8))
        w = Tensor(rs.randn(8, 1))
        x = Tensor(rs.randn(3, 8))
        err = grad_check(lambda t: (T.layer_norm(t, gain, bias) @ w).sum(), x)
        assert err < 1e-5


class TestActivations:
    def test_leaky_relu_negative(self):
        assert np.allclose(T.leaky_relu(Tensor([-1.0])).data, [-0.2])

    def test_elu_fixed_point(self):
        assert T.elu(Tensor([0.0])).data[0] == 0.0

    def test_leaky_relu_gradient(self):
        rs = np.random.RandomState(1)
        x = Tensor(rs.randn(12) + np.sign(rs.randn(12)) * 0.1)  # keep away from 0
        w = Tensor(rs.randn(12))
        assert grad_check(lambda t: (T.leaky_relu(t) * w).sum(), x) < 1e-6

    def test_elu_gradient(self):
        rs = np.random.RandomState(2)
        x = Tensor(rs.randn(12))
        w = Tensor(rs.randn(12))
        assert grad_check(lambda t: (T.elu(t) * w).sum(), x) < 1e-6


class TestCosineDistance:
    def test_identical(self):
        v = Tensor([1.0, 2.0, 3.0])
        assert abs(float(T.cosine_distance(v, v).data)) < 1e-12

    def test_orthogonal(self):
        assert np.allclose(T.cosine_distance(Tensor([1.0, 0.0]), Tensor([0.0, 2.0])).data, 1.0)

    def test_antiparallel(self):
        assert np.allclose(T.cosine_distance(Tensor([1.0, 1.0]), Tensor([-2.0, -2.0])).data, 2.0)

    def test_degenerate_returns_one_no_gradient(self):
        v = Tensor(np.zeros(3), requires_grad=True)
        w = Tensor([1.0, 0.0, 0.0])
        out = T.cosine_distance(v, w)
        assert float(out.data) == 1.0
        assert not out.requires_grad

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_range(self, seed):
        rs = np.random.RandomState(seed)
        v, w = Tensor(rs.randn(5)), Tensor(rs.randn(5))
        d = float(T.cosine_distance(v, w).data)
        assert -1e-12 <= d <= 2.0 + 1e-12


class TestCrossEntropy:
    def test_confident_correct(self):
        assert float(T.cross_entropy(Tensor([1e3, 0.0]), 0).data) < 1e-10

    def test_uniform_two_class(self):
        assert np.isclose(float(T.cross_entropy(Tensor([0.0, 0.0]), 1).data), math.log(2))

    def test_uniform_three_class(self):
        assert np.isclose(float(T.cross_entropy(Tensor([0.0, 0.0, 0.0]), 2).data), math.log(3))

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor([0.0, 0.0]), 2)

    def test_nonnegative_and_uniform_equals_log_c(self):
        for c in (2, 3, 5):
            val = float(T.cross_entropy(Tensor(np.zeros(c)), c - 1).data)
            assert val == pytest.approx(math.log(c), abs=1e-12)
            assert val >= 0.0

    def test_gradient(self):
        rs = np.random.RandomState(4)
        x = Tensor(rs.randn(5))
        assert grad_check(lambda t: T.cross_entropy(t, 2), x) < 1e-6


class TestGradCheck:
    def test_analytic_square(self):
        x = Tensor([1.0, 2.0])
        err = grad_check(lambda t: (t * t).sum(), x, step=1e-5)
        assert err < 1e-8
        x2 = Tensor([1.0, 2.0], requires_grad=True)
        (x2 * x2).sum().backward()
        assert np.allclose(x2.grad, [2.0, 4.0])

    def test_constant_function(self):
        x = Tensor([1.0, -1.0])
        assert grad_check(lambda t: Tensor(3.0) + (t * 0.0).sum(), x) == 0.0


class TestBackwardMechanics:
    def test_double_backward_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        out = (x * x).sum()
        out.backward()
        with pytest.raises(RuntimeError):
            out.backward()

    def test_backward_needs_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_gather_scatter_gradient(self):
        rs = np.random.RandomState(5)
        idx = np.array([0, 2, 2, 1])
        w = Tensor(rs.randn(4, 3))
        x = Tensor(rs.randn(3, 3))
        assert grad_check(lambda t: (T.gather_rows(t, idx) * w).sum(), x) < 1e-6

    def test_segment_sum_gradient(self):
        rs = np.random.RandomState(6)
        seg = np.array([0, 0, 1, 2, 2])
        w = Tensor(rs.randn(3, 2))
        x = Tensor(rs.randn(5, 2))
        assert grad_check(lambda t: (T.segment_sum(t, seg, 3) * w).sum(), x) < 1e-6
