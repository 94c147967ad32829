import numpy as np
import pytest

from gridmil import losses as L
from gridmil import model as M
from gridmil.data import DataError, PatchBag, build_graph
from gridmil.tensor import Tensor


class TestSampleMask:
    def test_count_rounds_half_up(self):
        rng = np.random.default_rng(0)
        assert L.sample_mask(10, 0.7, rng).count == 7
        assert L.sample_mask(1, 0.7, rng).count == 1
        assert L.sample_mask(1, 0.4, rng).count == 0
        assert L.sample_mask(10, 0.75, rng).count == 8
        assert L.sample_mask(300, 0.7, rng).count == 210

    def test_indices_sorted_unique_in_range(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            plan = L.sample_mask(37, 0.7, rng)
            idx = plan.masked_indices
            assert np.all(np.diff(idx) > 0)
            assert idx[0] >= 0 and idx[-1] < 37

    def test_marginal_frequency(self):
        # each node is masked with probability ~= ratio (hypergeometric marginal)
        rng = np.random.default_rng(2)
        n, trials = 20, 4000
        hits = np.zeros(n)
        for _ in range(trials):
            hits[L.sample_mask(n, 0.7, rng).masked_indices] += 1
        freq = hits / trials
        assert np.all(np.abs(freq - 0.7) < 0.02)

    def test_bad_inputs(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            L.sample_mask(0, 0.5, rng)
        with pytest.raises(ValueError):
            L.sample_mask(5, 1.5, rng)

    def test_plan_rejects_unsorted(self):
        with pytest.raises(DataError):
            L.MaskPlan(masked_indices=np.array([3, 1]), ratio=0.5)
        with pytest.raises(DataError):
            L.MaskPlan(masked_indices=np.array([2, 2]), ratio=0.5)


def make_graph(rs, n=9, d=4):
    extent = 6
    cells = [(c, r) for c in range(extent) for r in range(extent)]
    picks = rs.choice(len(cells), size=n, replace=False)
    coords = np.array([cells[p] for p in picks], dtype=np.int64)
    return build_graph(PatchBag("bag", rs.standard_normal((n, d)), coords, 1))


class TestApplyMask:
    def test_substitutes_only_masked_rows(self):
        rs = np.random.default_rng(3)
        graph = make_graph(rs)
        token = np.full(4, 0.25)
        plan = L.MaskPlan(masked_indices=np.array([0, 5]), ratio=0.2)
        masked = L.apply_mask(graph, plan, token)
        assert np.array_equal(masked.bag.features[0], token)
        assert np.array_equal(masked.bag.features[5], token)
        keep = [1, 2, 3, 4, 6, 7, 8]
        assert np.array_equal(masked.bag.features[keep], graph.bag.features[keep])
        # structure untouched
        assert np.array_equal(masked.edge_src, graph.edge_src)
        assert np.array_equal(masked.bag.grid_coords, graph.bag.grid_coords)

    def test_input_not_modified(self):
        rs = np.random.default_rng(4)
        graph = make_graph(rs)
        before = np.array(graph.bag.features, copy=True)
        L.apply_mask(graph, L.MaskPlan(np.array([2]), 0.1), np.zeros(4))
        assert np.array_equal(graph.bag.features, before)

    def test_out_of_range_rejected(self):
        rs = np.random.default_rng(5)
        graph = make_graph(rs, n=4)
        with pytest.raises(DataError):
            L.apply_mask(graph, L.MaskPlan(np.array([4]), 0.5), np.zeros(4))


class TestReconLoss:
    def test_perfect_reconstruction_is_zero(self):
        rs = np.random.default_rng(6)
        x = rs.standard_normal((6, 4))
        plan = L.MaskPlan(np.arange(6), 1.0)
        assert abs(float(L.recon_loss(x, Tensor(x), plan).data)) < 1e-12

    def test_scale_invariance(self):
        rs = np.random.default_rng(7)
        x = rs.standard_normal((5, 3))
        plan = L.MaskPlan(np.arange(5), 1.0)
        assert abs(float(L.recon_loss(x, Tensor(3.7 * x), plan).data)) < 1e-12

    def test_mixed_rows_average(self):
        # one aligned row (distance 0) and one anti-aligned row (distance 2)
        orig = np.array([[1.0, 0.0], [0.0, 2.0]])
        rec = Tensor(np.array([[5.0, 0.0], [0.0, -1.0]]))
        plan = L.MaskPlan(np.array([0, 1]), 1.0)
        assert abs(float(L.recon_loss(orig, rec, plan).data) - 1.0) < 1e-12

    def test_empty_plan_is_zero(self):
        x = np.ones((3, 2))
        plan = L.MaskPlan(np.empty(0, dtype=np.int64), 0.0)
        loss = L.recon_loss(x, Tensor(x), plan)
        assert float(loss.data) == 0.0

    def test_only_masked_rows_receive_gradient(self):
        rs = np.random.default_rng(8)
        orig = rs.standard_normal((6, 4))
        rec = Tensor(rs.standard_normal((6, 4)), requires_grad=True)
        plan = L.MaskPlan(np.array([1, 3]), 0.3)
        L.recon_loss(orig, rec, plan).backward()
        grads = np.abs(rec.grad).sum(axis=1)
        assert np.all(grads[[1, 3]] > 0)
        assert np.all(grads[[0, 2, 4, 5]] == 0)

    def test_degenerate_rows_constant_no_gradient(self):
        orig = np.array([[0.0, 0.0], [1.0, 0.0]])
        rec = Tensor(np.array([[2.0, 2.0], [1.0, 0.0]]), requires_grad=True)
        plan = L.MaskPlan(np.array([0, 1]), 1.0)
        loss = L.recon_loss(orig, rec, plan)
        assert abs(float(loss.data) - 0.5) < 1e-12  # (1 + 0) / 2
        loss.backward()
        assert np.all(rec.grad[0] == 0)

    def test_gradient_flows_to_mask_token(self):
        rs = np.random.default_rng(9)
        graph = make_graph(rs, n=8)
        state = M.init_params(M.ModelDims(feature_dim=4, hidden_dim=8, num_heads=2,
                                          num_layers=2), seed=0)
        plan = L.MaskPlan(np.array([0, 2, 5]), 0.4)
        enc = M.encode(graph, state, masked_indices=plan.masked_indices)
        rec = M.decode(enc, state)
        L.recon_loss(graph.bag.features, rec, plan).backward()
        token = state.params["mask_token"]
        assert token.grad is not None and np.abs(token.grad).sum() > 0


class TestJointLoss:
    def test_hand_weighted_sum(self):
        total, bd = L.joint_loss(Tensor(0.5), Tensor(0.2), Tensor(0.3), L.LossWeights())
        assert abs(float(total.data) - 0.95) < 1e-12
        assert bd.recon == 0.5 and bd.comp == 0.2 and bd.corr == 0.3
        assert abs(bd.total - 0.95) < 1e-12

    def test_disabled_streams(self):
        w = L.LossWeights(recon=0.0, comp=0.1, corr=0.0)
        total, bd = L.joint_loss(None, Tensor(0.4), None, w)
        assert abs(float(total.data) - 0.04) < 1e-12
        assert bd.recon == 0.0 and bd.corr == 0.0

    def test_linearity_in_weights(self):
        r, c, q = Tensor(0.7), Tensor(0.11), Tensor(0.05)
        a, _ = L.joint_loss(r, c, q, L.LossWeights(recon=1.8, comp=0.1, corr=0.1))
        b, _ = L.joint_loss(r, c, q, L.LossWeights(recon=3.6, comp=0.2, corr=0.2))
        assert abs(float(b.data) - 2 * float(a.data)) < 1e-12

    def test_gradient_scales_with_weight(self):
        x = Tensor(2.0, requires_grad=True)
        total, _ = L.joint_loss(x * 1.0, None, None, L.LossWeights(recon=1.8, comp=0, corr=0))
        total.backward()
        assert abs(float(x.grad) - 1.8) < 1e-12

    def test_non_finite_aborts(self):
        with pytest.raises(FloatingPointError):
            L.joint_loss(Tensor(float("nan")), Tensor(0.1), Tensor(0.1), L.LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            L.LossWeights(recon=-1.0)
