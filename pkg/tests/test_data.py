import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmil import data as D


def brute_force_edges(coords):
    """Independent O(N^2) oracle: Euclidean distance at most 2*sqrt(2)."""
    edges = set()
    n = len(coords)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = math.dist(coords[i], coords[j])
            if d <= 2.0 * math.sqrt(2.0) + 1e-9:
                edges.add((j, i))
    return edges


def random_coords(rs, n, extent=15):
    cells = [(c, r) for c in range(extent) for r in range(extent)]
    picks = rs.choice(len(cells), size=n, replace=False)
    return np.array([cells[p] for p in picks], dtype=np.int64)


class TestAlignContour:
    def test_hand_traced(self):
        out = D.align_contour(D.Contour(230, 450, 100, 80), 224)
        assert out == D.Contour(224, 448, 106, 82)

    def test_already_aligned(self):
        c = D.Contour(0, 0, 300, 300)
        assert D.align_contour(c, 224) == c

    @settings(max_examples=50, deadline=None)
    @given(
        x=st.integers(0, 10000), y=st.integers(0, 10000),
        w=st.integers(1, 5000), h=st.integers(1, 5000),
        step=st.integers(1, 512),
    )
    def test_idempotent_and_covering(self, x, y, w, h, step):
        c = D.Contour(x, y, w, h)
        a = D.align_contour(c, step)
        assert D.align_contour(a, step) == a
        assert a.start_x % step == 0 and a.start_y % step == 0
        # aligned span covers the original region
        assert a.start_x <= c.start_x and a.start_y <= c.start_y
        assert a.start_x + a.w >= c.start_x + c.w
        assert a.start_y + a.h >= c.start_y + c.h

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            D.align_contour(D.Contour(10, 10, 5, 5), 0)
        with pytest.raises(ValueError):
            D.align_contour(D.Contour(-1, 0, 5, 5), 224)


class TestBuildEdges:
    def test_interior_node_of_5x5_block(self):
        coords = np.array([(c, r) for c in range(5) for r in range(5)])
        src, dst = D.build_edges(coords)
        center = 12  # (2, 2)
        assert np.sum(dst == center) == 24

    def test_corner_of_3x3_block(self):
        coords = np.array([(c, r) for c in range(3) for r in range(3)])
        src, dst = D.build_edges(coords)
        corner = 0  # (0, 0); the opposite corner sits at exactly 2*sqrt(2)
        assert np.sum(dst == corner) == 8

    def test_far_nodes_unconnected(self):
        src, dst = D.build_edges(np.array([[0, 0], [3, 0]]))
        assert src.size == 0

    def test_duplicates_rejected(self):
        with pytest.raises(D.DataError):
            D.build_edges(np.array([[1, 1], [1, 1]]))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 60))
    def test_matches_brute_force(self, seed, n):
        rs = np.random.RandomState(seed)
        coords = random_coords(rs, n)
        src, dst = D.build_edges(coords)
        assert set(zip(src.tolist(), dst.tolist())) == brute_force_edges(coords.tolist())

    def test_symmetry(self):
        rs = np.random.RandomState(11)
        coords = random_coords(rs, 50)
        src, dst = D.build_edges(coords)
        pairs = set(zip(src.tolist(), dst.tolist()))
        assert all((i, j) in pairs for j, i in pairs)


class TestGlobalNode:
    def make_graph(self, n):
        rs = np.random.RandomState(0)
        bag = D.PatchBag("b", rs.randn(n, 4), random_coords(rs, n), 0)
        src, dst = D.build_edges(bag.grid_coords)
        return D.PatchGraph(bag=bag, edge_src=src, edge_dst=dst)

    def test_seven_patches(self):
        g = D.attach_global_node(self.make_graph(7))
        assert g.global_index == 7
        assert np.sum(g.edge_dst == 7) == 7
        assert np.sum(g.edge_src == 7) == 0  # pooling only: no global->patch edges

    def test_single_patch(self):
        g = D.attach_global_node(self.make_graph(1))
        assert g.global_index == 1
        assert np.sum(g.edge_dst == 1) == 1

    def test_patch_edges_unchanged(self):
        base = self.make_graph(12)
        g = D.attach_global_node(base)
        keep = g.edge_dst < 12
        assert np.array_equal(g.edge_src[keep], base.edge_src)
        assert np.array_equal(g.edge_dst[keep], base.edge_dst)

    def test_double_attach_rejected(self):
        g = D.attach_global_node(self.make_graph(3))
        with pytest.raises(D.DataError):
            D.attach_global_node(g)


def flood_fill_size(coords):
    """Size of the 4-connected component containing the first coordinate."""
    cells = {tuple(c) for c in coords}
    start = tuple(coords[0])
    seen = {start}
    stack = [start]
    while stack:
        c, r = stack.pop()
        for nb in ((c + 1, r), (c - 1, r), (c, r + 1), (c, r - 1)):
            if nb in cells and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen)


class TestSyntheticGenerator:
    CFG = D.SynthConfig(num_bags=8, grid_extent=25, nodes_per_bag=400, feature_dim=6,
                        positive_ratio=0.05, size_jitter=0.0)

    def test_negative_bags_have_no_positive_instances(self):
        for bag in D.generate_synthetic_dataset(self.CFG, 1):
            if bag.bag_label == 0:
                assert bag.instance_labels.sum() == 0

    def test_positive_blob_size_and_connectivity(self):
        for bag in D.generate_synthetic_dataset(self.CFG, 1):
            if bag.bag_label == 1:
                n = bag.num_patches
                expected = math.ceil(0.05 * n)
                pos = bag.grid_coords[bag.instance_labels]
                assert len(pos) == expected
                assert flood_fill_size(pos) == expected  # one 4-connected blob

    def test_tissue_mask_connected(self):
        for bag in D.generate_synthetic_dataset(self.CFG, 2):
            assert flood_fill_size(bag.grid_coords) == bag.num_patches

    def test_determinism(self):
        a = D.generate_synthetic_dataset(self.CFG, 3)
        b = D.generate_synthetic_dataset(self.CFG, 3)
        assert a == b

    def test_zero_ratio_rejected(self):
        cfg = D.SynthConfig(num_bags=2, grid_extent=10, nodes_per_bag=20, feature_dim=4,
                            positive_ratio=0.0)
        with pytest.raises(D.GenerationError):
            D.generate_synthetic_dataset(cfg, 0)


class TestBagSerialization:
    def make_bag(self, rs, n=17, d=5, with_inst=True):
        feats = rs.randn(n, d).astype(np.float32).astype(np.float64)
        coords = random_coords(rs, n)
        inst = rs.rand(n) > 0.7 if with_inst else None
        return D.PatchBag("bag", feats, coords, 1, inst)

    def test_round_trip(self, tmp_path):
        rs = np.random.RandomState(9)
        bag = self.make_bag(rs)
        path = tmp_path / "bag.srmb"
        D.save_bag(bag, path)
        assert D.load_bag(path) == bag

    def test_round_trip_without_instance_labels(self, tmp_path):
        rs = np.random.RandomState(10)
        bag = self.make_bag(rs, with_inst=False)
        D.save_bag(bag, tmp_path / "bag.srmb")
        assert D.load_bag(tmp_path / "bag.srmb") == bag

    def test_minimal_bag(self, tmp_path):
        bag = D.PatchBag("bag", np.array([[0.5]]), np.array([[0, 0]]), 0)
        D.save_bag(bag, tmp_path / "bag.srmb")
        assert D.load_bag(tmp_path / "bag.srmb") == bag

    def test_truncation_detected(self, tmp_path):
        rs = np.random.RandomState(12)
        path = tmp_path / "bag.srmb"
        D.save_bag(self.make_bag(rs), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 7])
        with pytest.raises(D.FormatError, match="offset"):
            D.load_bag(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bag.srmb"
        D.save_bag(self.make_bag(np.random.RandomState(13)), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(D.FormatError, match="magic"):
            D.load_bag(path)


class TestManifest:
    def test_splits_proportions(self):
        splits = D.assign_splits(100, 0)
        assert splits.count("train") == 60
        assert splits.count("val") == 15
        assert splits.count("test") == 25

    def test_splits_within_one_bag(self):
        for b in (7, 33, 101):
            splits = D.assign_splits(b, 1)
            assert abs(splits.count("train") - 0.6 * b) <= 1
            assert abs(splits.count("val") - 0.15 * b) <= 1

    def test_manifest_round_trip(self, tmp_path):
        entries = [
            {"id": "a", "path": "bags/a.srmb", "label": 0, "split": "train"},
            {"id": "b", "path": "bags/b.srmb", "label": 1, "split": "test"},
        ]
        path = tmp_path / "manifest.jsonl"
        D.write_manifest(entries, path)
        assert D.read_manifest(path) == entries

    def test_manifest_bad_split(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text('{"id": "a", "path": "p", "label": 0, "split": "dev"}\n')
        with pytest.raises(D.DataError, match="split"):
            D.read_manifest(path)

    def test_manifest_missing_field(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text('{"id": "a", "label": 0, "split": "train"}\n')
        with pytest.raises(D.DataError, match="missing"):
            D.read_manifest(path)
