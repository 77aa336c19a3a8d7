import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netsketch.assoc import (
    EQ12,
    EQ13,
    FeatureMap,
    OpCounter,
    TernaryTensor,
    assoc_conv_step,
    associative_convolve_all,
    build_mst,
    build_random_tree,
    dense_convolve,
    direct_convolve_all,
    distance,
    distance_matrix,
    sketch_layer_convolve,
    tern_combine,
    ternary_conv,
    tree_from_parents,
)
from netsketch.sketch import refined_sketch
from netsketch.tensor import BinaryTensor, RealTensor, Shape, Sketch, reconstruct

import oracles

S3 = Shape(3, 1, 1)
X123 = RealTensor(S3, [1.0, 2.0, 3.0])
ONES = BinaryTensor.from_signs(S3, [1, 1, 1])
MID = BinaryTensor.from_signs(S3, [1, -1, 1])


def random_tensors(k, shape, rng, flip=None):
    """k random binary tensors; with ``flip`` they are noisy copies of one base pattern."""
    base = rng.random(shape.t) < 0.5
    out = []
    for _ in range(k):
        if flip is None:
            bits = rng.random(shape.t) < 0.5
        else:
            bits = base ^ (rng.random(shape.t) < flip)
            if rng.random() < 0.5:
                bits = ~bits
        out.append(BinaryTensor.from_bits(shape, bits))
    return out


class TestTernary:
    def test_truth_table(self):
        s1 = Shape(1, 1, 1)
        p, n = BinaryTensor.from_signs(s1, [1]), BinaryTensor.from_signs(s1, [-1])
        assert tern_combine(p, n).entries() == [(0, -1)]
        assert tern_combine(n, p).entries() == [(0, 1)]
        assert tern_combine(p, p).nnz == 0
        assert tern_combine(n, n).nnz == 0

    def test_example(self):
        T = tern_combine(ONES, MID)
        assert T.entries() == [(1, -1)] and T.nnz == 1

    @settings(max_examples=50, deadline=None)
    @given(t=st.integers(1, 200), seed=st.integers(0, 10**6))
    def test_is_half_difference(self, t, seed):
        rng = np.random.default_rng(seed)
        B0, B1 = random_tensors(2, Shape(t, 1, 1), rng)
        T = tern_combine(B0, B1)
        np.testing.assert_array_equal(T.dense(), (B1.signs().astype(int) - B0.signs()) // 2)
        r = int(B0.signs().astype(int) @ B1.signs())
        assert T.nnz == (t - r) // 2

    def test_invalid_ternary(self):
        with pytest.raises(ValueError):
            TernaryTensor(S3, [2, 1], [1, 1])
        with pytest.raises(ValueError):
            TernaryTensor(S3, [3], [1])

    def test_ternary_conv(self):
        c = OpCounter()
        assert ternary_conv(X123, TernaryTensor(S3, [1], [-1]), c) == -2
        assert c.fadds == 1 and c.ternary_selects == 3
        c = OpCounter()
        assert ternary_conv(X123, TernaryTensor(S3, [], []), c) == 0 and c.fadds == 0
        assert ternary_conv(X123, TernaryTensor(S3, [0, 1, 2], [1, 1, 1]), c) == 6


class TestAssocStep:
    def _node(self, parent, child):
        return tree_from_parents([parent, child], [None, 0]).node(1)

    def test_eq12_example(self):
        node = self._node(ONES, MID)
        assert node.eq_choice == EQ12 and node.edge_r == 1
        c = OpCounter()
        assert assoc_conv_step(6.0, X123, node, c) == 2.0
        assert c.fadds == 2 and c.doublings == 1

    def test_identical_child(self):
        node = self._node(MID, MID)
        c = OpCounter()
        assert assoc_conv_step(2.0, X123, node, c) == 2.0
        assert c.fadds == 1

    def test_antipodal_uses_eq13(self):
        node = self._node(MID, ~MID)
        assert node.eq_choice == EQ13 and node.edge_r == -3 and node.edge_ternary.nnz == 0
        c = OpCounter()
        assert assoc_conv_step(2.0, X123, node, c) == -2.0
        assert c.fadds == 1

    @settings(max_examples=60, deadline=None)
    @given(t=st.integers(1, 120), seed=st.integers(0, 10**6))
    def test_step_count_law(self, t, seed):
        rng = np.random.default_rng(seed)
        shape = Shape(t, 1, 1)
        P, B = random_tensors(2, shape, rng)
        X = RealTensor(shape, rng.standard_normal(t))
        node = self._node(P, B)
        r = int(P.signs().astype(int) @ B.signs())
        assert node.eq_choice == (EQ12 if r >= 0 else EQ13)
        assert node.edge_ternary.nnz == (t - abs(r)) // 2
        c = OpCounter()
        y = assoc_conv_step(float(X.data @ P.signs()), X, node, c)
        assert y == pytest.approx(float(X.data @ B.signs()), abs=1e-9 * np.abs(X.data).sum())
        assert c.fadds == (t - abs(r)) // 2 + 1


class TestDistance:
    def test_examples(self):
        assert distance(MID, MID) == 0
        assert distance(MID, ~MID) == 0
        assert distance(ONES, MID) == 1

    def test_pseudometric_on_samples(self):
        rng = np.random.default_rng(7)
        shape = Shape(17, 1, 1)
        T = random_tensors(12, shape, rng)
        D = distance_matrix(T)
        np.testing.assert_array_equal(D, D.T)
        assert np.all(np.diag(D) == 0)
        assert np.all(D <= shape.t // 2)
        for i in range(12):
            for j in range(12):
                assert D[i, j] == distance(T[i], T[j])
                for k in range(12):
                    assert D[i, k] <= D[i, j] + D[j, k]


class TestTrees:
    def test_single_and_pair(self):
        assert build_mst([MID]).edges() == []
        assert build_mst([MID, ONES]).edges() == [(0, 1)]
        assert build_random_tree([MID], seed=3).edges() == []

    def test_spec_three_node_distances(self):
        shape = Shape(8, 1, 1)
        # d(0,2)=3 with d(0,1)=d(1,2)=1 would break the triangle inequality; use d(0,2)=2
        b0 = BinaryTensor.from_signs(shape, [-1, 1, 1, 1, 1, 1, 1, 1])
        b1 = BinaryTensor.from_signs(shape, [1] * 8)
        b2 = BinaryTensor.from_signs(shape, [1, -1, 1, 1, 1, 1, 1, 1])
        tensors = [b0, b1, b2]
        D = distance_matrix(tensors)
        assert D[0, 1] == 1 and D[1, 2] == 1 and D[0, 2] == 2
        tree = build_mst(tensors)
        assert sorted(tuple(sorted(e)) for e in tree.edges()) == [(0, 1), (1, 2)]
        assert tree.total_weight() == 2 == oracles.brute_force_mst_weight(D)

    def test_tie_breaking_prefers_low_parent(self):
        shape = Shape(4, 1, 1)
        same = [BinaryTensor.from_signs(shape, [1, 1, -1, 1])] * 4
        tree = build_mst(same)
        assert tree.edges() == [(0, 1), (0, 2), (0, 3)]

    @pytest.mark.parametrize("k", range(1, 8))
    def test_mst_matches_brute_force(self, k):
        rng = np.random.default_rng(k)
        for trial in range(15):
            shape = Shape(int(rng.integers(3, 40)), 1, 1)
            T = random_tensors(k, shape, rng, flip=0.2 if trial % 2 else None)
            D = distance_matrix(T)
            assert build_mst(T).total_weight() == oracles.brute_force_mst_weight(D)

    def test_random_tree_is_deterministic_and_spanning(self):
        rng = np.random.default_rng(0)
        T = random_tensors(9, Shape(20, 1, 1), rng)
        a, b = build_random_tree(T, seed=5), build_random_tree(T, seed=5)
        assert a.edges() == b.edges()
        assert len(a.edges()) == 8 and sorted(a.traversal()) == list(range(9))

    def test_random_tree_is_uniform(self):
        # K_3 has 3 labelled spanning trees; all should appear about equally often
        T = random_tensors(3, Shape(5, 1, 1), np.random.default_rng(0))
        counts = {}
        for seed in range(3000):
            key = tuple(sorted(tuple(sorted(e)) for e in build_random_tree(T, seed).edges()))
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 3
        assert all(800 < c < 1200 for c in counts.values())

    def test_rejects_non_tree(self):
        with pytest.raises(ValueError):
            tree_from_parents([MID, MID], [None, None])
        with pytest.raises(ValueError):
            tree_from_parents([MID, MID, MID], [None, 2, 1])

    def test_depth_first_traversal_order(self):
        # root 1 -> 0 -> 3, root 1 -> 2
        T = [MID, ONES, ~ONES, MID]
        tree = tree_from_parents(T, [1, None, 1, 0])
        assert tree.traversal() == [1, 0, 3, 2]


class TestConvolveAll:
    def test_direct_example(self):
        c = OpCounter()
        assert direct_convolve_all(X123, [MID], c) == [2.0] and c.fadds == 3

    def test_zero_input(self):
        assert direct_convolve_all(RealTensor.zeros(S3), [MID, ONES], OpCounter()) == [0.0, 0.0]

    def test_negation_symmetry(self):
        y = direct_convolve_all(X123, [MID, ~MID], OpCounter())
        assert y[0] == -y[1]

    def test_identical_tensors_cost(self):
        k = 6
        tensors = [MID] * k
        c = OpCounter()
        y = associative_convolve_all(X123, tensors, build_mst(tensors), c)
        assert y == [2.0] * k
        assert c.fadds == 3 + (k - 1)

    @settings(max_examples=40, deadline=None)
    @given(k=st.integers(1, 24), t=st.integers(1, 300), seed=st.integers(0, 10**6),
           correlated=st.booleans())
    def test_equivalence_and_count_law(self, k, t, seed, correlated):
        rng = np.random.default_rng(seed)
        shape = Shape(t, 1, 1)
        T = random_tensors(k, shape, rng, flip=0.15 if correlated else None)
        X = RealTensor(shape, rng.standard_normal(t))
        direct = np.array(direct_convolve_all(X, T, OpCounter()))
        scale = np.abs(X.data).sum()
        mst_cost = None
        for tree in (build_mst(T), build_random_tree(T, seed)):
            c = OpCounter()
            y = np.array(associative_convolve_all(X, T, tree, c))
            assert np.all(np.abs(y - direct) <= 1e-9 * np.maximum(scale, np.abs(direct)))
            R = oracles.dense_signs(T) @ oracles.dense_signs(T).T
            expected = t + sum((t - abs(int(R[p, q]))) // 2 + 1 for p, q in tree.edges())
            assert c.fadds == expected == tree.fadds_per_window(t)
            assert c.fmuls == 0
            if mst_cost is None:
                mst_cost = c.fadds
            else:
                assert mst_cost <= c.fadds


class TestLayerConvolve:
    def test_one_by_one_kernels(self):
        shape = Shape(1, 1, 1)
        sk = Sketch(shape, [BinaryTensor.from_signs(shape, [-1])], [0.5], [1.0, 0.0])
        fm = FeatureMap(np.arange(12.0).reshape(1, 3, 4))
        out = sketch_layer_convolve(fm, [sk], "mst", 1, OpCounter())
        np.testing.assert_allclose(out[0].data[0], -0.5 * fm.data[0])

    def test_exact_sketch_matches_full_precision(self):
        shape = Shape(2, 2, 2)
        rng = np.random.default_rng(1)
        basis = [BinaryTensor.from_bits(shape, rng.random(8) < 0.5) for _ in range(2)]
        sk = Sketch(shape, basis, [1.5, -0.25], [1.0, 0.5, 0.0])
        W = reconstruct(sk)
        fm = FeatureMap(rng.standard_normal((2, 5, 6)))
        out = sketch_layer_convolve(fm, [sk], "random", 1, OpCounter(), seed=2)
        np.testing.assert_allclose(out[0].data, dense_convolve(fm, W).data, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("mode", ["mst", "random", "none"])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_against_dense_oracle(self, mode, stride):
        rng = np.random.default_rng(42)
        shape = Shape(1, 2, 2)
        Ws = [RealTensor(shape, rng.standard_normal(4)) for _ in range(2)]
        sks = [refined_sketch(W, 2) for W in Ws]
        fm = FeatureMap(rng.standard_normal((1, 4, 4)))
        counter, combine = OpCounter(), OpCounter()
        out = sketch_layer_convolve(fm, sks, mode, stride, counter, seed=3, combine_counter=combine)
        for o, s in zip(out, sks):
            ref = oracles.dense_valid_conv(fm.data, reconstruct(s).to_array(), stride)
            np.testing.assert_allclose(o.data[0], ref, rtol=1e-9, atol=1e-12)
        P = out[0].data.size
        assert combine.fmuls == P * 2 * 2 and combine.fadds == P * 2 * 1
        if mode == "none":
            assert counter.fadds == P * 4 * 4

    def test_fmuls_independent_of_tree_mode(self):
        rng = np.random.default_rng(0)
        shape = Shape(2, 3, 3)
        sks = [refined_sketch(RealTensor(shape, rng.standard_normal(18)), 3) for _ in range(4)]
        fm = FeatureMap(rng.standard_normal((2, 6, 6)))
        fmuls = set()
        for mode in ("mst", "random", "none"):
            c = OpCounter()
            sketch_layer_convolve(fm, sks, mode, 1, c)
            fmuls.add(c.fmuls)
        assert fmuls == {16 * 4 * 3}

    def test_geometry_mismatch(self):
        shape = Shape(2, 3, 3)
        sk = Sketch(shape, [BinaryTensor.ones(shape)], [1.0], [1.0, 0.0])
        with pytest.raises(ValueError):
            sketch_layer_convolve(FeatureMap(np.zeros((1, 5, 5))), [sk], "mst", 1, OpCounter())
        with pytest.raises(ValueError):
            sketch_layer_convolve(FeatureMap(np.zeros((2, 2, 5))), [sk], "mst", 1, OpCounter())

    def test_counter_merge(self):
        a = OpCounter(1, 2, 3, 4)
        b = OpCounter(10, 20, 30, 40)
        assert a + b == OpCounter(11, 22, 33, 44)
        a.merge(b)
        assert a == OpCounter(11, 22, 33, 44)
