#!/usr/bin/env python3

""" Test the model containers, the prior draw and the state audit. """

import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy import sparse

import deep_relational.model_core as mc
from deep_relational.randkit import RngStream


def ring_graph(n_nodes, test_mask=()):
    """ Directed ring 0 -> 1 -> ... -> n-1 -> 0. """
    pairs = [(i, (i + 1) % n_nodes) for i in range(n_nodes)]
    return mc.SparseGraph.from_pairs(n_nodes, pairs, test_mask=test_mask)


def small_state(mode="standard", K=3, L=3, n_nodes=6, seed=0):
    graph = ring_graph(n_nodes)
    hp = mc.HyperParams(K=K, L=L, mode=mode, iterations=10, burn_in=5)
    features = mc.resolve_features(mc.FeatureMatrix.empty(n_nodes), hp)
    state = mc.init_state(graph, features, hp, RngStream(seed))
    return state, graph, features, hp


class TestSparseGraph(unittest.TestCase):
    def test_sorted_and_deduplicated(self):
        graph = mc.SparseGraph(4, [2, 0, 2, 1], [3, 1, 3, 0])
        self.assertEqual(graph.edges, [(0, 1), (1, 0), (2, 3)])
        self.assertEqual(graph.n_edges, 3)

    def test_self_loop(self):
        with self.assertRaises(ValueError):
            mc.SparseGraph(3, [1], [1])

    def test_endpoint_range(self):
        with self.assertRaises(ValueError):
            mc.SparseGraph(3, [0], [3])

    def test_undirected_closure(self):
        """ Undirected graphs need both orientations of every edge. """
        with self.assertRaises(ValueError):
            mc.SparseGraph(3, [0], [1], directed=False)
        graph = mc.SparseGraph.from_pairs(3, [(0, 1), (1, 2)], directed=False)
        self.assertEqual(graph.n_edges, 4)
        self.assertTrue(np.all(graph.contains([(1, 0), (2, 1)])))

    def test_mask_overlap(self):
        """ A held-out dyad may not also be a training edge. """
        with self.assertRaises(ValueError):
            mc.SparseGraph.from_pairs(3, [(0, 1)], test_mask=[(0, 1)])

    def test_neighbours(self):
        graph = mc.SparseGraph.from_pairs(4, [(0, 2), (1, 2), (2, 3)])
        in_neighbors = graph.in_neighbors
        assert_array_equal(in_neighbors[2], [0, 1])
        self.assertEqual(in_neighbors[0].size, 0)
        assert_array_equal(graph.out_degree, [1, 1, 1, 0])
        self.assertEqual(graph.adjacency().sum(), 3)


class TestFeatureMatrix(unittest.TestCase):
    def test_negative_values(self):
        with self.assertRaises(ValueError):
            mc.FeatureMatrix.from_triplets(2, 2, [0], [1], [-1.0])

    def test_duplicate_cell(self):
        with self.assertRaises(ValueError):
            mc.FeatureMatrix.from_triplets(2, 2, [0, 0], [1, 1], [1.0, 2.0])

    def test_identity_and_empty(self):
        identity = mc.FeatureMatrix.identity(4)
        self.assertEqual(identity.nnz, 4)
        self.assertAlmostEqual(identity.density, 0.25)
        self.assertEqual(mc.FeatureMatrix.empty(4).density, 0.0)

    def test_triplets(self):
        features = mc.FeatureMatrix.from_triplets(3, 2, [2, 0], [1, 0], [4.0, 1.5])
        nodes, feats, values = features.triplets()
        assert_array_equal(nodes, [0, 2])
        assert_array_equal(feats, [0, 1])
        assert_allclose(values, [1.5, 4.0])


class TestHyperParams(unittest.TestCase):
    def test_defaults(self):
        hp = mc.HyperParams()
        self.assertEqual((hp.K, hp.L, hp.iterations, hp.burn_in), (20, 4, 2000, 1000))
        self.assertEqual(hp.n_retained, 1000)
        self.assertEqual(hp.shape_M(50), 50.0)

    def test_mmsb_has_one_layer(self):
        self.assertEqual(mc.HyperParams(mode="mmsb").L, 1)

    def test_bad_values(self):
        with self.assertRaises(ValueError):
            mc.HyperParams(burn_in=10, iterations=10)
        with self.assertRaises(ValueError):
            mc.HyperParams(mode="deep")
        with self.assertRaises(ValueError):
            mc.HyperParams(theta_M=0.0)

    def test_retained_iterations(self):
        hp = mc.HyperParams(iterations=10, burn_in=4, thin=2)
        kept = [it for it in range(1, 11) if hp.is_retained(it)]
        self.assertEqual(kept, [6, 8, 10])
        self.assertEqual(hp.n_retained, len(kept))


class TestInitState(unittest.TestCase):
    def test_fresh_state_is_valid(self):
        state, graph, features, _ = small_state()
        self.assertEqual(mc.validate_state(state, graph, features), [])

    def test_deterministic(self):
        """ The same seed reproduces the prior draw exactly. """
        first, *_ = small_state(seed=4)
        second, *_ = small_state(seed=4)
        assert_array_equal(first.X, second.X)
        for pi_a, pi_b in zip(first.pi, second.pi):
            assert_array_equal(pi_a, pi_b)
        for B_a, B_b in zip(first.B, second.B):
            assert_array_equal(B_a.toarray(), B_b.toarray())

    def test_support_follows_edges(self):
        """ B lives on the training edges plus the diagonal. """
        state, graph, *_ = small_state()
        pattern = (state.B[0] != 0).toarray()
        expected = (graph.adjacency() + sparse.identity(graph.n_nodes)).toarray() > 0
        assert_array_equal(pattern, expected)

    def test_inde_is_diagonal(self):
        state, graph, features, _ = small_state(mode="inde")
        for B in state.B:
            self.assertEqual(abs(B - sparse.diags(B.diagonal())).sum(), 0.0)
        self.assertEqual(mc.validate_state(state, graph, features), [])

    def test_full_skips_held_out(self):
        """ The dense support leaves out held-out dyads. """
        graph = ring_graph(5, test_mask=[(0, 2)])
        hp = mc.HyperParams(K=2, L=2, mode="full", iterations=4, burn_in=1)
        features = mc.FeatureMatrix.empty(5)
        state = mc.init_state(graph, features, hp, RngStream(1))
        self.assertEqual(state.B[0].nnz, 24)
        self.assertEqual(state.B[0][0, 2], 0.0)
        self.assertEqual(mc.validate_state(state, graph, features), [])

    def test_single_community(self):
        state, *_ = small_state(K=1)
        for pi in state.pi:
            assert_array_equal(pi, 1.0)

    def test_mmsb(self):
        state, graph, features, _ = small_state(mode="mmsb")
        self.assertEqual(state.L, 1)
        self.assertEqual(state.B, [])
        self.assertEqual(state.D, 0)
        self.assertEqual(mc.validate_state(state, graph, features), [])

    def test_plain_uses_identity(self):
        state, *_ = small_state(mode="plain")
        self.assertEqual(state.T.shape, (6, 3))

    def test_node_mismatch(self):
        hp = mc.HyperParams(K=2, L=2, iterations=2, burn_in=0)
        with self.assertRaises(ValueError):
            mc.init_state(ring_graph(4), mc.FeatureMatrix.empty(5), hp, 0)

    def test_edge_counts_assigned(self):
        """ Every training edge starts with a positive latent count. """
        state, graph, *_ = small_state()
        self.assertEqual(state.z_edge_total.shape, (graph.n_edges,))
        self.assertTrue(np.all(state.z_edge_total >= 1))
        self.assertEqual(state.z_block.sum(), state.z_edge_total.sum())


class TestValidateState(unittest.TestCase):
    def test_bad_membership_row(self):
        """ A row summing to 0.9 is reported with its layer and node. """
        state, graph, features, _ = small_state()
        state.pi[1][2] = np.array([0.5, 0.3, 0.1])
        violations = mc.validate_state(state, graph, features)
        self.assertEqual(len(violations), 1, msg=violations)
        self.assertIn("layer 2 node 2", violations[0])

    def test_mass_off_support(self):
        """ Mass on a non-edge pair is one violation naming the dyad. """
        state, graph, features, _ = small_state()
        B = state.B[0].tolil()
        B[0, 3] = 0.7
        state.B[0] = B.tocsc()
        violations = mc.validate_state(state, graph, features)
        self.assertEqual(len(violations), 1, msg=violations)
        self.assertIn("(0, 3)", violations[0])

    def test_latent_marginals(self):
        state, graph, features, _ = small_state()
        state.z_block = state.z_block.copy()
        state.z_block[0, 0] += 1
        violations = mc.validate_state(state, graph, features)
        self.assertTrue(any("marginals" in v for v in violations), msg=violations)

    def test_state_untouched(self):
        state, graph, features, _ = small_state()
        before = state.copy()
        mc.validate_state(state, graph, features)
        assert_array_equal(before.X, state.X)
        assert_array_equal(before.pi[0], state.pi[0])


class TestRates(unittest.TestCase):
    def test_link_probability(self):
        X = np.array([[1, 0], [0, 1], [1, 1]])
        Lambda = np.array([[np.log(2.0), 0.0], [0.0, 0.0]])
        probs = mc.link_probabilities(X, Lambda, np.array([0, 1]), np.array([2, 2]))
        assert_allclose(probs, [0.5, 0.0])

    def test_pair_mass(self):
        """ Held-out dyads come out of the pair mass. """
        X = np.array([[1.0], [2.0], [3.0]])
        self.assertEqual(mc.offdiagonal_pair_mass(X)[0, 0], 36.0 - 14.0)
        graph = mc.SparseGraph.from_pairs(3, [(1, 2)], test_mask=[(0, 1)])
        self.assertEqual(mc.observed_pair_mass(X, graph)[0, 0], 22.0 - 2.0)

    def test_trace_running_mean(self):
        trace = mc.PosteriorTrace([(0, 1)], keep_draws=True)
        X = np.ones((2, 1))
        trace.record(X, np.array([[np.log(2.0)]]), [3.0])
        trace.record(X, np.array([[np.log(4.0)]]), [5.0])
        self.assertEqual(trace.n_retained, 2)
        self.assertAlmostEqual(trace.mean_link_prob[(0, 1)], 0.625)
        assert_allclose(trace.mean_latent_counts, [4.0])
        self.assertEqual(len(trace.draws), 2)


if __name__ == "__main__":
    unittest.main()
