#!/usr/bin/env python3

""" Test the conditional updates one by one, then whole sweeps and chains. """

import math
import os
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy import sparse, stats

import deep_relational.gibbs as gb
import deep_relational.model_core as mc
from deep_relational.randkit import RngStream
from deep_relational.synthgen import random_graph

Z_TOL = 4.0
SLOW = os.environ.get("DEEP_RELATIONAL_SLOW") == "1"


def bare_state(N, K, L=1, D=0, **fields):
    """ A hand built state; only the fields an update reads need to make sense. """
    base = dict(
        T=np.zeros((D, K)),
        pi=[np.full((N, K), 1.0 / K) for _ in range(L)],
        B=[sparse.identity(N, format="csc") for _ in range(L - 1)],
        Lambda=np.zeros((K, K)),
        X=np.zeros((N, K), dtype=np.int64),
        z_row=np.zeros((N, K), dtype=np.int64),
        z_col=np.zeros((N, K), dtype=np.int64),
        z_block=np.zeros((K, K), dtype=np.int64),
        z_edge_total=np.zeros(0, dtype=np.int64),
        M=1.0,
        alpha=1.0,
        gamma1=np.ones(L - 1),
        gamma0=np.ones(L - 1),
        c=np.ones(L),
        gamma_feat=np.ones(D),
        k_Lambda=1.0,
        theta_Lambda=1.0,
    )
    base.update(fields)
    return mc.ModelState(**base)


def bare_counts(N, K, L=1, D=0, **fields):
    base = dict(
        m=[np.zeros((N, K), dtype=np.int64) for _ in range(L)],
        y=[np.zeros((N, K), dtype=np.int64) for _ in range(L)],
        q=[np.ones(N) for _ in range(L)],
        h_edge=[],
        h_feat=np.zeros((D, K), dtype=np.int64),
        h_alpha=0,
    )
    base.update(fields)
    return mc.AugmentedCounts(**base)


def fitted_setup(mode="standard", test_mask=(), sample_hypers=True, seed=0):
    """ A small featured graph with a freshly drawn state. """
    gen = np.random.default_rng(seed)
    n_nodes = 14
    pairs = {(i, (i + 1) % n_nodes) for i in range(n_nodes)}
    pairs |= {(int(i), int(j)) for i, j in gen.integers(0, n_nodes, (20, 2)) if i != j}
    pairs -= set(test_mask)
    graph = mc.SparseGraph.from_pairs(n_nodes, sorted(pairs), test_mask=test_mask)
    hp = mc.HyperParams(K=3, L=3, mode=mode, iterations=8, burn_in=3,
                        sample_hypers=sample_hypers)
    raw = mc.FeatureMatrix.from_triplets(
        n_nodes, 4, np.arange(n_nodes), np.arange(n_nodes) % 4, np.ones(n_nodes)
    )
    features = mc.resolve_features(raw, hp)
    state = mc.init_state(graph, features, hp, RngStream(seed))
    return state, graph, features, hp


class TestUpdateT(unittest.TestCase):
    def test_plug_in(self):
        """ h = 3, gamma = c = 1 and log q = -1 give Gam(4, rate 2), mean 2. """
        K = 20_000
        features = mc.FeatureMatrix.from_triplets(1, 1, [0], [0], [1.0])
        state = bare_state(1, K, D=1)
        counts = bare_counts(1, K, D=1, q=[np.array([math.exp(-1.0)])],
                             h_feat=np.full((1, K), 3, dtype=np.int64))
        gb.update_T(state, counts, features, RngStream(1))
        self.assertEqual(state.T.shape, (1, K))
        self.assertLess(abs(state.T.mean() - 2.0), Z_TOL * math.sqrt(1.0 / K))

    def test_no_features(self):
        state = bare_state(3, 2)
        gb.update_T(state, bare_counts(3, 2), mc.FeatureMatrix.empty(3), RngStream(2))
        self.assertEqual(state.T.shape, (0, 2))


class TestUpdatePi(unittest.TestCase):
    def test_plug_in(self):
        """ psi = (1, 1) and m = (8, 0) give Dirichlet(9, 1), mean 0.9. """
        N = 20_000
        state = bare_state(N, 2)
        m = np.tile([8, 0], (N, 1))
        gb.update_pi(state, bare_counts(N, 2, m=[m]), mc.FeatureMatrix.empty(N), 1, RngStream(3))
        pi = state.pi[0]
        assert_allclose(pi.sum(axis=1), 1.0)
        se = math.sqrt(9.0 / (100.0 * 11.0) / N)
        self.assertLess(abs(pi[:, 0].mean() - 0.9), Z_TOL * se)

    def test_thread_invariance(self):
        N = 1500
        counts = bare_counts(N, 3, m=[np.ones((N, 3), dtype=np.int64)])
        serial = bare_state(N, 3)
        threaded = bare_state(N, 3)
        gb.update_pi(serial, counts, mc.FeatureMatrix.empty(N), 1, RngStream(4), threads=1)
        gb.update_pi(threaded, counts, mc.FeatureMatrix.empty(N), 1, RngStream(4), threads=3)
        assert_array_equal(serial.pi[0], threaded.pi[0])


class TestUpdateB(unittest.TestCase):
    def test_plug_in(self):
        """ gamma = c = 1, h = 4 and log q = -1 give Gam(5, rate 2), mean 2.5. """
        N = 200
        pattern = sparse.csc_matrix(np.ones((N, N)))
        state = bare_state(N, 1, L=2, B=[pattern])
        counts = bare_counts(
            N, 1, L=2,
            q=[np.ones(N), np.full(N, math.exp(-1.0))],
            h_edge=[np.full(pattern.nnz, 4, dtype=np.int64)],
        )
        gb.update_B(state, counts, 1, RngStream(5))
        values = state.B[0].data
        self.assertEqual(values.size, N * N)
        self.assertLess(abs(values.mean() - 2.5), Z_TOL * math.sqrt(1.25 / values.size))

    def test_diagonal_stays_diagonal(self):
        N = 5
        state = bare_state(N, 1, L=2)
        counts = bare_counts(N, 1, L=2, h_edge=[np.zeros(N, dtype=np.int64)])
        gb.update_B(state, counts, 1, RngStream(6))
        self.assertEqual(state.B[0].nnz, N)
        self.assertEqual(abs(state.B[0] - sparse.diags(state.B[0].diagonal())).sum(), 0.0)


class TestUpdateX(unittest.TestCase):
    def test_prior_without_edges(self):
        """ With Lambda = 0 and no latent counts X_ik is Poisson(M pi_ik). """
        N = 5000
        state = bare_state(N, 1, M=3.0, pi=[np.ones((N, 1))])
        gb.update_X(state, RngStream(7))
        self.assertLess(abs(state.X.mean() - 3.0), Z_TOL * math.sqrt(3.0 / N))

    def test_positive_with_counts(self):
        """ A node holding latent counts keeps X_ik >= 1. """
        N = 50
        z_row = np.zeros((N, 2), dtype=np.int64)
        z_row[:10, 1] = 2
        state = bare_state(N, 2, M=0.5, Lambda=np.full((2, 2), 3.0), z_row=z_row,
                           X=np.ones((N, 2), dtype=np.int64))
        gb.update_X(state, RngStream(8))
        self.assertTrue(np.all(state.X[:10, 1] >= 1))

    def test_two_node_conditional(self):
        """ Node 0 with one latent count and a neighbour at X = 1 follows e^-2x x / x!. """
        x = np.arange(1, 30, dtype=float)
        log_w = -2.0 * x + np.log(x) - np.array([math.lgamma(v + 1) for v in x])
        expected = np.concatenate([[0.0], np.exp(log_w - np.logaddexp.reduce(log_w))])

        n_reps = 20_000
        draws = np.empty(n_reps, dtype=np.int64)
        for rep in range(n_reps):
            state = bare_state(
                2, 1, pi=[np.ones((2, 1))], Lambda=np.ones((1, 1)),
                X=np.array([[1], [1]]), z_row=np.array([[1], [0]]), z_col=np.array([[0], [1]]),
            )
            gb.update_X(state, RngStream(9).child(rep))
            draws[rep] = state.X[0, 0]
        freq = np.bincount(draws, minlength=expected.size)[: expected.size] / n_reps
        self.assertLess(0.5 * np.abs(freq - expected).sum(), 0.01)

    def test_held_out_dyads_leave_exponent(self):
        """ A node whose only partner is held out sees the plain Poisson(M pi) rate. """
        n_reps = 2000
        masked = mc.SparseGraph(2, [], [], test_mask=frozenset({(0, 1), (1, 0)}))
        observed = mc.SparseGraph(2, [], [])
        for graph, target in ((masked, 3.0), (observed, 0.0)):
            draws = []
            for rep in range(n_reps):
                state = bare_state(2, 1, M=3.0, pi=[np.ones((2, 1))], Lambda=np.full((1, 1), 50.0),
                                   X=np.array([[0], [5]]))
                gb.update_X(state, RngStream(10).child(rep), graph)
                draws.append(state.X[0, 0])
            self.assertLess(abs(np.mean(draws) - target), Z_TOL * math.sqrt(3.0 / n_reps),
                            msg=f"held out: {bool(graph.test_mask)}")


class TestUpdateZ(unittest.TestCase):
    def test_unit_rates(self):
        """ Unit rates give zero-truncated Poisson(1) totals. """
        N = 20_001
        graph = mc.SparseGraph(N, np.zeros(N - 1, dtype=int), np.arange(1, N))
        state = bare_state(N, 1, X=np.ones((N, 1), dtype=np.int64), Lambda=np.ones((1, 1)))
        touched = gb.update_Z(state, graph, RngStream(11))
        self.assertEqual(touched, N - 1)
        totals = state.z_edge_total
        p_one = 1.0 / (math.e - 1.0)
        se = math.sqrt(p_one * (1 - p_one) / totals.size)
        self.assertLess(abs(np.mean(totals == 1) - p_one), Z_TOL * se)
        self.assertEqual(state.z_row[0, 0], totals.sum())
        assert_array_equal(state.z_col[1:, 0], totals)

    def test_threads_and_marginals(self):
        state, graph, features, _ = fitted_setup()
        copy = state.copy()
        gb.update_Z(state, graph, RngStream(12), threads=1)
        gb.update_Z(copy, graph, RngStream(12), threads=2)
        assert_array_equal(state.z_edge_total, copy.z_edge_total)
        self.assertEqual(state.z_row.sum(), state.z_block.sum())
        self.assertEqual(state.z_col.sum(), state.z_edge_total.sum())


class TestUpdateLambda(unittest.TestCase):
    def test_plug_in(self):
        """ X = (1, 1), z = 3 and unit priors give Gam(4, rate 3), mean 4/3. """
        n_reps = 20_000
        values = np.empty(n_reps)
        for rep in range(n_reps):
            state = bare_state(2, 1, X=np.ones((2, 1), dtype=np.int64), z_block=np.array([[3]]))
            gb.update_Lambda(state, RngStream(13).child(rep))
            values[rep] = state.Lambda[0, 0]
        self.assertLess(abs(values.mean() - 4.0 / 3.0), Z_TOL * math.sqrt(4.0 / 9.0 / n_reps))


class TestUpdateMAlpha(unittest.TestCase):
    def test_plug_in(self):
        """ k_M = N = 4, theta_M = 1 and sum X = 10 give a mean of 2.8 for M. """
        hp = mc.HyperParams(K=1, L=1, iterations=2, burn_in=0)
        X = np.array([[1], [2], [3], [4]])
        n_reps = 20_000
        values = np.empty(n_reps)
        for rep in range(n_reps):
            state = bare_state(4, 1, X=X)
            gb.update_M_alpha(state, bare_counts(4, 1), hp, RngStream(14).child(rep))
            values[rep] = state.M
        self.assertLess(abs(values.mean() - 2.8), Z_TOL * math.sqrt(14.0 / 25.0 / n_reps))


class TestSweep(unittest.TestCase):
    def test_invariants_hold(self):
        """ Every sweep leaves a valid state behind. """
        state, graph, features, hp = fitted_setup()
        for iteration in range(1, 16):
            report = gb.sweep(state, graph, features, hp, RngStream(15).child(iteration), iteration)
            violations = mc.validate_state(state, graph, features)
            self.assertEqual(violations, [], msg=f"sweep {iteration}")
            self.assertLessEqual(report.dyads_touched, graph.n_edges)

    def test_deterministic(self):
        state, graph, features, hp = fitted_setup()
        copy = state.copy()
        gb.sweep(state, graph, features, hp, RngStream(16))
        gb.sweep(copy, graph, features, hp, RngStream(16), threads=3)
        assert_array_equal(state.X, copy.X)
        assert_array_equal(state.Lambda, copy.Lambda)
        assert_array_equal(state.pi[0], copy.pi[0])

    def test_report(self):
        state, graph, features, hp = fitted_setup()
        report = gb.sweep(state, graph, features, hp, RngStream(17), 1, with_log_joint=True)
        self.assertEqual(report.layer_mean_counts.size, 3)
        self.assertTrue(np.isfinite(report.log_joint))
        self.assertGreaterEqual(report.wall_time, 0.0)
        self.assertEqual(set(report.timings), set(gb.PHASES))

    def test_phase_order(self):
        """ alpha and M are drawn from the backward counts before X moves. """
        state, graph, features, hp = fitted_setup()
        report = gb.sweep(state, graph, features, hp, RngStream(19))
        order = list(report.timings)
        self.assertEqual(order, list(gb.PHASES))
        self.assertLess(order.index("M_alpha"), order.index("X"))

    def test_held_out_dyads(self):
        """ Held-out dyads never pick up latent counts or propagation weight. """
        state, graph, features, hp = fitted_setup(test_mask=[(0, 5), (3, 9), (9, 3)])
        for iteration in range(1, 6):
            gb.sweep(state, graph, features, hp, RngStream(18).child(iteration))
        self.assertEqual(mc.validate_state(state, graph, features), [])
        self.assertEqual(state.z_edge_total.size, graph.n_edges)
        self.assertEqual(state.B[0][0, 5], 0.0)

    def test_modes(self):
        for mode in ("plain", "inde", "full", "mmsb"):
            state, graph, features, hp = fitted_setup(mode=mode)
            for iteration in range(1, 4):
                gb.sweep(state, graph, features, hp, RngStream(19).child(iteration))
            self.assertEqual(mc.validate_state(state, graph, features), [], msg=mode)

    def test_fixed_hypers(self):
        """ Without hyper sampling the shapes stay where they started. """
        state, graph, features, hp = fitted_setup(sample_hypers=False)
        before = state.gamma1.copy(), state.k_Lambda
        gb.sweep(state, graph, features, hp, RngStream(20))
        assert_array_equal(state.gamma1, before[0])
        self.assertEqual(state.k_Lambda, before[1])


class TestRunChain(unittest.TestCase):
    def test_trace(self):
        state, graph, features, hp = fitted_setup(test_mask=[(0, 5)])
        trace = gb.run_chain(state, graph, features, hp, RngStream(21),
                             trace_dyads=[(0, 5), (2, 3)], keep_draws=True, progress_every=2)
        self.assertEqual(trace.n_retained, hp.n_retained)
        self.assertEqual(len(trace.draws), hp.n_retained)
        self.assertTrue(np.all((trace.prob_mean >= 0) & (trace.prob_mean <= 1)))
        self.assertEqual(trace.mean_latent_counts.size, hp.L)



class TestMmsbWithoutData(unittest.TestCase):
    def test_memberships_stay_symmetric(self):
        """ With no edges the memberships keep the symmetric Dirichlet mean 1/K. """
        n_nodes, K = 200, 3
        graph = mc.SparseGraph.from_pairs(n_nodes, [])
        hp = mc.HyperParams(K=K, L=1, mode="mmsb", iterations=20, burn_in=0)
        features = mc.resolve_features(mc.FeatureMatrix.empty(n_nodes), hp)
        state = mc.init_state(graph, features, hp, RngStream(22))
        pooled = []
        for iteration in range(1, hp.iterations + 1):
            gb.sweep(state, graph, features, hp, RngStream(22).child(iteration), iteration)
            pooled.append(state.pi[0])
        pooled = np.concatenate(pooled)
        assert_allclose(pooled.sum(axis=1), 1.0)
        assert_allclose(pooled.mean(axis=0), np.full(K, 1.0 / K), atol=0.07)


@unittest.skipUnless(SLOW, "set DEEP_RELATIONAL_SLOW=1 for the scaling run")
class TestScaling(unittest.TestCase):
    def test_sweep_time_linear_in_edges(self):
        """ Sweep time grows linearly with the edge count at fixed N. """
        n_nodes = 2000
        hp = mc.HyperParams(K=4, L=2, iterations=2, burn_in=0)
        features = mc.FeatureMatrix.empty(n_nodes)
        edge_counts, times = [], []
        for n_edges in (5_000, 10_000, 20_000, 40_000):
            graph = random_graph(n_nodes, n_edges / (n_nodes * (n_nodes - 1)), RngStream(n_edges))
            state = mc.init_state(graph, features, hp, RngStream(23))
            reports = [gb.sweep(state, graph, features, hp, RngStream(23).child(t), t)
                       for t in (1, 2, 3)]
            for report in reports:
                self.assertLessEqual(report.dyads_touched, graph.n_edges)
            edge_counts.append(graph.n_edges)
            times.append(min(report.wall_time for report in reports))
        fit = stats.linregress(edge_counts, times)
        self.assertGreater(fit.rvalue ** 2, 0.9, msg=f"times {times}")


if __name__ == "__main__":
    unittest.main()
