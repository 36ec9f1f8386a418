#!/usr/bin/env python3

""" Gibbs sweep over every latent variable, and the sweep loop.

One sweep runs
    backward_counts -> T -> (M, alpha) -> for each layer: pi, then B -> X -> Z
    -> Lambda -> hyper-parameters
and every phase draws from its own substream of the iteration's ``RngStream``.

alpha and M come right after T, while the backward counts still describe the current X.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import special, stats

from deep_relational.countprop import as_stream, backward_counts, compute_psi, latent_count_report
from deep_relational.model_core import (
    AugmentedCounts,
    FeatureMatrix,
    HyperParams,
    ModelState,
    PosteriorTrace,
    SparseGraph,
    edge_rates,
    masked_dyads,
    observed_pair_mass,
    support_receivers,
)
from deep_relational.randkit import (
    RandomLike,
    block_map,
    crt_sample,
    dirichlet_sample,
    edge_partition_sample,
    gamma_sample,
    touchard_log_sample,
)

logger = logging.getLogger(__name__)

PHASES = ("backward", "T", "M_alpha", "pi", "B", "X", "Z", "Lambda", "hypers")


def _phase_stream(rng: RandomLike, phase: str, *key: int):
    return as_stream(rng).child(PHASES.index(phase), *key)


@dataclass
class SweepReport:
    """ What one sweep did: per-layer mean counts (layer L first) and phase timings. """

    iteration: int
    layer_mean_counts: np.ndarray
    timings: Dict[str, float] = field(default_factory=dict)
    dyads_touched: int = 0
    log_joint: Optional[float] = None

    def __post_init__(self):
        if any(t < 0 for t in self.timings.values()):
            raise ValueError("Phase timings must be non-negative")

    @property
    def wall_time(self) -> float:
        return float(sum(self.timings.values()))


def _log_q(q: np.ndarray) -> np.ndarray:
    return np.log(np.minimum(q, 1.0))


def update_T(state: ModelState, counts: AugmentedCounts, features: FeatureMatrix, rng: RandomLike):
    """ Redraw the feature loadings given the input-layer split counts. """
    if features.n_features == 0:
        return
    log_q = _log_q(counts.q[0])
    rate = state.c[0] - np.asarray(features.entries.T @ log_q).reshape(-1)
    if not np.all(rate > 0):
        raise ValueError(f"Non-positive loading rate for features {np.flatnonzero(rate <= 0)}")
    shape = state.gamma_feat[:, None] + counts.h_feat
    state.T = np.asarray(
        gamma_sample(shape, 1.0 / rate[:, None], as_stream(rng).generator()), dtype=float
    ).reshape(shape.shape)


def update_pi(state: ModelState, counts: AugmentedCounts, features: FeatureMatrix, layer: int,
              rng: RandomLike, threads: int = 1):
    """ pi_i^(l) ~ Dirichlet(psi_i + m_i) with psi from the current upstream variables. """
    concentration = compute_psi(state, features, layer).psi + counts.m[layer - 1]

    def draw_block(start, stop, gen):
        return dirichlet_sample(concentration[start:stop], gen)

    blocks = block_map(draw_block, state.n_nodes, as_stream(rng), threads)
    if blocks:
        state.pi[layer - 1] = np.concatenate(blocks, axis=0)


def update_B(state: ModelState, counts: AugmentedCounts, layer: int, rng: RandomLike):
    """Redraw every stored entry of B^(layer).

    Entry (i', i) has shape gamma0 + h on the diagonal, gamma1 + h elsewhere, and rate
    c - log q_i where q belongs to the receiving node at layer + 1.
    """
    b = layer - 1
    B = state.B[b]
    if B.nnz == 0:
        return
    receivers = support_receivers(B)
    diagonal = B.indices == receivers
    shape = np.where(diagonal, state.gamma0[b], state.gamma1[b]) + counts.h_edge[b]
    rate = state.c[layer] - _log_q(counts.q[layer])[receivers]
    B.data = np.asarray(gamma_sample(shape, 1.0 / rate, as_stream(rng).generator()),
                        dtype=float).reshape(-1)


def update_X(state: ModelState, rng: RandomLike, graph: Optional[SparseGraph] = None,
             rate_scale: float = 1.0):
    """Redraw X node by node from its Touchard conditional.

    The exponent S_k = sum over j != i of X_j (Lambda + Lambda^T)_k is kept as column
    totals with node i's own row taken out before its draw and put back after. Dyads
    held out in ``graph`` are unobserved and drop out of the exponent.
    ``rate_scale`` multiplies every rate and exists only to build a deliberately wrong
    kernel for sampler checks.
    """
    gen = as_stream(rng).generator()
    X = state.X
    Lambda = state.Lambda
    Lsym = Lambda + Lambda.T
    n = state.z_row + state.z_col
    with np.errstate(divide="ignore"):
        log_base = np.log(state.M * rate_scale) + np.log(state.pi[-1])
    totals = X.sum(axis=0).astype(float)

    sends_to, receives_from = {}, {}
    if graph is not None:
        for i, j in masked_dyads(graph).tolist():
            sends_to.setdefault(i, []).append(j)
            receives_from.setdefault(j, []).append(i)

    for i in range(state.n_nodes):
        others = totals - X[i]
        log_lam = log_base[i] - Lsym @ others
        if i in sends_to:
            log_lam += Lambda @ X[sends_to[i]].sum(axis=0)
        if i in receives_from:
            log_lam += Lambda.T @ X[receives_from[i]].sum(axis=0)
        try:
            row = touchard_log_sample(log_lam, n[i], gen)
        except ValueError as err:
            raise ValueError(f"Node {i}: {err}") from err
        X[i] = row
        totals = others + row


def update_Z(state: ModelState, graph: SparseGraph, rng: RandomLike, threads: int = 1) -> int:
    """Rebuild the latent edge counts of every training edge.

    Only stored edges are visited; returns how many were.
    """
    X, Lambda = state.X, state.Lambda
    src, dst = graph.src, graph.dst

    def draw_block(start, stop, gen):
        return edge_partition_sample(X[src[start:stop]], X[dst[start:stop]], Lambda, gen)

    blocks = block_map(draw_block, graph.n_edges, as_stream(rng), threads)
    N, K = X.shape
    z_row = np.zeros((N, K), dtype=np.int64)
    z_col = np.zeros((N, K), dtype=np.int64)
    z_block = np.zeros((K, K), dtype=np.int64)
    totals = []
    start = 0
    for edge_totals, rows, cols, block in blocks:
        stop = start + edge_totals.size
        np.add.at(z_row, src[start:stop], rows)
        np.add.at(z_col, dst[start:stop], cols)
        z_block += block
        totals.append(edge_totals)
        start = stop

    state.z_row, state.z_col, state.z_block = z_row, z_col, z_block
    state.z_edge_total = np.concatenate(totals) if totals else np.zeros(0, dtype=np.int64)
    return graph.n_edges


def update_Lambda(state: ModelState, rng: RandomLike, graph: Optional[SparseGraph] = None):
    """ Lambda ~ Gam(z_block + k_Lambda, 1 / (theta_Lambda + observed pair mass over i != j)). """
    shape = state.z_block + state.k_Lambda
    rate = state.theta_Lambda + observed_pair_mass(state.X, graph)
    state.Lambda = np.asarray(
        gamma_sample(shape, 1.0 / rate, as_stream(rng).generator()), dtype=float
    ).reshape(shape.shape)


def update_M_alpha(state: ModelState, counts: AugmentedCounts, hp: HyperParams, rng: RandomLike):
    """ Scale M given X, and alpha given the alpha share of the input split. """
    gen = as_stream(rng).generator()
    N, K = state.X.shape
    state.M = gamma_sample(hp.shape_M(N) + state.X.sum(), 1.0 / (hp.theta_M + N), gen)
    # alpha enters the concentration of every (i, k), hence K log q_i
    rate = hp.theta_alpha - K * _log_q(counts.q[0]).sum()
    state.alpha = gamma_sample(hp.k_alpha + counts.h_alpha, 1.0 / rate, gen)


def _update_propagation_hypers(state: ModelState, counts: AugmentedCounts, hp: HyperParams, gen):
    for b, B in enumerate(state.B):
        layer = b + 1
        receivers = support_receivers(B)
        diagonal = B.indices == receivers
        c = state.c[layer]
        log_ratio = np.log1p(-_log_q(counts.q[layer])[receivers] / c)
        h = counts.h_edge[b]

        for name, chosen in (("gamma1", ~diagonal), ("gamma0", diagonal)):
            current = getattr(state, name)
            tables = np.sum(crt_sample(h[chosen], current[b], gen)) if chosen.any() else 0
            current[b] = gamma_sample(
                hp.e0 + tables, 1.0 / (hp.f0 + log_ratio[chosen].sum()), gen
            )

        shape_mass = (~diagonal).sum() * state.gamma1[b] + diagonal.sum() * state.gamma0[b]
        state.c[layer] = gamma_sample(hp.g0 + shape_mass, 1.0 / (hp.h0 + B.data.sum()), gen)


def _update_input_hypers(state: ModelState, counts: AugmentedCounts, features: FeatureMatrix,
                         hp: HyperParams, gen):
    if features.n_features == 0:
        state.c[0] = gamma_sample(hp.g0, 1.0 / hp.h0, gen)
        return
    K = state.K
    c1 = state.c[0]
    exposure = -np.asarray(features.entries.T @ _log_q(counts.q[0])).reshape(-1)
    tables = np.asarray(
        crt_sample(counts.h_feat, np.repeat(state.gamma_feat[:, None], K, axis=1), gen)
    ).reshape(counts.h_feat.shape).sum(axis=1)
    rate = hp.f0 + K * np.log1p(exposure / c1)
    state.gamma_feat = np.atleast_1d(gamma_sample(hp.e0 + tables, 1.0 / rate, gen)).astype(float)
    state.c[0] = gamma_sample(hp.g0 + K * state.gamma_feat.sum(), 1.0 / (hp.h0 + state.T.sum()), gen)


def update_hypers(state: ModelState, counts: AugmentedCounts, features: FeatureMatrix,
                  hp: HyperParams, rng: RandomLike, graph: Optional[SparseGraph] = None):
    """Redraw (k_Lambda, theta_Lambda), the B hyper-parameters and the input-layer ones.

    Every shape parameter is augmented with CRT table counts. Does nothing when
    ``hp.sample_hypers`` is off.
    """
    if not hp.sample_hypers:
        return
    gen = as_stream(rng).generator()

    pair_mass = observed_pair_mass(state.X, graph)
    tables = np.sum(crt_sample(state.z_block, state.k_Lambda, gen))
    # -log(1 - p') with p' = mass / (theta_Lambda + mass)
    neg_log_fail = np.log1p(pair_mass / state.theta_Lambda).sum()
    state.k_Lambda = gamma_sample(hp.k2 + tables, 1.0 / (hp.theta2 + neg_log_fail), gen)
    K = state.K
    state.theta_Lambda = gamma_sample(
        hp.k3 + K * K * state.k_Lambda, 1.0 / (hp.theta3 + state.Lambda.sum()), gen
    )

    _update_propagation_hypers(state, counts, hp, gen)
    _update_input_hypers(state, counts, features, hp, gen)


def log_joint(state: ModelState, graph: SparseGraph, features: FeatureMatrix, hp: HyperParams) -> float:
    """Unnormalised log density with Z summed out.

    Training edges contribute log(1 - exp(-rate)), every other ordered pair i != j
    outside the held-out set contributes -rate.
    """
    X, Lambda = state.X, state.Lambda
    N = state.n_nodes

    edge_rate = edge_rates(X, Lambda, graph.src, graph.dst)
    total_rate = float((Lambda * observed_pair_mass(X, graph)).sum())
    with np.errstate(divide="ignore"):
        total = np.log(-np.expm1(-edge_rate)).sum()
    total -= total_rate - edge_rate.sum()

    total += stats.poisson.logpmf(X, state.M * state.pi[-1]).sum()
    for layer in range(1, state.L + 1):
        psi = compute_psi(state, features, layer).psi
        pi = state.pi[layer - 1]
        total += (special.gammaln(psi.sum(axis=1)) - special.gammaln(psi).sum(axis=1)
                  + ((psi - 1.0) * np.log(pi)).sum(axis=1)).sum()

    for b, B in enumerate(state.B):
        diagonal = B.indices == support_receivers(B)
        shape = np.where(diagonal, state.gamma0[b], state.gamma1[b])
        total += stats.gamma.logpdf(B.data, shape, scale=1.0 / state.c[b + 1]).sum()
    if state.D:
        total += stats.gamma.logpdf(state.T, state.gamma_feat[:, None], scale=1.0 / state.c[0]).sum()
    total += stats.gamma.logpdf(Lambda, state.k_Lambda, scale=1.0 / state.theta_Lambda).sum()
    total += stats.gamma.logpdf(state.M, hp.shape_M(N), scale=1.0 / hp.theta_M)
    total += stats.gamma.logpdf(state.alpha, hp.k_alpha, scale=1.0 / hp.theta_alpha)

    if hp.sample_hypers:
        shape_prior = dict(a=hp.e0, scale=1.0 / hp.f0)
        for values in (state.gamma1, state.gamma0, state.gamma_feat):
            total += stats.gamma.logpdf(values, **shape_prior).sum()
        total += stats.gamma.logpdf(state.c, hp.g0, scale=1.0 / hp.h0).sum()
        total += stats.gamma.logpdf(state.k_Lambda, hp.k2, scale=1.0 / hp.theta2)
        total += stats.gamma.logpdf(state.theta_Lambda, hp.k3, scale=1.0 / hp.theta3)
    return float(total)


def sweep(
    state: ModelState,
    graph: SparseGraph,
    features: FeatureMatrix,
    hp: HyperParams,
    rng: RandomLike,
    iteration: int = 0,
    threads: int = 1,
    x_rate_scale: float = 1.0,
    with_log_joint: bool = False,
) -> SweepReport:
    """One full Gibbs sweep, mutating ``state`` in place.

    Parameters
    ----------
    rng: RandomLike
        Stream for this sweep; phases, layers and blocks get keyed children of it.
    threads: int
        Workers for the block-parallel phases; results do not depend on it.
    x_rate_scale: float
        Only for sampler checks, see ``update_X``.
    """
    timings = {}
    clock = time.perf_counter()

    def lap(phase):
        nonlocal clock
        now = time.perf_counter()
        timings[phase] = timings.get(phase, 0.0) + now - clock
        clock = now

    counts = backward_counts(state, features, _phase_stream(rng, "backward"), threads)
    layer_means = latent_count_report(counts)
    lap("backward")

    update_T(state, counts, features, _phase_stream(rng, "T"))
    lap("T")
    update_M_alpha(state, counts, hp, _phase_stream(rng, "M_alpha"))
    lap("M_alpha")

    for layer in range(1, state.L + 1):
        update_pi(state, counts, features, layer, _phase_stream(rng, "pi", layer), threads)
        lap("pi")
        if layer < state.L:
            update_B(state, counts, layer, _phase_stream(rng, "B", layer))
            lap("B")

    update_X(state, _phase_stream(rng, "X"), graph, rate_scale=x_rate_scale)
    lap("X")
    touched = update_Z(state, graph, _phase_stream(rng, "Z"), threads)
    lap("Z")
    update_Lambda(state, _phase_stream(rng, "Lambda"), graph)
    lap("Lambda")
    update_hypers(state, counts, features, hp, _phase_stream(rng, "hypers"), graph)
    lap("hypers")

    report = SweepReport(iteration, layer_means, timings, touched)
    if with_log_joint:
        report.log_joint = log_joint(state, graph, features, hp)
    return report


def run_chain(
    state: ModelState,
    graph: SparseGraph,
    features: FeatureMatrix,
    hp: HyperParams,
    rng: RandomLike,
    trace_dyads=(),
    threads: int = 1,
    keep_draws: bool = False,
    progress_every: int = 100,
) -> PosteriorTrace:
    """Run ``hp.iterations`` sweeps and average the retained ones.

    Sweep t (1-based) uses ``rng.child(t)``; draws after ``hp.burn_in`` are kept
    every ``hp.thin`` sweeps.
    """
    stream = as_stream(rng)
    trace = PosteriorTrace(trace_dyads, rng_seed=stream.seed, keep_draws=keep_draws)
    started = time.perf_counter()

    for iteration in range(1, hp.iterations + 1):
        report = sweep(state, graph, features, hp, stream.child(iteration), iteration, threads)
        if hp.is_retained(iteration):
            trace.record(state.X, state.Lambda, report.layer_mean_counts)
        if progress_every and iteration % progress_every == 0:
            layers = " ".join(
                f"L{hp.L - num}={value:.1f}" for num, value in enumerate(report.layer_mean_counts)
            )
            logger.info(
                "iteration %d/%d  latent counts per node: %s  (%.1fs)",
                iteration, hp.iterations, layers, time.perf_counter() - started,
            )
    return trace
