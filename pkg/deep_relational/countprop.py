#!/usr/bin/env python3

""" Backward pass of hidden counts, output layer first.

Layer l holds counts m^(l) (``X`` at the output layer). Each layer draws per-node
Beta variables q^(l) and CRT table counts y^(l), then splits every y_ik over the
sources that feed node i: the in-neighbours and i itself through B, or the node's
features and alpha at the input layer. The split counts landing on a source become
the counts m^(l-1) of the layer above.
"""

import logging
from dataclasses import dataclass

import numpy as np

from deep_relational.model_core import (
    AugmentedCounts,
    FeatureMatrix,
    ModelState,
    input_concentration,
    propagated_concentration,
)
from deep_relational.randkit import (
    RandomLike,
    RngStream,
    as_generator,
    block_map,
    crt_sample,
    grouped_multinomial_split,
)

logger = logging.getLogger(__name__)

COUNT_LIMIT = np.iinfo(np.int64).max // 4


@dataclass
class LayerConcentration:
    """ Dirichlet concentration psi of one layer (1-based ``layer_index``). """

    psi: np.ndarray
    layer_index: int

    def __post_init__(self):
        if np.any(self.psi < 0):
            raise ValueError(f"Layer {self.layer_index} concentration has negative entries")


def compute_psi(state: ModelState, features: FeatureMatrix, layer: int) -> LayerConcentration:
    """ Concentration of layer ``layer``: F T + alpha at the input, B^T pi below it. """
    if not 1 <= layer <= state.L:
        raise ValueError(f"Layer must lie in [1, {state.L}]: {layer}")
    if layer == 1:
        psi = input_concentration(features, state.T, state.alpha)
    else:
        psi = propagated_concentration(state.B[layer - 2], state.pi[layer - 2])
    return LayerConcentration(psi, layer)


def as_stream(rng: RandomLike) -> RngStream:
    """ Keyed stream for block work; plain generators seed a fresh one. """
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(as_generator(rng).integers(2 ** 63)))


def split_over_sources(y, ptr, weights, stream: RngStream, threads: int = 1) -> np.ndarray:
    """Split each y[i, k] over the entries ptr[i]:ptr[i + 1] of node i.

    Parameters
    ----------
    y: np.ndarray
        N x K counts to split.
    ptr: np.ndarray
        CSC style pointer, node i owns entries ptr[i]:ptr[i + 1].
    weights: np.ndarray
        K x E split weights, column e belonging to the node that owns entry e.

    Returns
    -------
    np.ndarray
        K x E integer counts; column sums within each node add back to y.
    """
    N, K = y.shape

    def split_block(start, stop, gen):
        lo, hi = ptr[start], ptr[stop]
        width = hi - lo
        local = ptr[start:stop + 1] - lo
        group_ptr = (np.arange(K)[:, None] * width + local[None, :-1]).reshape(-1)
        group_ptr = np.append(group_ptr, K * width)
        counts = grouped_multinomial_split(
            y[start:stop].T.reshape(-1), group_ptr, weights[:, lo:hi].reshape(-1), gen
        )
        return counts.reshape(K, width)

    parts = block_map(split_block, N, stream, threads)
    if not parts:
        return np.zeros((K, 0), dtype=np.int64)
    return np.concatenate(parts, axis=1)


def _beta_auxiliary(psi: np.ndarray, m: np.ndarray, gen) -> np.ndarray:
    """ q_i ~ Beta(sum_k psi_ik, sum_k m_ik), fixed at 1 for nodes without counts. """
    a = psi.sum(axis=1)
    b = m.sum(axis=1)
    q = np.ones(a.size)
    busy = b > 0
    if busy.any():
        q[busy] = gen.beta(a[busy], b[busy])
    return np.maximum(q, np.finfo(float).tiny)


def _feature_slots(features: FeatureMatrix):
    """ Entry layout of the input split: each node's features followed by one alpha slot. """
    F = features.entries
    n_feat = np.diff(F.indptr)
    ptr = F.indptr + np.arange(features.n_nodes + 1)
    feature_pos = np.arange(F.nnz) + np.repeat(np.arange(features.n_nodes), n_feat)
    alpha_pos = ptr[1:] - 1
    return ptr, feature_pos, alpha_pos


def backward_counts(
    state: ModelState, features: FeatureMatrix, rng: RandomLike, threads: int = 1
) -> AugmentedCounts:
    """Propagate the output counts X back to the input layer.

    Parameters
    ----------
    state: ModelState
        Current state; X must be up to date. Nothing in it is modified.
    features: FeatureMatrix
        Features matching ``state.T``.
    rng: RandomLike
        With an ``RngStream`` the layer/block substreams are keyed below it, so the
        result does not depend on ``threads``.
    """
    if state.X.sum() > COUNT_LIMIT:
        raise OverflowError(f"Output counts too large to propagate: {state.X.sum()}")

    stream = as_stream(rng)
    N, K, L = state.n_nodes, state.K, state.L
    m = [None] * L
    y = [None] * L
    q = [None] * L
    h_edge = [None] * (L - 1)
    m[L - 1] = state.X

    for layer in range(L, 0, -1):
        layer_stream = stream.child(layer)
        gen = layer_stream.child(0).generator()
        psi = compute_psi(state, features, layer).psi
        counts = m[layer - 1]

        q[layer - 1] = _beta_auxiliary(psi, counts, gen)
        y[layer - 1] = np.asarray(crt_sample(counts, psi, gen), dtype=np.int64).reshape(N, K)

        if layer >= 2:
            B = state.B[layer - 2]
            weights = (B.data[:, None] * state.pi[layer - 2][B.indices, :]).T
            h = split_over_sources(y[layer - 1], B.indptr, weights, layer_stream.child(1), threads)
            h_edge[layer - 2] = h.sum(axis=0)
            m[layer - 2] = np.stack(
                [np.bincount(B.indices, weights=h[k], minlength=N) for k in range(K)], axis=1
            ).astype(np.int64)
        else:
            F = features.entries
            ptr, feature_pos, alpha_pos = _feature_slots(features)
            weights = np.empty((K, ptr[-1]))
            weights[:, feature_pos] = (F.data[:, None] * state.T[F.indices, :]).T
            weights[:, alpha_pos] = state.alpha
            h = split_over_sources(y[0], ptr, weights, layer_stream.child(1), threads)
            h_feat = np.zeros((features.n_features, K), dtype=np.int64)
            if features.n_features:
                h_feat = np.stack(
                    [np.bincount(F.indices, weights=h[k, feature_pos],
                                 minlength=features.n_features) for k in range(K)],
                    axis=1,
                ).astype(np.int64)
            h_alpha = int(h[:, alpha_pos].sum())

    return AugmentedCounts(m=m, y=y, q=q, h_edge=h_edge, h_feat=h_feat, h_alpha=h_alpha)


def latent_count_report(counts: AugmentedCounts) -> np.ndarray:
    """ Average latent count per node for layers L, L-1, ..., 1. """
    n_nodes = counts.m[0].shape[0]
    if n_nodes == 0:
        return np.zeros(len(counts.m))
    return np.array([m.sum() / n_nodes for m in reversed(counts.m)], dtype=float)
