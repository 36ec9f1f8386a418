#!/usr/bin/env python3

""" Random variables and fixed constants of the deep relational model.

Shapes and index conventions
----------------------------
N nodes, K communities, L layers, D features.

- ``pi[l - 1]`` is the N x K membership matrix of layer l.
- ``B[b]`` (b = 0..L-2) is the propagation matrix feeding layer b + 2. It is a CSC
  matrix whose rows are sources i' and columns receivers i, so column i holds the
  in-neighbours of i plus i itself.
- ``gamma1[b]``, ``gamma0[b]`` and ``c[b + 1]`` are the shapes and rate of ``B[b]``;
  ``c[0]`` is the rate of the feature loadings ``T``.
- Z is never stored cell by cell: only ``z_edge_total`` (aligned with the training
  edges of the graph) and the three marginals ``z_row``, ``z_col``, ``z_block``.

Sampling logic lives in ``countprop`` and ``gibbs``; this module only draws the prior
used as the chain's starting point.
"""

import copy
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np
from scipy import sparse

from deep_relational.randkit import (
    RandomLike,
    as_generator,
    dirichlet_sample,
    edge_partition_sample,
    gamma_sample,
)

MODES = ("standard", "plain", "inde", "full", "mmsb")
SUPPORT_MODES = ("edges", "diagonal", "dense", "fixed")
SIMPLEX_TOL = 1e-9

Dyad = Tuple[int, int]


@dataclass
class SparseGraph:
    """Directed binary relation stored as sorted (src, dst) arrays.

    Undirected graphs are stored in directed form with both orientations present and
    ``directed=False``. ``test_mask`` holds dyads that are unobserved during fitting.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    directed: bool = True
    test_mask: FrozenSet[Dyad] = frozenset()

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        if self.src.shape != self.dst.shape:
            raise ValueError("Edge source and destination arrays differ in length")
        if self.n_nodes < 0:
            raise ValueError(f"Negative node count: {self.n_nodes}")
        if self.src.size and (
            min(self.src.min(), self.dst.min()) < 0
            or max(self.src.max(), self.dst.max()) >= self.n_nodes
        ):
            raise ValueError(f"Edge endpoints must lie in [0, {self.n_nodes})")
        if np.any(self.src == self.dst):
            raise ValueError("Self-loops are not stored in the relation")

        keys = np.unique(self.src * max(self.n_nodes, 1) + self.dst)
        self.src, self.dst = np.divmod(keys, max(self.n_nodes, 1))
        self.test_mask = frozenset((int(i), int(j)) for i, j in self.test_mask)

        if not self.directed:
            reverse = self.dst * max(self.n_nodes, 1) + self.src
            if not np.all(np.isin(reverse, keys)):
                raise ValueError("Undirected graph is not closed under (i, j) -> (j, i)")
        if self.test_mask and np.any(self.contains(list(self.test_mask))):
            raise ValueError("Held-out dyads overlap the training edges")

    @classmethod
    def from_pairs(
        cls, n_nodes: int, pairs: Iterable[Dyad], directed: bool = True, test_mask=()
    ) -> "SparseGraph":
        """ Build a graph from (src, dst) pairs, symmetrising when undirected. """
        pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if not directed:
            pairs = np.concatenate([pairs, pairs[:, ::-1]])
        return cls(n_nodes, pairs[:, 0], pairs[:, 1], directed, frozenset(test_mask))

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    @property
    def edges(self) -> List[Dyad]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    @property
    def in_neighbors(self) -> List[np.ndarray]:
        """ Sources of each node's incoming edges. """
        order = np.argsort(self.dst, kind="stable")
        splits = np.searchsorted(self.dst[order], np.arange(1, self.n_nodes))
        return np.split(self.src[order], splits)

    @property
    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n_nodes)

    def contains(self, dyads) -> np.ndarray:
        """ Boolean array, True where a dyad is a stored edge. """
        dyads = np.asarray(dyads, dtype=np.int64).reshape(-1, 2)
        keys = self.src * max(self.n_nodes, 1) + self.dst
        return np.isin(dyads[:, 0] * max(self.n_nodes, 1) + dyads[:, 1], keys)

    def adjacency(self) -> sparse.csr_matrix:
        values = np.ones(self.n_edges)
        return sparse.csr_matrix((values, (self.src, self.dst)), shape=(self.n_nodes,) * 2)


@dataclass
class FeatureMatrix:
    """ Non-negative N x D node features held as a CSR matrix. """

    n_nodes: int
    n_features: int
    entries: sparse.csr_matrix = None

    def __post_init__(self):
        if self.entries is None:
            self.entries = sparse.csr_matrix((self.n_nodes, self.n_features))
        self.entries = sparse.csr_matrix(self.entries, dtype=float)
        if self.entries.shape != (self.n_nodes, self.n_features):
            raise ValueError(
                f"Feature entries have shape {self.entries.shape},"
                f" expected {(self.n_nodes, self.n_features)}"
            )
        if np.any(self.entries.data < 0) or not np.all(np.isfinite(self.entries.data)):
            raise ValueError("Feature values must be non-negative and finite")
        self.entries.eliminate_zeros()
        self.entries.sort_indices()

    @classmethod
    def from_triplets(cls, n_nodes, n_features, nodes, features, values) -> "FeatureMatrix":
        """ Build from (node, feature, value) triplets, at most one per cell. """
        nodes = np.asarray(nodes, dtype=np.int64)
        features = np.asarray(features, dtype=np.int64)
        keys = nodes * max(n_features, 1) + features
        if np.unique(keys).size != keys.size:
            raise ValueError("More than one value given for a (node, feature) cell")
        coo = sparse.coo_matrix(
            (np.asarray(values, dtype=float), (nodes, features)), shape=(n_nodes, n_features)
        )
        return cls(n_nodes, n_features, coo.tocsr())

    @classmethod
    def empty(cls, n_nodes: int) -> "FeatureMatrix":
        return cls(n_nodes, 0)

    @classmethod
    def identity(cls, n_nodes: int) -> "FeatureMatrix":
        return cls(n_nodes, n_nodes, sparse.identity(n_nodes, format="csr"))

    def triplets(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        coo = self.entries.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data

    @property
    def nnz(self) -> int:
        return int(self.entries.nnz)

    @property
    def density(self) -> float:
        cells = self.n_nodes * self.n_features
        return self.nnz / cells if cells else 0.0


@dataclass
class HyperParams:
    """Hyper-priors and architecture knobs.

    ``k_M`` defaults to the number of nodes when left as None. With
    ``sample_hypers=False`` the hyper-parameters sit at their prior means for the
    whole run.
    """

    K: int = 20
    L: int = 4
    mode: str = "standard"
    e0: float = 1.0
    f0: float = 1.0
    g0: float = 1.0
    h0: float = 1.0
    k_M: Optional[float] = None
    theta_M: float = 1.0
    k_alpha: float = 1.0
    theta_alpha: float = 1.0
    k2: float = 1.0
    theta2: float = 1.0
    k3: float = 1.0
    theta3: float = 1.0
    iterations: int = 2000
    burn_in: int = 1000
    seed: int = 0
    thin: int = 1
    sample_hypers: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"Unknown mode {self.mode!r}, expected one of {MODES}")
        if self.mode == "mmsb":
            self.L = 1
        if self.K < 1 or self.L < 1:
            raise ValueError(f"Need K >= 1 and L >= 1, got K={self.K}, L={self.L}")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError(f"Need 0 <= burn_in < iterations: {self.burn_in}, {self.iterations}")
        if self.thin < 1:
            raise ValueError(f"Thinning must be at least 1: {self.thin}")
        for name in ("e0", "f0", "g0", "h0", "theta_M", "k_alpha", "theta_alpha",
                     "k2", "theta2", "k3", "theta3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"Hyper-prior {name} must be positive: {getattr(self, name)}")
        if self.k_M is not None and not self.k_M > 0:
            raise ValueError(f"Hyper-prior k_M must be positive: {self.k_M}")

    def shape_M(self, n_nodes: int) -> float:
        return float(self.k_M) if self.k_M is not None else float(n_nodes)

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def is_retained(self, iteration: int) -> bool:
        """ Whether 1-based ``iteration`` contributes to the posterior trace. """
        past_burn = iteration - self.burn_in
        return past_burn > 0 and past_burn % self.thin == 0


@dataclass
class ModelState:
    """ Every latent variable of the joint distribution. """

    T: np.ndarray
    pi: List[np.ndarray]
    B: List[sparse.csc_matrix]
    Lambda: np.ndarray
    X: np.ndarray
    z_row: np.ndarray
    z_col: np.ndarray
    z_block: np.ndarray
    z_edge_total: np.ndarray
    M: float
    alpha: float
    gamma1: np.ndarray
    gamma0: np.ndarray
    c: np.ndarray
    gamma_feat: np.ndarray
    k_Lambda: float
    theta_Lambda: float
    support_mode: str = "edges"

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def L(self) -> int:
        return len(self.pi)

    @property
    def D(self) -> int:
        return self.T.shape[0]

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


@dataclass
class AugmentedCounts:
    """Auxiliary counts of one backward pass.

    ``m``, ``y`` and ``q`` are indexed by layer - 1; ``h_edge[b]`` is aligned with the
    stored entries of ``B[b]`` and holds the sum over k of the split counts.
    """

    m: List[np.ndarray]
    y: List[np.ndarray]
    q: List[np.ndarray]
    h_edge: List[np.ndarray]
    h_feat: np.ndarray
    h_alpha: int

    @property
    def log_q(self) -> List[np.ndarray]:
        return [np.log(np.maximum(q, np.finfo(float).tiny)) for q in self.q]


@dataclass
class PosteriorTrace:
    """Post burn-in summaries of the chain.

    Link probabilities are tracked for ``dyads`` as running means; ``draws`` keeps
    (X, Lambda) copies only when ``keep_draws`` is set.
    """

    dyads: np.ndarray
    rng_seed: int = 0
    keep_draws: bool = False
    n_retained: int = 0
    prob_mean: np.ndarray = None
    latent_mean: np.ndarray = None
    draws: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.dyads = np.asarray(self.dyads, dtype=np.int64).reshape(-1, 2)
        if self.prob_mean is None:
            self.prob_mean = np.zeros(len(self.dyads))

    def record(self, X: np.ndarray, Lambda: np.ndarray, latent_counts: np.ndarray):
        """ Fold one retained draw into the running means. """
        self.n_retained += 1
        probs = link_probabilities(X, Lambda, self.dyads[:, 0], self.dyads[:, 1])
        self.prob_mean += (probs - self.prob_mean) / self.n_retained
        latent_counts = np.asarray(latent_counts, dtype=float)
        if self.latent_mean is None:
            self.latent_mean = np.zeros_like(latent_counts)
        self.latent_mean += (latent_counts - self.latent_mean) / self.n_retained
        if self.keep_draws:
            self.draws.append((X.copy(), Lambda.copy()))

    @property
    def mean_link_prob(self) -> Dict[Dyad, float]:
        return {(int(i), int(j)): float(p) for (i, j), p in zip(self.dyads, self.prob_mean)}

    @property
    def mean_latent_counts(self) -> np.ndarray:
        return self.latent_mean if self.latent_mean is not None else np.zeros(0)


def edge_rates(X, Lambda, src, dst) -> np.ndarray:
    """ Poisson rate X_i^T Lambda X_j of each (src, dst) dyad. """
    X = np.asarray(X, dtype=float)
    return np.einsum("ek,ek->e", X[src] @ Lambda, X[dst])


def link_probabilities(X, Lambda, src, dst) -> np.ndarray:
    """ Bernoulli-Poisson link probability 1 - exp(-rate) for each dyad. """
    return -np.expm1(-edge_rates(X, Lambda, src, dst))


def offdiagonal_pair_mass(X: np.ndarray) -> np.ndarray:
    """ K x K matrix of sum over ordered pairs i != j of X_ik1 X_jk2. """
    X = np.asarray(X, dtype=float)
    totals = X.sum(axis=0)
    return np.outer(totals, totals) - X.T @ X


def masked_dyads(graph: SparseGraph) -> np.ndarray:
    """ Held-out dyads as a sorted M x 2 array. """
    return np.asarray(sorted(graph.test_mask), dtype=np.int64).reshape(-1, 2)


def observed_pair_mass(X: np.ndarray, graph: Optional[SparseGraph] = None) -> np.ndarray:
    """ Like ``offdiagonal_pair_mass`` but without the held-out dyads of ``graph``. """
    mass = offdiagonal_pair_mass(X)
    if graph is not None and graph.test_mask:
        masked = masked_dyads(graph)
        X = np.asarray(X, dtype=float)
        mass -= X[masked[:, 0]].T @ X[masked[:, 1]]
    return mass


def input_concentration(features: FeatureMatrix, T: np.ndarray, alpha: float) -> np.ndarray:
    """ Layer-1 Dirichlet concentration F T + alpha. """
    if features.n_features == 0:
        return np.full((features.n_nodes, T.shape[1]), float(alpha))
    return np.asarray(features.entries @ T) + alpha


def propagated_concentration(B: sparse.csc_matrix, pi_prev: np.ndarray) -> np.ndarray:
    """ Concentration of layer l + 1: column i of B mixes the previous memberships. """
    return np.asarray(B.T @ pi_prev)


def resolve_features(features: FeatureMatrix, hp: HyperParams) -> FeatureMatrix:
    """ Features actually used by ``hp.mode``: none for mmsb, identity for plain. """
    if hp.mode == "mmsb":
        return FeatureMatrix.empty(features.n_nodes)
    if hp.mode == "plain":
        return FeatureMatrix.identity(features.n_nodes)
    return features


def support_mode_for(mode: str) -> str:
    return {"inde": "diagonal", "full": "dense"}.get(mode, "edges")


def build_support(graph: SparseGraph, support_mode: str = "edges") -> sparse.csc_matrix:
    """Sparsity pattern of every B matrix, stored as ones.

    "edges" keeps training edges plus the diagonal, "diagonal" only the diagonal and
    "dense" every pair. Held-out dyads are never part of the pattern.
    """
    n = graph.n_nodes
    if support_mode == "diagonal":
        rows = cols = np.arange(n)
    elif support_mode == "dense":
        rows, cols = np.divmod(np.arange(n * n), max(n, 1))
        if graph.test_mask:
            masked = masked_dyads(graph)
            keep = ~np.isin(rows * n + cols, masked[:, 0] * n + masked[:, 1])
            rows, cols = rows[keep], cols[keep]
    elif support_mode in ("edges", "fixed"):
        rows = np.concatenate([graph.src, np.arange(n)])
        cols = np.concatenate([graph.dst, np.arange(n)])
    else:
        raise ValueError(f"Unknown support mode {support_mode!r}")
    pattern = sparse.csc_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    pattern.data[:] = 1.0
    pattern.sort_indices()
    return pattern


def support_receivers(B: sparse.csc_matrix) -> np.ndarray:
    """ Receiving node (column) of every stored entry of ``B``. """
    return np.repeat(np.arange(B.shape[1]), np.diff(B.indptr))


def _allowed_support(graph: SparseGraph, support_mode: str) -> Optional[np.ndarray]:
    """ Sorted dyad keys B may use, None when anything goes. """
    n = max(graph.n_nodes, 1)
    if support_mode == "fixed" or support_mode == "dense":
        return None
    diagonal = np.arange(graph.n_nodes) * (n + 1)
    if support_mode == "diagonal":
        return diagonal
    return np.union1d(graph.src * n + graph.dst, diagonal)


def validate_state(
    state: ModelState, graph: SparseGraph, features: FeatureMatrix
) -> List[str]:
    """List every broken invariant of ``state``; an empty list means a valid state.

    The state is never modified.
    """
    violations = []
    N, K, L = state.n_nodes, state.K, state.L

    if graph.n_nodes != N:
        violations.append(f"graph has {graph.n_nodes} nodes, state has {N}")
    if features.n_nodes != N:
        violations.append(f"features cover {features.n_nodes} nodes, state has {N}")
    if state.D != features.n_features:
        violations.append(f"T has {state.D} rows for {features.n_features} features")
    if len(state.B) != L - 1:
        violations.append(f"{len(state.B)} propagation matrices for {L} layers")

    for layer, pi in enumerate(state.pi, start=1):
        if pi.shape != (N, K):
            violations.append(f"pi layer {layer} has shape {pi.shape}")
            continue
        sums = pi.sum(axis=1)
        for node in np.flatnonzero(np.abs(sums - 1.0) > SIMPLEX_TOL):
            violations.append(f"pi layer {layer} node {node}: row sums to {sums[node]:.12g}")
        for node in np.flatnonzero(np.any(~(pi > 0), axis=1)):
            violations.append(f"pi layer {layer} node {node}: non-positive entry")

    allowed = _allowed_support(graph, state.support_mode)
    masked = masked_dyads(graph)
    for num, B in enumerate(state.B, start=1):
        coo = B.tocoo()
        live = coo.data != 0
        rows, cols = coo.row[live].astype(np.int64), coo.col[live].astype(np.int64)
        if np.any(coo.data < 0) or not np.all(np.isfinite(coo.data)):
            violations.append(f"B layer {num} has negative or non-finite entries")
        keys = rows * max(N, 1) + cols
        if allowed is not None:
            for key in keys[~np.isin(keys, allowed)]:
                src, dst = divmod(int(key), max(N, 1))
                violations.append(
                    f"B layer {num} has mass on ({src}, {dst}): entries must be zero"
                    " off the training edges and the diagonal"
                )
        if masked.size:
            for key in keys[np.isin(keys, masked[:, 0] * max(N, 1) + masked[:, 1])]:
                src, dst = divmod(int(key), max(N, 1))
                violations.append(f"B layer {num} has mass on held-out dyad ({src}, {dst})")

    if state.X.shape != (N, K) or np.any(state.X < 0):
        violations.append("X must be an N x K matrix of non-negative counts")
    if state.Lambda.shape != (K, K) or not np.all(state.Lambda >= 0):
        violations.append("Lambda must be a non-negative K x K matrix")
    if np.any(state.T < 0):
        violations.append("T has negative entries")

    if state.z_edge_total.shape != (graph.n_edges,):
        violations.append(
            f"{state.z_edge_total.size} edge totals for {graph.n_edges} training edges"
        )
    elif np.any(state.z_edge_total < 1):
        for edge in np.flatnonzero(state.z_edge_total < 1):
            violations.append(f"training edge {graph.edges[edge]} has no latent count")
    marginals = {
        "z_edge_total": state.z_edge_total.sum(),
        "z_row": state.z_row.sum(),
        "z_col": state.z_col.sum(),
        "z_block": state.z_block.sum(),
    }
    if len(set(int(v) for v in marginals.values())) > 1:
        violations.append(f"latent count marginals disagree: {marginals}")
    for name in ("z_row", "z_col", "z_block"):
        if np.any(getattr(state, name) < 0):
            violations.append(f"{name} has negative counts")

    scalars = dict(M=state.M, alpha=state.alpha, k_Lambda=state.k_Lambda,
                   theta_Lambda=state.theta_Lambda)
    for name, value in scalars.items():
        if not (np.isfinite(value) and value > 0):
            violations.append(f"{name} must be positive and finite: {value}")
    for name in ("gamma1", "gamma0", "c", "gamma_feat"):
        values = np.asarray(getattr(state, name))
        if not np.all(values > 0) or not np.all(np.isfinite(values)):
            violations.append(f"{name} must be positive and finite")
    if len(state.c) != L or len(state.gamma1) != L - 1 or len(state.gamma0) != L - 1:
        violations.append("per-layer hyper-parameters do not match the layer count")

    return violations


def _initial_hypers(hp: HyperParams, n_layers: int, n_features: int, gen) -> dict:
    """ Hyper-parameters drawn from their priors, or held at the prior means. """
    if not hp.sample_hypers:
        return dict(
            gamma1=np.full(n_layers - 1, hp.e0 / hp.f0),
            gamma0=np.full(n_layers - 1, hp.e0 / hp.f0),
            c=np.full(n_layers, hp.g0 / hp.h0),
            gamma_feat=np.full(n_features, hp.e0 / hp.f0),
            k_Lambda=hp.k2 / hp.theta2,
            theta_Lambda=hp.k3 / hp.theta3,
        )
    return dict(
        gamma1=np.atleast_1d(gamma_sample(np.full(n_layers - 1, hp.e0), 1 / hp.f0, gen)),
        gamma0=np.atleast_1d(gamma_sample(np.full(n_layers - 1, hp.e0), 1 / hp.f0, gen)),
        c=np.atleast_1d(gamma_sample(np.full(n_layers, hp.g0), 1 / hp.h0, gen)),
        gamma_feat=np.atleast_1d(gamma_sample(np.full(n_features, hp.e0), 1 / hp.f0, gen)),
        k_Lambda=gamma_sample(hp.k2, 1 / hp.theta2, gen),
        theta_Lambda=gamma_sample(hp.k3, 1 / hp.theta3, gen),
    )


def draw_propagation(
    pattern: sparse.csc_matrix, gamma1: float, gamma0: float, c: float, gen
) -> sparse.csc_matrix:
    """ Gamma prior draw on the pattern: gamma0 shape on the diagonal, gamma1 elsewhere. """
    B = pattern.copy()
    if B.nnz:
        diagonal = B.indices == support_receivers(B)
        shapes = np.where(diagonal, gamma0, gamma1)
        B.data = np.asarray(gamma_sample(shapes, 1.0 / c, gen), dtype=float).reshape(-1)
    return B


def forward_memberships(state_parts: dict, features: FeatureMatrix, n_layers: int, gen):
    """ Draw pi layer by layer, top of the network first. """
    pi = [dirichlet_sample(input_concentration(features, state_parts["T"], state_parts["alpha"]), gen)]
    for B in state_parts["B"][: n_layers - 1]:
        pi.append(dirichlet_sample(propagated_concentration(B, pi[-1]), gen))
    return pi


def init_state(
    graph: SparseGraph,
    features: FeatureMatrix,
    hp: HyperParams,
    rng: RandomLike,
    support: Optional[sparse.csc_matrix] = None,
) -> ModelState:
    """Draw every latent variable from its prior, then Z given (X, Lambda).

    Parameters
    ----------
    graph: SparseGraph
        Training relation; its edges carry the Z counts and, unless ``support`` is
        given, define the propagation pattern.
    features: FeatureMatrix
        Features already resolved for ``hp.mode`` (see ``resolve_features``).
    support: sparse.csc_matrix, optional
        Fixed propagation pattern, used when B must not follow the relation.
    """
    if features.n_nodes != graph.n_nodes:
        raise ValueError(
            f"Features cover {features.n_nodes} nodes but the graph has {graph.n_nodes}"
        )
    if hp.mode == "mmsb" and features.n_features:
        raise ValueError("The mmsb configuration runs without node features")

    gen = as_generator(rng)
    N, K, L, D = graph.n_nodes, hp.K, hp.L, features.n_features

    hypers = _initial_hypers(hp, L, D, gen)
    alpha = gamma_sample(hp.k_alpha, 1 / hp.theta_alpha, gen)
    M = gamma_sample(hp.shape_M(N), 1 / hp.theta_M, gen)
    T = np.zeros((D, K))
    if D:
        T = gamma_sample(np.repeat(hypers["gamma_feat"][:, None], K, axis=1), 1 / hypers["c"][0], gen)

    if support is None:
        support_mode = support_mode_for(hp.mode)
        pattern = build_support(graph, support_mode)
    else:
        support_mode = "fixed"
        pattern = sparse.csc_matrix(support, dtype=float)
        pattern.data[:] = 1.0
        pattern.sort_indices()
    B = [
        draw_propagation(pattern, hypers["gamma1"][b], hypers["gamma0"][b], hypers["c"][b + 1], gen)
        for b in range(L - 1)
    ]
    pi = forward_memberships(dict(T=T, alpha=alpha, B=B), features, L, gen)

    Lambda = np.asarray(
        gamma_sample(np.full((K, K), hypers["k_Lambda"]), 1 / hypers["theta_Lambda"], gen)
    ).reshape(K, K)
    X = gen.poisson(M * pi[-1]).astype(np.int64)

    state = ModelState(
        T=np.asarray(T, dtype=float).reshape(D, K),
        pi=pi,
        B=B,
        Lambda=Lambda,
        X=X,
        z_row=np.zeros((N, K), dtype=np.int64),
        z_col=np.zeros((N, K), dtype=np.int64),
        z_block=np.zeros((K, K), dtype=np.int64),
        z_edge_total=np.zeros(graph.n_edges, dtype=np.int64),
        M=M,
        alpha=alpha,
        support_mode=support_mode,
        **hypers,
    )
    assign_edge_counts(state, graph, gen)
    return state


def assign_edge_counts(state: ModelState, graph: SparseGraph, rng: RandomLike):
    """ Redraw the Z marginals of every training edge given X and Lambda. """
    totals, rows, cols, block = edge_partition_sample(
        state.X[graph.src], state.X[graph.dst], state.Lambda, rng
    )
    N, K = state.X.shape
    state.z_edge_total = totals
    state.z_row = np.zeros((N, K), dtype=np.int64)
    state.z_col = np.zeros((N, K), dtype=np.int64)
    np.add.at(state.z_row, graph.src, rows)
    np.add.at(state.z_col, graph.dst, cols)
    state.z_block = block
