#!/usr/bin/env python3

""" Forward simulation of the model, and the Geweke joint-distribution check.

``generate`` draws a synthetic (relation, features, truth) triple. Propagation
matrices are supposed to live on the relation's own edges, which do not exist before
the relation is drawn, so the relation is simulated through a provisional random
support and the returned truth is redrawn on the support that was realised.

``geweke_pair`` compares prior draws with the states visited by alternating a sweep
and a fresh draw of the relation given the state. Both arms share one frozen
propagation support and fixed hyper-parameters.
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import sparse
from tqdm import tqdm

from deep_relational import dataio
from deep_relational.countprop import as_stream
from deep_relational.gibbs import sweep
from deep_relational.model_core import (
    FeatureMatrix,
    HyperParams,
    ModelState,
    SparseGraph,
    assign_edge_counts,
    build_support,
    draw_propagation,
    forward_memberships,
    init_state,
    propagated_concentration,
)
from deep_relational.randkit import RandomLike, RngStream, as_generator, dirichlet_sample

logger = logging.getLogger(__name__)

GEWEKE_STATISTICS = ("pi_first", "X", "Lambda", "M")
GEWEKE_THRESHOLD = 4.0
GEWEKE_BATCHES = 30
# Fixed hyper-priors of the Geweke runs: M near 2 and Lambda near 0.05 keep the relation sparse
GEWEKE_PRIORS = dict(k_M=2.0, theta_M=1.0, k3=20.0, theta3=1.0)
OFF_BLOCK_SHARE = 0.01


@dataclass
class SynthSpec:
    """Size and knobs of a synthetic dataset.

    ``lambda_strength`` replaces the drawn Lambda by a block matrix (strength on the
    diagonal, a hundredth of it elsewhere); ``zero_lambda`` forces Lambda to zero.
    """

    N: int
    K: int
    L: int
    D: int = 0
    feature_density: float = 0.05
    edge_density: float = 0.05
    sample_hypers: bool = True
    M: Optional[float] = None
    lambda_strength: Optional[float] = None
    zero_lambda: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.N < 2:
            raise ValueError(f"Need at least two nodes: {self.N}")
        if self.K < 1 or self.L < 1 or self.D < 0:
            raise ValueError(f"Bad sizes K={self.K}, L={self.L}, D={self.D}")
        for name in ("feature_density", "edge_density"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.M is not None and not self.M > 0:
            raise ValueError(f"M must be positive: {self.M}")

    def hyper_params(self) -> HyperParams:
        return HyperParams(K=self.K, L=self.L, iterations=2, burn_in=0, seed=self.seed,
                           sample_hypers=self.sample_hypers)


def block_lambda(K: int, strength: float) -> np.ndarray:
    return np.full((K, K), strength * OFF_BLOCK_SHARE) + np.eye(K) * strength * (1 - OFF_BLOCK_SHARE)


def draw_features(spec: SynthSpec, rng: RandomLike) -> FeatureMatrix:
    """ Bag-of-words style counts in 1..3 on a random ``feature_density`` pattern. """
    if spec.D == 0:
        return FeatureMatrix.empty(spec.N)
    gen = as_generator(rng)
    rows, cols = np.nonzero(gen.random((spec.N, spec.D)) < spec.feature_density)
    values = gen.integers(1, 4, size=rows.size)
    return FeatureMatrix.from_triplets(spec.N, spec.D, rows, cols, values)


def random_graph(n_nodes: int, density: float, rng: RandomLike) -> SparseGraph:
    """ Directed graph keeping each ordered pair i != j with probability ``density``. """
    keep = as_generator(rng).random((n_nodes, n_nodes)) < density
    np.fill_diagonal(keep, False)
    src, dst = np.nonzero(keep)
    return SparseGraph(n_nodes, src, dst)


def sample_relation(X, Lambda, rng: RandomLike) -> SparseGraph:
    """R_ij = 1 when the Poisson count of dyad (i, j) is positive.

    The count is never drawn: R_ij is Bernoulli(1 - exp(-X_i^T Lambda X_j)).
    """
    X = np.asarray(X, dtype=float)
    link = -np.expm1(-(X @ Lambda @ X.T))
    hits = as_generator(rng).random(link.shape) < link
    np.fill_diagonal(hits, False)
    src, dst = np.nonzero(hits)
    return SparseGraph(X.shape[0], src, dst)


def propagate_memberships(B: sparse.csc_matrix, pi_prev: np.ndarray, rng: RandomLike) -> np.ndarray:
    """ One forward draw of the next layer's memberships. """
    return dirichlet_sample(propagated_concentration(B, pi_prev), rng)


def expected_propagation(B: sparse.csc_matrix, pi_prev: np.ndarray) -> np.ndarray:
    """ Prior mean of the next layer: B^T pi normalised per receiving node. """
    concentration = propagated_concentration(B, pi_prev)
    return concentration / concentration.sum(axis=1, keepdims=True)


def generate(spec: SynthSpec, rng: RandomLike = None) -> Tuple[SparseGraph, FeatureMatrix, ModelState]:
    """Draw a relation, features and the state that generated them.

    X, Lambda, M, T, alpha and the hyper-parameters are those that produced the
    relation; B and pi are redrawn forward on the relation's edges plus the diagonal,
    and Z is drawn on the realised edges.
    """
    gen = as_generator(spec.seed if rng is None else rng)
    hp = spec.hyper_params()
    features = draw_features(spec, gen)

    provisional = random_graph(spec.N, spec.edge_density, gen)
    state = init_state(provisional, features, hp, gen)
    if spec.zero_lambda:
        state.Lambda = np.zeros((spec.K, spec.K))
    elif spec.lambda_strength is not None:
        state.Lambda = block_lambda(spec.K, spec.lambda_strength)
    if spec.M is not None:
        state.M = float(spec.M)
        state.X = gen.poisson(state.M * state.pi[-1]).astype(np.int64)

    graph = sample_relation(state.X, state.Lambda, gen)

    pattern = build_support(graph, "edges")
    state.B = [
        draw_propagation(pattern, state.gamma1[b], state.gamma0[b], state.c[b + 1], gen)
        for b in range(spec.L - 1)
    ]
    state.pi = forward_memberships(dict(T=state.T, alpha=state.alpha, B=state.B), features, spec.L, gen)
    state.support_mode = "edges"
    assign_edge_counts(state, graph, gen)

    logger.info("Generated N=%d with %d edges", spec.N, graph.n_edges)
    return graph, features, state


def write_dataset(graph: SparseGraph, features: FeatureMatrix, truth: ModelState, out_dir: Path):
    """ edges.tsv, features.tsv and the truth CSVs (pi_layer_<l>, lambda, x). """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataio.write_edges(graph, out_dir / "edges.tsv")
    dataio.write_features(features, out_dir / "features.tsv")
    header = ",".join(f"k{k}" for k in range(truth.K))
    for layer, pi in enumerate(truth.pi, start=1):
        dataio.write_matrix_csv(out_dir / f"pi_layer_{layer}.csv", pi, header)
    dataio.write_matrix_csv(out_dir / "lambda.csv", truth.Lambda, header)
    dataio.write_matrix_csv(out_dir / "x.csv", truth.X, header, fmt="%d")


SweepFn = Callable[[ModelState, SparseGraph, FeatureMatrix, HyperParams, RngStream], None]


def gibbs_sweep(state, graph, features, hp, stream):
    sweep(state, graph, features, hp, stream)


def mutated_sweep(state, graph, features, hp, stream):
    """ A sweep whose X update uses half the correct rate. """
    sweep(state, graph, features, hp, stream, x_rate_scale=0.5)


def identity_sweep(state, graph, features, hp, stream):
    """ Replace the state by a fresh prior draw on the same support. """
    support = state.B[0] if state.B else None
    fresh = init_state(graph, features, hp, stream, support=support)
    for item in dataclasses.fields(ModelState):
        setattr(state, item.name, getattr(fresh, item.name))


@dataclass
class GewekeResult:
    """ Means of both arms and the z-score of their difference, per statistic. """

    n_samples: int
    marginal_mean: Dict[str, float]
    successive_mean: Dict[str, float]
    z_scores: Dict[str, float]

    def passed(self, threshold: float = GEWEKE_THRESHOLD) -> bool:
        return all(abs(z) < threshold for z in self.z_scores.values())

    def table(self) -> str:
        lines = [f"{'statistic':<10} {'marginal':>12} {'successive':>12} {'z':>8}"]
        for name in self.z_scores:
            lines.append(
                f"{name:<10} {self.marginal_mean[name]:>12.5g}"
                f" {self.successive_mean[name]:>12.5g} {self.z_scores[name]:>8.3f}"
            )
        return "\n".join(lines)


def geweke_statistics(state: ModelState) -> np.ndarray:
    """ Mean output membership of community 0, mean X, mean Lambda and M. """
    return np.array([state.pi[-1][:, 0].mean(), state.X.mean(), state.Lambda.mean(), state.M])


def batch_means_se(values: np.ndarray, n_batches: int = GEWEKE_BATCHES) -> np.ndarray:
    """ Standard error of the mean of a correlated series, column-wise. """
    values = np.asarray(values, dtype=float)
    size = len(values) // n_batches
    if size < 2:
        return values.std(axis=0, ddof=1) / np.sqrt(len(values))
    means = values[: size * n_batches].reshape(n_batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def redraw_relation(state: ModelState, rng: RandomLike) -> SparseGraph:
    """ Fresh relation given X and Lambda, with Z redrawn on its edges. """
    gen = as_generator(rng)
    graph = sample_relation(state.X, state.Lambda, gen)
    assign_edge_counts(state, graph, gen)
    return graph


def geweke_pair(
    spec: SynthSpec,
    n_samples: int,
    sweep_fn: SweepFn = gibbs_sweep,
    rng: RandomLike = None,
    progress: bool = False,
    priors: Optional[Dict[str, float]] = None,
) -> GewekeResult:
    """Run both Geweke arms and return z-scores for ``GEWEKE_STATISTICS``.

    The marginal-conditional arm is plain prior draws. The successive-conditional arm
    alternates ``sweep_fn`` with a redraw of the relation given the state. Standard
    errors of the second arm use batch means. ``priors`` overrides fields of the
    spec's hyper-parameters and defaults to ``GEWEKE_PRIORS``.
    """
    if spec.N > 10:
        raise ValueError(f"Geweke runs are meant for tiny graphs, got N={spec.N}")
    if n_samples < 2:
        raise ValueError("Geweke needs at least two samples per arm")
    priors = GEWEKE_PRIORS if priors is None else priors
    hp = dataclasses.replace(spec.hyper_params(), sample_hypers=False, **priors)
    stream = RngStream(spec.seed) if rng is None else as_stream(rng)

    setup = stream.child(0).generator()
    features = draw_features(spec, setup)
    support = build_support(random_graph(spec.N, spec.edge_density, setup))
    no_edges = SparseGraph(spec.N, [], [])

    marginal = np.empty((n_samples, len(GEWEKE_STATISTICS)))
    for num in tqdm(range(n_samples), desc="marginal-conditional", disable=not progress):
        marginal[num] = geweke_statistics(
            init_state(no_edges, features, hp, stream.child(1, num), support=support)
        )

    state = init_state(no_edges, features, hp, stream.child(2), support=support)
    graph = redraw_relation(state, stream.child(3))
    successive = np.empty_like(marginal)
    for num in tqdm(range(n_samples), desc="successive-conditional", disable=not progress):
        sweep_fn(state, graph, features, hp, stream.child(4, num))
        successive[num] = geweke_statistics(state)
        graph = redraw_relation(state, stream.child(5, num))

    se_marginal = marginal.std(axis=0, ddof=1) / np.sqrt(n_samples)
    se_successive = batch_means_se(successive)
    spread = np.sqrt(se_marginal ** 2 + se_successive ** 2)
    gap = marginal.mean(axis=0) - successive.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(spread > 0, gap / spread, np.where(gap == 0, 0.0, np.inf))

    result = GewekeResult(
        n_samples,
        dict(zip(GEWEKE_STATISTICS, marginal.mean(axis=0).tolist())),
        dict(zip(GEWEKE_STATISTICS, successive.mean(axis=0).tolist())),
        dict(zip(GEWEKE_STATISTICS, z.tolist())),
    )
    logger.info("Geweke z-scores: %s", result.z_scores)
    return result
