#!/usr/bin/env python3

""" Link probabilities and held-out scoring (AUC, mean negative log-likelihood). """

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from deep_relational.model_core import PosteriorTrace, SparseGraph, link_probabilities

logger = logging.getLogger(__name__)

NLL_CLAMP = 1e-12


@dataclass
class EvalResult:
    """Held-out scores.

    ``auc`` is None when the test labels are all one class, ``mean_nll`` when there
    are no test dyads at all.
    """

    auc: Optional[float]
    mean_nll: Optional[float]
    n_test_pos: int
    n_test_neg: int
    nll_clamp: float = NLL_CLAMP

    def __post_init__(self):
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"AUC outside [0, 1]: {self.auc}")
        if self.mean_nll is not None and self.mean_nll < 0:
            raise ValueError(f"Negative mean NLL: {self.mean_nll}")

    def as_dict(self) -> dict:
        return dict(
            auc=self.auc,
            mean_nll=self.mean_nll,
            n_test_pos=self.n_test_pos,
            n_test_neg=self.n_test_neg,
            nll_clamp=self.nll_clamp,
        )


def link_prob(X, Lambda, i: int, j: int) -> float:
    """ 1 - exp(-X_i^T Lambda X_j) for the ordered dyad (i, j). """
    if i == j:
        raise ValueError(f"Self dyad ({i}, {j}) has no link probability")
    return float(link_probabilities(X, Lambda, np.array([i]), np.array([j]))[0])


def posterior_link_probs(trace: PosteriorTrace, dyads) -> np.ndarray:
    """Posterior mean link probability of every dyad.

    Tracked dyads use the running mean, anything else needs the retained draws.
    """
    if trace.n_retained < 1:
        raise ValueError("Posterior trace holds no retained draws")
    dyads = np.asarray(dyads, dtype=np.int64).reshape(-1, 2)
    if np.any(dyads[:, 0] == dyads[:, 1]):
        raise ValueError("Self dyads have no link probability")

    tracked = trace.mean_link_prob
    probs = np.empty(len(dyads))
    missing = []
    for num, (i, j) in enumerate(dyads.tolist()):
        if (i, j) in tracked:
            probs[num] = tracked[(i, j)]
        else:
            missing.append(num)
    if missing:
        if not trace.draws:
            raise ValueError(f"{len(missing)} dyads were not tracked and no draws were kept")
        rows = dyads[missing]
        per_draw = [link_probabilities(X, Lambda, rows[:, 0], rows[:, 1]) for X, Lambda in trace.draws]
        probs[missing] = np.mean(per_draw, axis=0)
    return probs


def posterior_link_prob(trace: PosteriorTrace, dyad: Tuple[int, int]) -> float:
    return float(posterior_link_probs(trace, [dyad])[0])


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ Mann-Whitney AUC with midranks for tied scores. """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("Scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = stats.rankdata(scores)
    u_stat = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def nll_from_probs(probs, labels, clamp: float = NLL_CLAMP) -> float:
    probs = np.clip(np.asarray(probs, dtype=float), clamp, 1.0 - clamp)
    labels = np.asarray(labels).astype(bool)
    if probs.size == 0:
        raise ValueError("Mean NLL of an empty test set")
    return float(-np.mean(np.where(labels, np.log(probs), np.log1p(-probs))))


def mean_nll(trace: PosteriorTrace, test_dyads, labels) -> float:
    """ Average negative log-likelihood of labelled held-out dyads. """
    if len(test_dyads) == 0:
        raise ValueError("Mean NLL of an empty test set")
    return nll_from_probs(posterior_link_probs(trace, test_dyads), labels)


def evaluate(trace: PosteriorTrace, test_dyads, labels) -> EvalResult:
    labels = np.asarray(labels).astype(bool)
    if labels.size == 0:
        logger.warning("Empty test set; no AUC or NLL")
        return EvalResult(None, None, 0, 0)
    probs = posterior_link_probs(trace, test_dyads)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    area = None
    if n_pos and n_neg:
        area = auc(probs, labels)
    else:
        logger.warning("Test set holds a single class (%d positive, %d negative); no AUC",
                       n_pos, n_neg)
    return EvalResult(area, nll_from_probs(probs, labels), n_pos, n_neg)


def degree_product_scores(graph: SparseGraph, dyads) -> np.ndarray:
    """ Baseline scores (out-degree of i + 1) * (in-degree of j + 1). """
    dyads = np.asarray(dyads, dtype=np.int64).reshape(-1, 2)
    out_degree = graph.out_degree + 1.0
    in_degree = np.bincount(graph.dst, minlength=graph.n_nodes) + 1.0
    return out_degree[dyads[:, 0]] * in_degree[dyads[:, 1]]
