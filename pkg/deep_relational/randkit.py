#!/usr/bin/env python3

""" Exact samplers for the distributions the Gibbs sweep needs.

Every sampler takes ``rng`` as a ``numpy.random.Generator``, an ``RngStream`` or a
plain integer seed, and accepts scalars or arrays. Scalars in give Python scalars out.

Substreams
----------
``RngStream`` is a seed plus a key path. Two streams with the same seed and key give
the same draws, so work cut into fixed blocks (see ``block_map``) is reproducible no
matter how many threads run the blocks.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Tuple, TypeVar, Union

import numpy as np
from icecream import ic
from scipy import special, stats

GAMMA_FLOOR = 1e-300
CRT_MAX_CUSTOMERS = 10 ** 6
ZTP_INVERSION_LIMIT = 30.0
BLOCK_SIZE = 512
TOUCHARD_CHUNK = 4096

Result = TypeVar("Result")


@dataclass(frozen=True)
class RngStream:
    """ Seeded source of reproducible substreams.

    Parameters
    ----------
    seed: int
        Non-negative seed, up to 64 bits.
    stream_key: (int, ...)
        Path of keys, typically (iteration, phase, layer, block).
    """

    seed: int
    stream_key: Tuple[int, ...] = ()

    def __post_init__(self):
        if int(self.seed) < 0 or int(self.seed) >= 2 ** 64:
            raise ValueError(f"Seed must be a 64-bit unsigned value: {self.seed}")

    def child(self, *key: int) -> "RngStream":
        """ Derive the substream for ``key`` below this one. """
        return RngStream(self.seed, self.stream_key + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        """ A fresh generator positioned at the start of this stream. """
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=self.stream_key)
        return np.random.default_rng(sequence)


RandomLike = Union[np.random.Generator, RngStream, int, None]


def as_generator(rng: RandomLike) -> np.random.Generator:
    """ Turn ``rng`` into a ``numpy.random.Generator``. """
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"Unable to build a random generator from {type(rng)}")


def _unwrap(values, cast=float):
    """ Return a Python scalar for zero-dimensional results. """
    if np.ndim(values) == 0:
        return cast(np.asarray(values).reshape(-1)[0])
    return values


def gamma_sample(shape, scale, rng: RandomLike):
    """ Draw Gam(shape, scale), mean ``shape * scale``, floored at ``GAMMA_FLOOR``. """
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if not np.all(shape > 0) or not np.all(np.isfinite(shape)):
        raise ValueError(f"Gamma shape must be positive and finite: {shape}")
    if not np.all(scale > 0) or not np.all(np.isfinite(scale)):
        raise ValueError(f"Gamma scale must be positive and finite: {scale}")
    draws = np.maximum(as_generator(rng).gamma(shape, scale), GAMMA_FLOOR)
    return _unwrap(draws)


def dirichlet_sample(concentration, rng: RandomLike) -> np.ndarray:
    """Draw one simplex vector per row of ``concentration``.

    The gamma variates are built in log space as log Gam(a + 1) + log(U) / a, which
    keeps small concentrations from collapsing a whole row to zero. Entries are
    floored at ``GAMMA_FLOOR`` and the rows renormalised.
    """
    conc = np.asarray(concentration, dtype=float)
    if conc.ndim not in (1, 2) or conc.shape[-1] == 0:
        raise ValueError(f"Concentration must be a K-vector or N x K matrix: {conc.shape}")
    if not np.all(conc > 0) or not np.all(np.isfinite(conc)):
        raise ValueError("Dirichlet concentration entries must be positive and finite")

    gen = as_generator(rng)
    log_g = np.log(gen.gamma(conc + 1.0)) + np.log(1.0 - gen.random(conc.shape)) / conc
    log_g -= log_g.max(axis=-1, keepdims=True)
    probs = np.maximum(np.exp(log_g), GAMMA_FLOOR)
    return probs / probs.sum(axis=-1, keepdims=True)


def crt_sample(m, r, rng: RandomLike):
    """Chinese restaurant table counts, CRT(m, r).

    The count is the sum over t = 1..m of Bernoulli(r / (r + t - 1)); all customers
    of all entries are drawn in one pass.
    """
    m = np.asarray(m, dtype=np.int64)
    r = np.broadcast_to(np.asarray(r, dtype=float), m.shape)
    if np.any(m < 0):
        raise ValueError("CRT customer counts must be non-negative")
    if not np.all(r > 0) or not np.all(np.isfinite(r)):
        raise ValueError("CRT concentration must be positive and finite")
    if np.any(m > CRT_MAX_CUSTOMERS):
        raise ValueError(f"CRT customer count above {CRT_MAX_CUSTOMERS}: {m.max()}")

    flat_m = m.reshape(-1)
    flat_r = r.reshape(-1)
    owner = np.repeat(np.arange(flat_m.size), flat_m)
    starts = np.cumsum(flat_m) - flat_m
    # Zero based customer index within its own restaurant
    t = np.arange(owner.size) - starts[owner]
    opens_table = as_generator(rng).random(owner.size) * (flat_r[owner] + t) < flat_r[owner]
    tables = np.bincount(owner[opens_table], minlength=flat_m.size).reshape(m.shape)
    return _unwrap(tables, int)


def ztp_sample(rate, rng: RandomLike):
    """Zero-truncated Poisson draws.

    Rates below ``ZTP_INVERSION_LIMIT`` invert the truncated CDF; larger rates draw
    Poisson and redraw the (vanishingly rare) zeros.
    """
    rate = np.asarray(rate, dtype=float)
    if not np.all(np.isfinite(rate)) or np.any(rate <= 0):
        raise ValueError("Zero-truncated Poisson rate must be positive and finite")

    gen = as_generator(rng)
    flat = rate.reshape(-1)
    draws = np.empty(flat.size, dtype=np.int64)

    small = flat < ZTP_INVERSION_LIMIT
    if small.any():
        lam = flat[small]
        # Uniform over (P(0), 1], the CDF range left once zero is removed
        target = np.exp(-lam) - gen.random(lam.size) * np.expm1(-lam)
        target = np.minimum(target, np.nextafter(1.0, 0.0))
        draws[small] = np.maximum(stats.poisson.ppf(target, lam), 1)

    large = ~small
    if large.any():
        lam = flat[large]
        values = gen.poisson(lam)
        zero = values == 0
        while zero.any():
            values[zero] = gen.poisson(lam[zero])
            zero = values == 0
        draws[large] = values

    return _unwrap(draws.reshape(rate.shape), int)


def touchard_cap(lam, n) -> np.ndarray:
    """ Largest support point kept by the Touchard sampler for each (lam, n). """
    total = np.asarray(lam, dtype=float) + np.asarray(n, dtype=float)
    return np.ceil(total + 12.0 * np.sqrt(total) + 20.0).astype(np.int64)


def touchard_log_sample(log_lam, n, rng: RandomLike) -> np.ndarray:
    """Draw from P(x) proportional to lam^x x^n / x! given log(lam).

    Working from log(lam) keeps rates such as M pi exp(-S) usable long after lam
    itself has underflowed. The pmf is evaluated in log space on 0..cap, normalised
    with logsumexp and inverted against one uniform per entry, a chunk of entries
    at a time.
    """
    log_lam = np.atleast_1d(np.asarray(log_lam, dtype=float))
    n = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if np.any(np.isnan(log_lam)) or np.any(np.isposinf(log_lam)):
        raise ValueError("Touchard rate must be finite")
    if np.any(n < 0):
        raise ValueError("Touchard exponent must be non-negative")
    if np.any(np.isneginf(log_lam) & (n >= 1)):
        bad = np.flatnonzero(np.isneginf(log_lam) & (n >= 1))
        raise ValueError(f"Inconsistent state: zero rate with positive counts at {bad}")

    gen = as_generator(rng)
    draws = np.empty(log_lam.size, dtype=np.int64)
    for start in range(0, log_lam.size, TOUCHARD_CHUNK):
        stop = start + TOUCHARD_CHUNK
        draws[start:stop] = _touchard_chunk(log_lam[start:stop], n[start:stop], gen)
    return draws


def _touchard_chunk(log_lam, n, gen) -> np.ndarray:
    lam = np.exp(log_lam)
    x_max = int(touchard_cap(lam, n).max())
    x = np.arange(x_max + 1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        term_lam = np.where(x[None, :] == 0, 0.0, x[None, :] * log_lam[:, None])
        term_n = np.where(n[:, None] == 0, 0.0, n[:, None] * np.log(x)[None, :])
    log_w = term_lam + term_n - special.gammaln(x + 1.0)[None, :]

    log_norm = special.logsumexp(log_w, axis=1, keepdims=True)
    cdf = np.cumsum(np.exp(log_w - log_norm), axis=1)
    u = gen.random(log_lam.size)
    return np.minimum((cdf < u[:, None]).sum(axis=1), x_max)


def touchard_conditional_sample(lam, n, rng: RandomLike):
    """ Draw x with P(x) proportional to lam^x x^n / x!. """
    lam = np.asarray(lam, dtype=float)
    n = np.asarray(n, dtype=np.int64)
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError("Touchard rate must be non-negative and finite")
    if np.any((lam == 0) & (n >= 1)):
        raise ValueError("Inconsistent state: zero rate with positive counts")
    with np.errstate(divide="ignore"):
        log_lam = np.log(lam)
    shape = np.broadcast(lam, n).shape
    draws = touchard_log_sample(
        np.broadcast_to(log_lam, shape).reshape(-1),
        np.broadcast_to(n, shape).reshape(-1),
        rng,
    )
    return _unwrap(draws.reshape(shape), int)


def multinomial_split(total: int, weights, rng: RandomLike) -> np.ndarray:
    """ Split ``total`` into counts with probabilities proportional to ``weights``. """
    weights = np.asarray(weights, dtype=float)
    if total < 0:
        raise ValueError(f"Multinomial total must be non-negative: {total}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("Multinomial weights must be non-negative and finite")
    if total == 0:
        return np.zeros(weights.shape, dtype=np.int64)
    weight_sum = weights.sum()
    if weight_sum <= 0:
        raise ValueError("Positive multinomial total with all-zero weights")
    return as_generator(rng).multinomial(int(total), weights / weight_sum)


def grouped_multinomial_split(totals, indptr, weights, rng: RandomLike) -> np.ndarray:
    """Many multinomial splits over ragged groups at once.

    Group ``g`` splits ``totals[g]`` over ``weights[indptr[g]:indptr[g + 1]]``. Each
    unit picks its cell by inverting the group's cumulative weights, which is the
    same law as one ``multinomial_split`` per group. Weights are rescaled by their
    group maximum and normalised per group before the cumulative sum, so every group
    occupies a unit interval regardless of the magnitudes in other groups.

    Returns
    -------
    np.ndarray
        Integer counts aligned with ``weights``.
    """
    totals = np.asarray(totals, dtype=np.int64)
    indptr = np.asarray(indptr, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    if totals.shape != (indptr.size - 1,):
        raise ValueError("One total is needed per group")
    if np.any(totals < 0) or np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("Grouped split needs non-negative totals and finite non-negative weights")
    if totals.sum() == 0:
        return np.zeros(weights.size, dtype=np.int64)

    n_groups = totals.size
    sizes = np.diff(indptr)
    if indptr[0] != 0 or indptr[-1] != weights.size or np.any(sizes < 0):
        raise ValueError("Group bounds must run from 0 to the number of weights")
    group_of = np.repeat(np.arange(n_groups), sizes)
    peak = np.zeros(n_groups)
    filled = sizes > 0
    if filled.any():
        peak[filled] = np.maximum.reduceat(weights, indptr[:-1][filled])
    empty = (totals > 0) & (peak <= 0)
    if empty.any():
        raise ValueError(f"Positive totals with all-zero weights in groups {np.flatnonzero(empty)}")

    live = peak > 0
    scaled = np.zeros(weights.size)
    in_live = live[group_of]
    scaled[in_live] = weights[in_live] / peak[group_of[in_live]]
    group_sum = np.bincount(group_of, weights=scaled, minlength=n_groups)
    scaled[in_live] /= group_sum[group_of[in_live]]

    cum = np.concatenate(([0.0], np.cumsum(scaled)))
    lo = indptr[:-1]
    hi = indptr[1:]
    mass = cum[hi] - cum[lo]

    owner = np.repeat(np.arange(n_groups), totals)
    target = cum[lo[owner]] + as_generator(rng).random(owner.size) * mass[owner]
    pick = np.searchsorted(cum, target, side="right") - 1
    pick = np.clip(pick, lo[owner], hi[owner] - 1)
    # rounding at the top of a group can land on a trailing zero-weight cell
    dead = weights[pick] <= 0
    while dead.any():
        pick[dead] -= 1
        dead = weights[pick] <= 0
    return np.bincount(pick, minlength=weights.size)


def edge_partition_sample(left, right, Lambda, rng: RandomLike):
    """Latent counts of observed edges under a bilinear Poisson rate.

    Edge e has rate sum over (k1, k2) of left[e, k1] Lambda[k1, k2] right[e, k2] and is
    known to be positive, so its total is zero-truncated Poisson. The total is split
    over k1 first, then over k2 given k1. An edge whose rate is exactly zero gets a
    total of 1 placed uniformly over the K x K cells.

    Returns
    -------
    (totals, rows, cols, block)
        Per-edge totals, E x K marginals over k1 and k2, and the K x K block sums.
    """
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    Lambda = np.asarray(Lambda, dtype=float)
    gen = as_generator(rng)
    n_edges, K = left.shape

    row_weight = left * (right @ Lambda.T)
    rate = row_weight.sum(axis=1)
    dead = ~(rate > 0)
    totals = np.ones(n_edges, dtype=np.int64)
    if (~dead).any():
        totals[~dead] = ztp_sample(rate[~dead], gen)
    row_weight[dead] = 1.0

    rows = grouped_multinomial_split(
        totals, np.arange(n_edges + 1) * K, row_weight.reshape(-1), gen
    ).reshape(n_edges, K)

    edge_idx, k1_idx = np.nonzero(rows)
    cell_weight = Lambda[k1_idx, :] * right[edge_idx, :]
    cell_weight[dead[edge_idx]] = 1.0
    cells = grouped_multinomial_split(
        rows[edge_idx, k1_idx], np.arange(edge_idx.size + 1) * K, cell_weight.reshape(-1), gen
    ).reshape(edge_idx.size, K)

    cols = np.zeros((n_edges, K), dtype=np.int64)
    block = np.zeros((K, K), dtype=np.int64)
    np.add.at(cols, edge_idx, cells)
    np.add.at(block, k1_idx, cells)
    return totals, rows, cols, block


def block_map(
    func: Callable[[int, int, np.random.Generator], Result],
    n_items: int,
    stream: RngStream,
    threads: int = 1,
    block_size: int = BLOCK_SIZE,
) -> List[Result]:
    """Run ``func(start, stop, generator)`` over fixed blocks of ``range(n_items)``.

    Block ``b`` always draws from ``stream.child(b)``; results come back in block
    order, so the output does not depend on ``threads``.
    """
    jobs = [
        (start, min(start + block_size, n_items), stream.child(num))
        for num, start in enumerate(range(0, n_items, block_size))
    ]

    def run(job):
        start, stop, sub_stream = job
        return func(start, stop, sub_stream.generator())

    if threads <= 1 or len(jobs) <= 1:
        return [run(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, jobs))


if __name__ == "__main__":
    stream = RngStream(2024)
    ic(np.mean(crt_sample(np.full(10_000, 5), 2.0, stream.child(0))))
    ic(np.mean(ztp_sample(np.full(10_000, 2.0), stream.child(1))))
    ic(np.bincount(touchard_conditional_sample(np.ones(10_000), 1, stream.child(2)))[:4] / 1e4)
