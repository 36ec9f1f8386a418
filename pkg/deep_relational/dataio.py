#!/usr/bin/env python3

""" Read graphs, features and run configuration; write run outputs.

Config Structure
----------------

A run is described by one JSON document (YAML is accepted too) whose keys are the
``RunConfig`` fields. Unknown keys are rejected.

Examples
========

```
{
  "edges": "data/citeseer.tsv",
  "features": "data/citeseer_features.tsv",
  "out": "runs/citeseer",
  "K": 20,
  "L": 4,
  "mode": "standard",
  "iterations": 2000,
  "burn_in": 1000,
  "seed": 7
}
```

File formats
------------

- edges: ``src<TAB>dst`` per line, 0-indexed, ``#`` lines are comments.
- features: ``node<TAB>feature<TAB>value`` per line.
- CSV outputs use 17 significant digits.
"""

import dataclasses
import json
import logging
import math
import re
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import yaml
from scipy import sparse

from deep_relational.model_core import (
    FeatureMatrix,
    HyperParams,
    ModelState,
    PosteriorTrace,
    SparseGraph,
)
from deep_relational.predictor import EvalResult
from deep_relational.randkit import RandomLike, as_generator

logger = logging.getLogger(__name__)

STATE_FORMAT_VERSION = 1
MAX_NODE_INDEX = 2 ** 31 - 1
CSV_FLOAT = "%.17g"
HYPER_FIELDS = tuple(f.name for f in dataclasses.fields(HyperParams))
ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


class ConfigError(ValueError):
    """ A configuration key or value is not usable. """


class EdgeParseError(ValueError):
    """ A line of an edge or feature file could not be read. """


@dataclass
class RunConfig:
    """ Everything a fit needs: input paths, model hyper-parameters and the split. """

    edges: Optional[str] = None
    features: Optional[str] = None
    out: Optional[str] = None
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
    train_ratio: float = 0.9
    negatives_per_positive: int = 1
    undirected: bool = False
    split_seed: Optional[int] = None
    keep_draws: bool = False
    progress_every: int = 100
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.train_ratio <= 1:
            raise ConfigError(f"train_ratio must lie in (0, 1]: {self.train_ratio}")
        if self.negatives_per_positive < 0:
            raise ConfigError(f"negatives_per_positive must be >= 0: {self.negatives_per_positive}")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1: {self.threads}")
        if self.seed < 0 or (self.split_seed is not None and self.split_seed < 0):
            raise ConfigError("Seeds must be non-negative")
        try:
            self.hyper_params()
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def hyper_params(self) -> HyperParams:
        return HyperParams(**{name: getattr(self, name) for name in HYPER_FIELDS})

    @property
    def effective_split_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed

    def check_paths(self):
        """ Raise FileNotFoundError for any input path that does not exist. """
        if self.edges is None:
            raise ConfigError("No edge file given (key 'edges')")
        for key in ("edges", "features"):
            value = getattr(self, key)
            if value is not None and not Path(value).is_file():
                raise FileNotFoundError(f"Input file for '{key}' not found: {value}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def updated(self, **overrides) -> "RunConfig":
        """ Copy with every override that is not None applied. """
        chosen = {key: value for key, value in overrides.items() if value is not None}
        unknown = set(chosen) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")
        return dataclasses.replace(self, **chosen)


def parse_config(file_path: Path) -> RunConfig:
    """ Read a run configuration file. """
    file_path = Path(file_path)
    if not file_path.is_file():
        raise FileNotFoundError(f"Configuration file not found: {file_path}")
    try:
        with open(file_path, "r") as f:
            config_dict = yaml.safe_load(f)
    except yaml.parser.ParserError:
        print(f"Unable to parse configuration file: {file_path}")
        raise SystemExit(1)
    except yaml.scanner.ScannerError:
        print(f"Malformed configuration file: {file_path}")
        raise SystemExit(1)

    return config_from_dict(config_dict if config_dict is not None else {})


def config_from_dict(config_dict) -> RunConfig:
    """ Build a RunConfig, accepting a list of single-key mappings as well. """
    if isinstance(config_dict, list):
        config_dict = _collapse_dictionary_list(config_dict)
    if not isinstance(config_dict, dict):
        raise ConfigError(f"Configuration must be a mapping, got {type(config_dict).__name__}")

    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in config_dict:
        if key not in known:
            raise ConfigError(f"Unknown configuration key: '{key}'")
    try:
        return RunConfig(**config_dict)
    except TypeError as err:
        raise ConfigError(f"Bad configuration value: {err}") from err


def _collapse_dictionary_list(list_):
    """ Given a list of dictionaries convert this into one single dictionary. """
    dict_ = {}
    for entry in list_:
        if not isinstance(entry, dict):
            raise ConfigError(f"Configuration list entries must be mappings: {entry!r}")
        for key, value in entry.items():
            if key in dict_:
                raise ConfigError(f"Collision on key {key} when flattening configuration")
            dict_[key] = value
    return dict_


def _declared_sizes(path: Path) -> dict:
    """ Sizes from a leading ``# n_nodes=.. n_features=..`` comment, if there is one. """
    with open(path, "r") as f:
        first = f.readline()
    if not first.startswith("#"):
        return {}
    return {key: int(value) for key, value in re.findall(r"(n_nodes|n_features)=(\d+)", first)}


def _data_lines(path: Path):
    """ Yield (line number, fields) for every non-comment line. """
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, [field.strip() for field in stripped.split("\t")]


def load_edges(path: Path, undirected: bool = False, n_nodes: Optional[int] = None) -> SparseGraph:
    """Read a tab separated edge list.

    Duplicate edges collapse and self-loops are dropped with a warning. The node count
    is the largest index plus one unless ``n_nodes`` is given.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Edge file not found: {path}")

    pairs = []
    for lineno, fields in _data_lines(path):
        try:
            if len(fields) != 2:
                raise ValueError
            src, dst = int(fields[0]), int(fields[1])
        except ValueError:
            raise EdgeParseError(f"{path}, line {lineno}: expected 'src<TAB>dst', got {fields}")
        if src < 0 or dst < 0:
            raise EdgeParseError(f"{path}, line {lineno}: negative node index")
        if max(src, dst) > MAX_NODE_INDEX:
            raise EdgeParseError(f"{path}, line {lineno}: node index overflow ({max(src, dst)})")
        pairs.append((src, dst))

    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    loops = pairs[:, 0] == pairs[:, 1]
    if loops.any():
        logger.warning("Dropped %d self-loops from %s", int(loops.sum()), path)
        pairs = pairs[~loops]

    inferred = int(pairs.max()) + 1 if pairs.size else 0
    if n_nodes is None:
        n_nodes = max(inferred, _declared_sizes(path).get("n_nodes", 0))
    elif n_nodes < inferred:
        raise ValueError(f"Edge file {path} uses node {inferred - 1} but only {n_nodes} nodes exist")

    graph = SparseGraph.from_pairs(n_nodes, pairs, directed=not undirected)
    logger.info("Loaded %s: N=%d, N_E=%d", path, graph.n_nodes, graph.n_edges)
    return graph


def load_features(path: Path, n_nodes: int) -> FeatureMatrix:
    """ Read ``node<TAB>feature<TAB>value`` triplets into a sparse matrix. """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Feature file not found: {path}")

    nodes, feats, values = [], [], []
    for lineno, fields in _data_lines(path):
        try:
            if len(fields) != 3:
                raise ValueError
            node, feat, value = int(fields[0]), int(fields[1]), float(fields[2])
        except ValueError:
            raise EdgeParseError(f"{path}, line {lineno}: expected 'node<TAB>feature<TAB>value'")
        if value < 0 or not math.isfinite(value):
            raise ValueError(f"{path}, line {lineno}: feature values must be non-negative, got {value}")
        if not 0 <= node < n_nodes:
            raise ValueError(f"{path}, line {lineno}: node {node} outside [0, {n_nodes})")
        if feat < 0:
            raise ValueError(f"{path}, line {lineno}: negative feature index")
        nodes.append(node)
        feats.append(feat)
        values.append(value)

    if not nodes:
        logger.info("No features in %s; running without features", path)
        return FeatureMatrix.empty(n_nodes)

    n_features = max(max(feats) + 1, _declared_sizes(path).get("n_features", 0))
    features = FeatureMatrix.from_triplets(n_nodes, n_features, nodes, feats, values)
    logger.info(
        "Loaded %s: D=%d, density %.2f%%", path, features.n_features, 100 * features.density
    )
    return features


def make_split(
    graph: SparseGraph, train_ratio: float, negatives_per_positive: int, rng: RandomLike
) -> Tuple[SparseGraph, np.ndarray, np.ndarray]:
    """Hold out ceil((1 - train_ratio) * out-degree) edges of every row.

    Each held-out edge is matched by ``negatives_per_positive`` non-edges from the
    same row, drawn without replacement. For undirected graphs each edge is handled
    once (i < j) and both orientations leave the training graph.

    Returns
    -------
    (train graph, test dyads, labels)
        The training graph carries every test dyad in its ``test_mask``.
    """
    if not 0 < train_ratio <= 1:
        raise ValueError(f"train_ratio must lie in (0, 1]: {train_ratio}")
    gen = as_generator(rng)
    N = graph.n_nodes
    neighbors = [[] for _ in range(N)]
    for src, dst in zip(graph.src.tolist(), graph.dst.tolist()):
        neighbors[src].append(dst)

    test_pos, test_neg = [], []
    taken = set()
    for row in range(N):
        if train_ratio == 1:
            break
        own = np.asarray(neighbors[row], dtype=np.int64)
        candidates = own[own > row] if not graph.directed else own
        n_test = math.ceil(round((1.0 - train_ratio) * candidates.size, 9))
        if n_test == 0:
            continue
        chosen = np.sort(gen.choice(candidates, n_test, replace=False))
        test_pos.extend((row, int(j)) for j in chosen)

        forbidden = np.concatenate([own, [row]])
        free = np.setdiff1d(np.arange(N), forbidden)
        if not graph.directed:
            free = np.array([j for j in free if (min(row, j), max(row, j)) not in taken], dtype=np.int64)
        n_neg = min(negatives_per_positive * n_test, free.size)
        if n_neg < negatives_per_positive * n_test:
            logger.warning("Row %d has only %d free non-edges for negatives", row, free.size)
        for j in np.sort(gen.choice(free, n_neg, replace=False)) if n_neg else ():
            test_neg.append((row, int(j)))
            taken.add((min(row, int(j)), max(row, int(j))))

    test_pos = np.asarray(test_pos, dtype=np.int64).reshape(-1, 2)
    test_neg = np.asarray(test_neg, dtype=np.int64).reshape(-1, 2)
    masked = np.concatenate([test_pos, test_neg])
    if not graph.directed:
        masked = np.concatenate([masked, masked[:, ::-1]])
    mask = frozenset(map(tuple, masked.tolist()))

    keep = ~np.isin(
        graph.src * max(N, 1) + graph.dst, masked[:, 0] * max(N, 1) + masked[:, 1]
    )
    train = SparseGraph(N, graph.src[keep], graph.dst[keep], graph.directed, mask)

    dyads = np.concatenate([test_pos, test_neg])
    labels = np.concatenate([np.ones(len(test_pos), dtype=np.int64),
                             np.zeros(len(test_neg), dtype=np.int64)])
    logger.info(
        "Split: %d training edges, %d test positives, %d test negatives",
        train.n_edges, len(test_pos), len(test_neg),
    )
    return train, dyads, labels


def write_matrix_csv(path: Path, matrix, header: str, fmt=CSV_FLOAT):
    np.savetxt(path, np.asarray(matrix), fmt=fmt, delimiter=",", header=header, comments="")


def write_metrics(out_dir: Path, evaluation: EvalResult, n_retained: int, config: Optional[dict] = None):
    """ metrics.json: the evaluation, the retained draw count and a config echo. """
    metrics = evaluation.as_dict()
    metrics["n_retained"] = n_retained
    if evaluation.auc is None:
        metrics["note"] = "AUC undefined: the test set does not hold both classes"
    metrics["config"] = config or {}
    with open(Path(out_dir) / "metrics.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")


def save_outputs(
    trace: PosteriorTrace,
    evaluation: EvalResult,
    state: ModelState,
    out_dir: Path,
    config: Optional[dict] = None,
):
    """Write metrics, predictions, posterior summaries and the state snapshot.

    Files: metrics.json, predictions.csv, pi_layer_<l>.csv, lambda.csv,
    latent_counts.csv and state.bin.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    write_metrics(out_dir, evaluation, trace.n_retained, config)

    predictions = np.column_stack([trace.dyads, trace.prob_mean]) if len(trace.dyads) else np.zeros((0, 3))
    write_matrix_csv(out_dir / "predictions.csv", predictions, "i,j,prob", fmt=["%d", "%d", CSV_FLOAT])

    header = ",".join(f"k{k}" for k in range(state.K))
    for layer, pi in enumerate(state.pi, start=1):
        write_matrix_csv(out_dir / f"pi_layer_{layer}.csv", pi, header)
    write_matrix_csv(out_dir / "lambda.csv", state.Lambda, header)

    latent = trace.mean_latent_counts
    layers = np.arange(len(latent), 0, -1)
    write_matrix_csv(
        out_dir / "latent_counts.csv", np.column_stack([layers, latent]).reshape(-1, 2),
        "layer,mean_count", fmt=["%d", CSV_FLOAT],
    )

    save_state(state, out_dir / "state.bin", trace=trace, config=config)
    logger.info("Wrote outputs to %s", out_dir)


def save_state(
    state: ModelState, path: Path, trace: Optional[PosteriorTrace] = None, config: Optional[dict] = None
):
    """Snapshot ``state`` (and optionally the trace) as an uncompressed npz archive.

    Only plain numeric and string arrays are stored, so loading never unpickles.
    """
    arrays = dict(
        format_version=np.array(STATE_FORMAT_VERSION),
        config=np.array(json.dumps(config or {}, sort_keys=True)),
        n_layers=np.array(state.L),
        support_mode=np.array(state.support_mode),
        T=state.T,
        Lambda=state.Lambda,
        X=state.X,
        z_row=state.z_row,
        z_col=state.z_col,
        z_block=state.z_block,
        z_edge_total=state.z_edge_total,
        M=np.array(state.M),
        alpha=np.array(state.alpha),
        gamma1=state.gamma1,
        gamma0=state.gamma0,
        c=state.c,
        gamma_feat=state.gamma_feat,
        k_Lambda=np.array(state.k_Lambda),
        theta_Lambda=np.array(state.theta_Lambda),
    )
    for layer, pi in enumerate(state.pi):
        arrays[f"pi_{layer}"] = pi
    for b, B in enumerate(state.B):
        arrays[f"B_{b}_data"] = B.data
        arrays[f"B_{b}_indices"] = B.indices
        arrays[f"B_{b}_indptr"] = B.indptr
        arrays[f"B_{b}_shape"] = np.array(B.shape)

    if trace is not None:
        arrays.update(
            trace_dyads=trace.dyads,
            trace_prob_mean=trace.prob_mean,
            trace_n_retained=np.array(trace.n_retained),
            trace_rng_seed=np.array(trace.rng_seed, dtype=np.uint64),
            trace_latent_mean=trace.mean_latent_counts,
            trace_keep_draws=np.array(trace.keep_draws),
        )
        if trace.draws:
            arrays["trace_draws_X"] = np.stack([X for X, _ in trace.draws])
            arrays["trace_draws_Lambda"] = np.stack([Lambda for _, Lambda in trace.draws])

    # Fixed member timestamps keep the archive byte-identical between runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=ZIP_TIMESTAMP)
            with archive.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asanyarray(arrays[key]), allow_pickle=False)


def load_state(path: Path) -> Tuple[ModelState, Optional[PosteriorTrace], dict]:
    """ Read a snapshot written by ``save_state``: (state, trace or None, config). """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"State file not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        data = {key: archive[key] for key in archive.files}

    version = int(data["format_version"])
    if version != STATE_FORMAT_VERSION:
        raise ValueError(f"{path} has state format {version}, expected {STATE_FORMAT_VERSION}")

    n_layers = int(data["n_layers"])
    B = [
        sparse.csc_matrix(
            (data[f"B_{b}_data"], data[f"B_{b}_indices"], data[f"B_{b}_indptr"]),
            shape=tuple(data[f"B_{b}_shape"]),
        )
        for b in range(n_layers - 1)
    ]
    state = ModelState(
        T=data["T"],
        pi=[data[f"pi_{layer}"] for layer in range(n_layers)],
        B=B,
        Lambda=data["Lambda"],
        X=data["X"],
        z_row=data["z_row"],
        z_col=data["z_col"],
        z_block=data["z_block"],
        z_edge_total=data["z_edge_total"],
        M=float(data["M"]),
        alpha=float(data["alpha"]),
        gamma1=data["gamma1"],
        gamma0=data["gamma0"],
        c=data["c"],
        gamma_feat=data["gamma_feat"],
        k_Lambda=float(data["k_Lambda"]),
        theta_Lambda=float(data["theta_Lambda"]),
        support_mode=str(data["support_mode"]),
    )

    trace = None
    if "trace_dyads" in data:
        draws = []
        if "trace_draws_X" in data:
            draws = list(zip(data["trace_draws_X"], data["trace_draws_Lambda"]))
        latent = data["trace_latent_mean"]
        trace = PosteriorTrace(
            data["trace_dyads"],
            rng_seed=int(data["trace_rng_seed"]),
            keep_draws=bool(data["trace_keep_draws"]),
            n_retained=int(data["trace_n_retained"]),
            prob_mean=data["trace_prob_mean"],
            latent_mean=latent if latent.size else None,
            draws=draws,
        )
    return state, trace, json.loads(str(data["config"]))


def write_edges(graph: SparseGraph, path: Path):
    """ Write every stored (src, dst) pair in the format ``load_edges`` reads. """
    pairs = np.column_stack([graph.src, graph.dst]) if graph.n_edges else np.zeros((0, 2), dtype=np.int64)
    np.savetxt(path, pairs, fmt="%d", delimiter="\t", header=f"n_nodes={graph.n_nodes}")


def write_features(features: FeatureMatrix, path: Path):
    nodes, feats, values = features.triplets()
    rows = np.empty((nodes.size, 3), dtype=object)
    rows[:, 0], rows[:, 1], rows[:, 2] = nodes, feats, values
    np.savetxt(path, rows, fmt=["%d", "%d", CSV_FLOAT], delimiter="\t",
               header=f"n_nodes={features.n_nodes} n_features={features.n_features}")
