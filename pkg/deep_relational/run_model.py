#!/usr/bin/env python3

""" Command line front end.

Subcommands
-----------

fit       split a relation, run the sampler and write the run directory
eval      rescore a finished run against its reconstructed split
generate  write a synthetic dataset with its ground truth
geweke    check the sampler against forward draws
report    collect run directories into one table

Flags override values from ``--config``, which override the defaults.

Examples
========

```
deep-relational fit --edges citeseer.tsv --features citeseer_feat.tsv --out runs/cs
deep-relational fit --config runs/cs.json --mode mmsb --out runs/cs_mmsb
deep-relational eval --state runs/cs/state.bin --edges citeseer.tsv
deep-relational report --run runs/cs runs/cs_mmsb
```

Exit status is 1 for unusable input and 2 when sampling fails.
"""

import csv
import json
import logging
import sys
from pathlib import Path

import argh
import numpy as np
from icecream import ic

import deep_relational.dataio as dio
import deep_relational.synthgen as sg
from deep_relational.gibbs import run_chain
from deep_relational.model_core import FeatureMatrix, init_state, resolve_features, validate_state
from deep_relational.predictor import evaluate
from deep_relational.randkit import RngStream

logger = logging.getLogger(__name__)

INPUT_ERRORS = (dio.ConfigError, dio.EdgeParseError, FileNotFoundError, ValueError)
RUNTIME_ERRORS = (ValueError, OverflowError, FloatingPointError, RuntimeError, MemoryError)


def _fail(err: Exception, code: int):
    logger.error("%s", err)
    raise SystemExit(code)


@argh.arg("--config", help="JSON run configuration")
@argh.arg("--edges", help="tab separated edge list")
@argh.arg("--features", help="tab separated feature triplets")
@argh.arg("--out", help="output directory")
@argh.arg("--seed", type=int, help="sampler seed")
@argh.arg("--split-seed", type=int, help="train/test split seed, defaults to --seed")
@argh.arg("--mode", choices=("standard", "plain", "inde", "full", "mmsb"))
@argh.arg("--threads", type=int, help="workers for block parallel phases")
@argh.arg("--iterations", type=int)
@argh.arg("--burn-in", type=int)
@argh.arg("--communities", type=int, help="K")
@argh.arg("--layers", type=int, help="L")
@argh.arg("--undirected", help="symmetrise the edge list")
@argh.arg("--dry", help="print the resolved configuration and stop")
def fit(
    config=None,
    edges=None,
    features=None,
    out=None,
    seed=None,
    split_seed=None,
    mode=None,
    threads=None,
    iterations=None,
    burn_in=None,
    communities=None,
    layers=None,
    undirected=False,
    dry=False,
):
    """ Fit the model to a relation and write the run directory. """
    try:
        run_config = dio.parse_config(config) if config else dio.RunConfig()
        run_config = run_config.updated(
            edges=edges, features=features, out=out, seed=seed, split_seed=split_seed,
            mode=mode, threads=threads, iterations=iterations, burn_in=burn_in,
            K=communities, L=layers, undirected=undirected or None,
        )
        run_config.check_paths()
        if run_config.out is None:
            raise dio.ConfigError("No output directory given (key 'out')")
        hp = run_config.hyper_params()
        if dry:
            ic(run_config.as_dict())
            return

        graph = dio.load_edges(run_config.edges, undirected=run_config.undirected)
        if run_config.features:
            node_features = dio.load_features(run_config.features, graph.n_nodes)
        else:
            node_features = FeatureMatrix.empty(graph.n_nodes)
        node_features = resolve_features(node_features, hp)
        train, test_dyads, labels = dio.make_split(
            graph, run_config.train_ratio, run_config.negatives_per_positive,
            RngStream(run_config.effective_split_seed),
        )
    except INPUT_ERRORS as err:
        _fail(err, 1)

    stream = RngStream(run_config.seed)
    try:
        state = init_state(train, node_features, hp, stream.child(0))
        trace = run_chain(
            state, train, node_features, hp, stream.child(1),
            trace_dyads=test_dyads, threads=run_config.threads,
            keep_draws=run_config.keep_draws, progress_every=run_config.progress_every,
        )
    except RUNTIME_ERRORS as err:
        _fail(err, 2)

    violations = validate_state(state, train, node_features)
    if violations:
        for violation in violations:
            logger.error("State audit: %s", violation)
        _fail(RuntimeError(f"{len(violations)} invariant violations after sampling"), 2)
    logger.info("Test-mask audit passed: no held-out dyad in B support or latent counts")

    evaluation = evaluate(trace, test_dyads, labels)
    dio.save_outputs(trace, evaluation, state, Path(run_config.out), config=run_config.as_dict())
    if evaluation.auc is not None:
        logger.info("AUC %.4f, mean NLL %.4f", evaluation.auc, evaluation.mean_nll)


@argh.named("eval")
@argh.arg("--state", help="state.bin of a finished fit")
@argh.arg("--edges", help="the edge list the fit was split from")
@argh.arg("--split-seed", type=int)
@argh.arg("--out", help="directory for metrics.json, defaults to the state's directory")
def evaluate_run(state=None, edges=None, split_seed=None, out=None):
    """ Recompute metrics.json from a stored trace and the reconstructed split. """
    try:
        if state is None or edges is None:
            raise dio.ConfigError("eval needs both --state and --edges")
        model_state, trace, config_echo = dio.load_state(state)
        run_config = dio.config_from_dict(config_echo).updated(split_seed=split_seed)
        graph = dio.load_edges(edges, undirected=run_config.undirected)
        if graph.n_nodes != model_state.n_nodes:
            raise ValueError(
                f"{edges} has {graph.n_nodes} nodes, the stored state has {model_state.n_nodes}"
            )
        if trace is None:
            raise ValueError(f"{state} holds no posterior trace")
        _, test_dyads, labels = dio.make_split(
            graph, run_config.train_ratio, run_config.negatives_per_positive,
            RngStream(run_config.effective_split_seed),
        )
        evaluation = evaluate(trace, test_dyads, labels)
    except INPUT_ERRORS as err:
        _fail(err, 1)

    out_dir = Path(out) if out else Path(state).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    dio.write_metrics(out_dir, evaluation, trace.n_retained, config_echo)
    logger.info("Wrote %s", out_dir / "metrics.json")


@argh.arg("--n", type=int, help="nodes")
@argh.arg("--k", type=int, help="communities")
@argh.arg("--l", type=int, help="layers")
@argh.arg("--d", type=int, help="features")
@argh.arg("--seed", type=int)
@argh.arg("--out", help="output directory")
@argh.arg("--edge-density", type=float, help="density of the provisional support")
@argh.arg("--feature-density", type=float)
@argh.arg("--lambda-strength", type=float, help="block structured Lambda of this strength")
@argh.arg("--zero-lambda", help="force Lambda to zero (no edges)")
def generate(
    n=100,
    k=4,
    l=2,
    d=0,
    seed=0,
    out=None,
    edge_density=0.05,
    feature_density=0.05,
    lambda_strength=None,
    zero_lambda=False,
):
    """ Write edges.tsv, features.tsv and truth CSVs for a synthetic dataset. """
    try:
        if out is None:
            raise dio.ConfigError("No output directory given (--out)")
        spec = sg.SynthSpec(
            N=n, K=k, L=l, D=d, seed=seed, edge_density=edge_density,
            feature_density=feature_density, lambda_strength=lambda_strength,
            zero_lambda=zero_lambda,
        )
    except INPUT_ERRORS as err:
        _fail(err, 1)

    graph, node_features, truth = sg.generate(spec, RngStream(seed))
    sg.write_dataset(graph, node_features, truth, Path(out))


@argh.arg("--n", type=int)
@argh.arg("--k", type=int)
@argh.arg("--l", type=int)
@argh.arg("--d", type=int)
@argh.arg("--samples", type=int, help="draws per arm")
@argh.arg("--seed", type=int)
@argh.arg("--edge-density", type=float, help="density of the frozen support")
@argh.arg("--identity", help="self-test with an exact forward redraw as the sweep")
@argh.arg("--mutation", help="self-test with a deliberately wrong X update")
def geweke(n=8, k=3, l=2, d=0, samples=50000, seed=0, edge_density=0.3,
           identity=False, mutation=False):
    """ Print Geweke z-scores; exit 1 when any |z| reaches the threshold. """
    try:
        if identity and mutation:
            raise dio.ConfigError("Choose at most one of --identity and --mutation")
        spec = sg.SynthSpec(N=n, K=k, L=l, D=d, seed=seed, edge_density=edge_density,
                            sample_hypers=False)
    except INPUT_ERRORS as err:
        _fail(err, 1)

    sweep_fn = sg.gibbs_sweep
    if identity:
        sweep_fn = sg.identity_sweep
    elif mutation:
        sweep_fn = sg.mutated_sweep
    try:
        result = sg.geweke_pair(spec, samples, sweep_fn, RngStream(seed), progress=True)
    except RUNTIME_ERRORS as err:
        _fail(err, 2)

    print(result.table())
    if not result.passed():
        logger.error("Geweke check failed: some |z| >= %g", sg.GEWEKE_THRESHOLD)
        raise SystemExit(1)


def _read_run(run_dir: Path) -> dict:
    metrics_path = run_dir / "metrics.json"
    if not metrics_path.is_file():
        raise FileNotFoundError(f"No metrics.json in run directory {run_dir}")
    with open(metrics_path, "r") as f:
        metrics = json.load(f)
    config = metrics.get("config", {})
    latent = []
    latent_path = run_dir / "latent_counts.csv"
    if latent_path.is_file():
        table = np.loadtxt(latent_path, delimiter=",", skiprows=1, ndmin=2)
        latent = table[:, 1].tolist() if table.size else []
    return dict(
        run=str(run_dir),
        K=config.get("K"),
        L=config.get("L"),
        mode=config.get("mode"),
        auc=metrics.get("auc"),
        mean_nll=metrics.get("mean_nll"),
        n_retained=metrics.get("n_retained"),
        latent_counts=";".join(f"{value:.6g}" for value in latent),
    )


@argh.arg("--run", nargs="+", help="run directories written by fit")
@argh.arg("--out", help="CSV keyed by K and L")
def report(run=None, out="report.csv"):
    """ Summarise run directories as a table and a K/L keyed CSV. """
    try:
        if not run:
            raise dio.ConfigError("report needs at least one --run directory")
        rows = [_read_run(Path(run_dir)) for run_dir in run]
    except INPUT_ERRORS as err:
        _fail(err, 1)

    rows.sort(key=lambda row: (row["K"] or 0, row["L"] or 0, row["run"]))
    columns = ["run", "K", "L", "mode", "auc", "mean_nll", "n_retained", "latent_counts"]
    with open(out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)

    print(f"{'K':>4} {'L':>3} {'auc':>8} {'nll':>8}  latent counts (layer L..1)  run")
    for row in rows:
        auc_text = f"{row['auc']:.4f}" if row["auc"] is not None else "n/a"
        nll_text = f"{row['mean_nll']:.4f}" if row["mean_nll"] is not None else "n/a"
        print(f"{row['K']!s:>4} {row['L']!s:>3} {auc_text:>8} {nll_text:>8}"
              f"  {row['latent_counts']:<26}  {row['run']}")


def main():
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    argh.dispatch_commands([fit, evaluate_run, generate, geweke, report])


if __name__ == "__main__":
    main()
