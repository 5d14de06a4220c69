"""Command-line entry points.

Every command is a thin wrapper over the library: build a label tree
from class centers, train a beam-tree model, evaluate or predict with a
saved model, and run the numerical verification suites.  Exit codes:
0 success, 1 usage error, 2 verification failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .data import DataFormatError, class_centers, load_libsvm
from .evaluate import coverage_probability, topk_accuracy
from .modelio import ModelFormatError, load_model, load_tree, save_model, save_tree
from .search import predict_top_j
from .statlab import (
    SyntheticSpec,
    consistency_experiment,
    corollary1_limit_check,
    corollary1_trend,
    estimator_variance_mc,
    gradient_check,
    random_variance_inputs,
    variance_matrix_M,
)
from .trainer import TrainConfig, train_beam_tree
from .tree import build_tree_clustering

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_IO = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default; the contract wants 1.
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cane", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-tree", help="cluster class centers into a label tree")
    p.add_argument("--input", required=True, help="training data (LIBSVM format)")
    p.add_argument("--branching", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output", required=True, help="tree file to write")

    p = sub.add_parser("train", help="train a beam-tree model")
    p.add_argument("--data", required=True)
    p.add_argument("--tree", required=True)
    p.add_argument("--candidates", type=int, required=True)
    p.add_argument("--noises", type=int, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--sampler", choices=["uniform", "unigram"], default="uniform")
    p.add_argument("--power", type=float, default=1.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--metrics-out", default=None)
    p.add_argument("--eval-data", default=None, help="held-out data for metric records")
    p.add_argument("--eval-every", type=int, default=1)

    p = sub.add_parser("eval", help="accuracy and coverage of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--top", type=int, required=True)

    p = sub.add_parser("predict", help="top-J classes for each input line")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--top", type=int, required=True)

    p = sub.add_parser("verify", help="numerical verification suites")
    vsub = p.add_subparsers(dest="check", required=True)

    g = vsub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-6)

    c = vsub.add_parser("consistency", help="log-odds MSE shrinks with n")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--n-grid", default="1000,10000,100000")
    c.add_argument("--final-mse", type=float, default=0.05)

    v = vsub.add_parser("variance", help="asymptotic covariance matches theory")
    v.add_argument("--reps", type=int, default=200)
    v.add_argument("--n", type=int, default=50_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tolerance", type=float, default=0.25)

    r = vsub.add_parser("corollary1", help="precision gap vanishes with noise mass")
    r.add_argument("--eps", type=float, default=1e-3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--tolerance", type=float, default=0.01)

    return parser


def _load_features_line(line: str, lineno: int, dim: int):
    tokens = line.split()
    if tokens and ":" not in tokens[0]:
        tokens = tokens[1:]  # leading label, ignored for prediction
    indices = []
    values = []
    for token in tokens:
        try:
            idx_text, val_text = token.split(":", 1)
            idx = int(idx_text) - 1
            val = float(val_text)
        except ValueError:
            raise DataFormatError(f"line {lineno}: malformed feature {token!r}") from None
        if idx < 0:
            raise DataFormatError(f"line {lineno}: feature index must be 1-based")
        if idx < dim:  # features unseen at training time carry no parameters
            indices.append(idx)
            values.append(val)
    order = np.argsort(indices, kind="stable")
    idx = np.asarray(indices, dtype=np.int64)[order]
    if idx.size and (np.diff(idx) == 0).any():
        raise DataFormatError(f"line {lineno}: duplicate feature index")
    return idx, np.asarray(values, dtype=np.float64)[order]


def _cmd_build_tree(args) -> int:
    dataset = load_libsvm(args.input)
    centers = class_centers(dataset)
    tree = build_tree_clustering(centers, args.branching, args.seed)
    save_tree(tree, args.output, seed=args.seed)
    print(
        json.dumps(
            {
                "num_classes": tree.num_classes,
                "branching": tree.branching,
                "depth": tree.depth,
                "output": args.output,
            }
        )
    )
    return EXIT_OK


def _cmd_train(args) -> int:
    dataset = load_libsvm(args.data)
    tree = load_tree(args.tree)
    eval_dataset = None
    if args.eval_data is not None:
        eval_dataset = load_libsvm(args.eval_data, num_features=dataset.num_features)
        missing = set(eval_dataset.label_dictionary) - set(dataset.label_dictionary)
        if missing:
            raise DataFormatError(
                f"eval labels {sorted(missing)} missing from the training dictionary"
            )
    config = TrainConfig(
        num_candidates=args.candidates,
        num_noises=args.noises,
        learning_rate=args.lr,
        epochs=args.epochs,
        branching=tree.branching,
        sampler=args.sampler,
        power=args.power,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    config.check_classes(dataset.num_classes)

    sink = None
    metrics_handle = None
    if args.metrics_out is not None:
        metrics_handle = open(args.metrics_out, "w", encoding="utf-8")

        def sink(record: dict) -> None:
            metrics_handle.write(json.dumps(record) + "\n")
            metrics_handle.flush()

    try:
        model = train_beam_tree(
            dataset, tree, config, eval_dataset=eval_dataset, metrics_sink=sink
        )
    finally:
        if metrics_handle is not None:
            metrics_handle.close()
    from dataclasses import asdict

    save_model(model, args.model_out, seed=args.seed, config=asdict(config))
    print(json.dumps({"model": args.model_out, "epochs": args.epochs}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    model, header = load_model(args.model)
    dataset = load_libsvm(args.data, num_features=model.num_features)
    reverse = {raw: dense for raw, dense in model.label_dictionary.items()}
    missing = set(dataset.label_dictionary) - set(reverse)
    if missing:
        raise DataFormatError(f"labels {sorted(missing)} missing from the model dictionary")
    # Remap the evaluation labels through the model's dictionary so ids match.
    remap = {
        dense: reverse[raw] for raw, dense in dataset.label_dictionary.items()
    }
    from .data import Dataset, Example

    examples = [
        Example(ex.indices, ex.values, remap[ex.label]) for ex in dataset.examples
    ]
    dataset = Dataset.build(
        examples, model.num_classes, model.num_features, dict(model.label_dictionary)
    )
    accuracy = topk_accuracy(model, dataset, args.top)
    config = header.get("config") or {}
    num_candidates = config.get("num_candidates", args.top)
    report = {
        "examples": len(dataset),
        "top_k_accuracy": {str(k): v for k, v in accuracy.items()},
        "coverage_num_candidates": num_candidates,
        "coverage": coverage_probability(model, dataset, num_candidates),
    }
    print(json.dumps(report))
    return EXIT_OK


def _cmd_predict(args) -> int:
    model, _ = load_model(args.model)
    with open(args.input, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            idx, val = _load_features_line(line, lineno, model.num_features)
            classes = predict_top_j(model, (idx, val), args.top)
            raw = model.label_dictionary
            inverse = {dense: raw_label for raw_label, dense in raw.items()}
            print(" ".join(str(inverse[c]) for c in classes))
    return EXIT_OK


def _cmd_verify(args) -> int:
    if args.check == "gradcheck":
        report = gradient_check(args.instances, args.seed)
        report["tolerance"] = args.tolerance
        report["passed"] = report["max"] < args.tolerance
        print(json.dumps(report))
        return EXIT_OK if report["passed"] else EXIT_VERIFY

    if args.check == "consistency":
        n_grid = [int(tok) for tok in args.n_grid.split(",")]
        per_seed = []
        decreasing = 0
        for seed in range(args.seeds):
            spec = SyntheticSpec.random(8, 5, n_grid[-1], (seed, 7))
            config = TrainConfig(
                num_candidates=3,
                num_noises=2,
                learning_rate=0.25,
                epochs=8,
                seed=seed,
                lr_decay="inv_sqrt",
            )
            curve = consistency_experiment(spec, config, n_grid)
            mses = [mse for _, mse in curve]
            per_seed.append({"seed": seed, "curve": curve})
            if all(a > b for a, b in zip(mses, mses[1:])):
                decreasing += 1
        finals = [entry["curve"][-1][1] for entry in per_seed]
        report = {
            "per_seed": per_seed,
            "decreasing_seeds": decreasing,
            "seeds": args.seeds,
            "final_mse_median": float(np.median(finals)),
            "passed": decreasing >= args.seeds - 1 and max(finals) < args.final_mse,
        }
        print(json.dumps(report))
        return EXIT_OK if report["passed"] else EXIT_VERIFY

    if args.check == "variance":
        psd_violation = 0.0
        for i in range(100):
            inputs = random_variance_inputs(int(3 + i % 8), (args.seed, i))
            eigvals = np.linalg.eigvalsh(variance_matrix_M(inputs))
            psd_violation = min(psd_violation, float(eigvals.min()))
        spec = SyntheticSpec.random(3, 2, args.n, (args.seed, 11), scale=0.8)
        report_mc = estimator_variance_mc(
            spec, (0,), {1: 1.0}, args.n, args.reps, (args.seed, 13)
        )
        report = {
            "min_eigenvalue": psd_violation,
            "diag_rel_err": report_mc["diag_rel_err"],
            "trace_cane": report_mc["trace_cane"],
            "trace_mle": report_mc["trace_mle"],
            "reps": args.reps,
            "n": args.n,
            "passed": bool(
                psd_violation >= -1e-10
                and report_mc["diag_rel_err"] <= args.tolerance
                and report_mc["trace_cane"] >= report_mc["trace_mle"] - 1e-9
            ),
        }
        print(json.dumps(report))
        return EXIT_OK if report["passed"] else EXIT_VERIFY

    if args.check == "corollary1":
        candidates = (0, 1)
        noise = [2, 3]
        gaps = [
            corollary1_limit_check(
                6, candidates, {2: 0.5, 3: 0.5}, args.eps, (args.seed, i)
            )
            for i in range(20)
        ]
        eps_grid = (0.3, 0.1, 0.01, 0.001)
        trend = corollary1_trend(6, candidates, eps_grid, draws=20, seed=args.seed)
        monotone = bool(all(a >= b - 1e-12 for a, b in zip(trend, trend[1:])))
        report = {
            "eps": args.eps,
            "max_gap": float(max(gaps)),
            "trend_eps": list(eps_grid),
            "trend_gap": [float(g) for g in trend],
            "monotone": monotone,
            "passed": bool(max(gaps) <= args.tolerance and monotone),
        }
        print(json.dumps(report))
        return EXIT_OK if report["passed"] else EXIT_VERIFY

    raise _UsageError(f"unknown verify subcommand {args.check!r}")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "build-tree": _cmd_build_tree,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "predict": _cmd_predict,
        "verify": _cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ModelFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
