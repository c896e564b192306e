"""Command-line surface: data generation, training, evaluation, analysis,
and gradient self-verification.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .data import Dataset, gen_gaussian_mixture, load_csv, save_csv
from .errors import CheckpointFormatError, ConfigError, DataFormatError, DivergenceError
from .evaluate import (
    ReprBank,
    build_bank,
    diversity_report,
    extract_representations,
    fewshot_split,
    knn_predict_batch,
    linear_probe,
)
from .gradcheck import gradient_suite
from .losses import SCHEME_TAGS
from .model import load_checkpoint
from .train import TrainConfig, fit

_EXIT_OK = 0
_EXIT_CHECK_FAILED = 1
_EXIT_USAGE = 2
_EXIT_DIVERGENCE = 3

_EVAL_SEEDS = (0, 1, 2)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensd",
        description="Weighted-ensemble self-distillation at desk scale.",
        epilog="Set ENSD_THREADS to cap BLAS worker threads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labelled gaussian-mixture CSV")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--sep", type=float, default=4.0, help="class-mean sphere radius")
    p.add_argument("--std", type=float, default=1.0, help="within-class std")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scheme", default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--renorm", choices=("none", "center", "sinkhorn"), default=None)
    p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--protocol", choices=("knn", "linear", "fewshot"), default="fewshot")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--out", default=None, help="metrics CSV path")

    p = sub.add_parser("analyze", help="head-pair code-diversity report")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--probe-size", type=int, default=4096)
    p.add_argument("--out", default=None, help="diversity CSV path")

    p = sub.add_parser("grad-check", help="finite-difference check of every scheme")
    p.add_argument("--scheme", action="append", choices=SCHEME_TAGS, default=None,
                   help="restrict to one scheme (repeatable)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_gen_data(args) -> int:
    ds = gen_gaussian_mixture(
        seed=args.seed, classes=args.classes, dim=args.dim,
        samples=args.samples, class_sep=args.sep, within_std=args.std,
    )
    save_csv(ds, args.out)
    print(f"wrote {args.samples} samples ({args.classes} classes, dim {args.dim}) to {args.out}")
    return _EXIT_OK


_CONFIG_EXTRA_KEYS = {"data"}


def load_run_config(path) -> tuple[TrainConfig, str]:
    """Parse a JSON run configuration; unknown keys are rejected."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    allowed = TrainConfig.field_names() | _CONFIG_EXTRA_KEYS
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    if "data" not in doc:
        raise ConfigError(f"{path}: missing required key 'data' (dataset CSV path)")
    data_path = doc.pop("data")
    for key in ("encoder_hidden", "head_hidden"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return TrainConfig(**doc), data_path


def cmd_train(args) -> int:
    cfg, data_path = load_run_config(args.config)
    for name in ("seed", "scheme", "heads", "gamma", "renorm"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.out is not None:
        cfg.out_dir = args.out
    if cfg.out_dir is None:
        raise ConfigError("no output directory: set 'out_dir' in the config or pass --out")
    cfg.validate()
    dataset = load_csv(data_path)
    if dataset.dim != cfg.input_dim:
        cfg.input_dim = dataset.dim
        cfg.validate()
    result = fit(cfg, dataset)
    print(f"trained {result.steps} steps; checkpoint: {result.checkpoint_path}")
    print(f"curves: {result.curves_path}")
    return _EXIT_OK


def _eval_rows(args, student, teacher, dataset) -> list[tuple[str, str, float, str, int]]:
    rows = []
    for seed in _EVAL_SEEDS:
        if args.protocol == "fewshot":
            train_ds, test_ds = fewshot_split(dataset, shots=args.shots, seed=seed)
            acc, lam = linear_probe(build_bank(teacher, train_ds), build_bank(teacher, test_ds),
                                    seed=seed)
            rows.append((f"{args.shots}-shot", "linear_probe_accuracy", acc, f"{lam:g}", seed))
        else:
            n = len(dataset)
            order = np.random.default_rng(seed).permutation(n)
            cut = max(1, int(0.8 * n))
            tr, te = order[:cut], order[cut:]
            labels = dataset.labels_for_eval()
            bank = ReprBank(z=extract_representations(teacher.params, dataset.features[tr]),
                            labels=labels[tr])
            test_z = extract_representations(teacher.params, dataset.features[te])
            if args.protocol == "knn":
                pred = knn_predict_batch(bank, test_z, k=args.k)
                acc = float(np.mean(pred == labels[te]))
                rows.append(("train80", "knn_accuracy", acc, str(args.k), seed))
            else:
                acc, lam = linear_probe(bank, ReprBank(z=test_z, labels=labels[te]), seed=seed)
                rows.append(("train80", "linear_probe_accuracy", acc, f"{lam:g}", seed))
    return rows


def cmd_eval(args) -> int:
    student, teacher, _ = load_checkpoint(args.checkpoint)
    dataset = load_csv(args.dataset)
    rows = _eval_rows(args, student, teacher, dataset)
    accs = np.array([r[2] for r in rows])
    print(f"{'split':12s} {'metric':28s} {'value':>8s} {'lambda_or_k':>12s} {'seed':>4s}")
    for split, metric, value, lam_k, seed in rows:
        print(f"{split:12s} {metric:28s} {value:8.4f} {lam_k:>12s} {seed:4d}")
    print(f"mean accuracy: {accs.mean():.4f} +/- {accs.std():.4f} over seeds {_EVAL_SEEDS}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["split", "metric", "value", "lambda_or_k", "seed"])
            for split, metric, value, lam_k, seed in rows:
                writer.writerow([split, metric, format(value, ".17g"), lam_k, seed])
        print(f"metrics CSV: {args.out}")
    return _EXIT_OK


def cmd_analyze(args) -> int:
    student, teacher, header = load_checkpoint(args.checkpoint)
    dataset = load_csv(args.dataset)
    out_path = args.out or "diversity.csv"
    m = teacher.params.dims.heads
    rows: list[tuple[int, int, int, float]] = []
    if m < 2:
        print("warning: single-head checkpoint, nothing to align; writing empty report")
    else:
        n = min(args.probe_size, len(dataset))
        idx = np.random.default_rng(0).choice(len(dataset), size=n, replace=False)
        report = diversity_report(teacher, dataset.features[idx])
        for pair in report:
            for rank, sim in enumerate(pair.diagonal):
                rows.append((pair.head_i, pair.head_j, rank, float(sim)))
        means = [f"({p.head_i},{p.head_j})={p.mean_similarity:.4f}" for p in report]
        print(f"mean aligned similarity per pair: {'  '.join(means)}")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["head_i", "head_j", "rank", "similarity"])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], format(row[3], ".17g")])
    print(f"diversity CSV: {out_path}")
    return _EXIT_OK


def cmd_grad_check(args) -> int:
    tags = tuple(args.scheme) if args.scheme else SCHEME_TAGS
    results = gradient_suite(tags, seed=args.seed)
    failed = False
    for tag, err in results.items():
        status = "pass" if err < args.tolerance else "FAIL"
        if status == "FAIL":
            failed = True
        print(f"{tag:14s} max rel err {err:.3e}  {status}")
    return _EXIT_CHECK_FAILED if failed else _EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "analyze": cmd_analyze,
        "grad-check": cmd_grad_check,
    }
    try:
        return handlers[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_DIVERGENCE
    except (ConfigError, DataFormatError, CheckpointFormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
