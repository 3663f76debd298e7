"""Command-line interface.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SyntheticSpec,
    gen_synthetic,
    load_embeddings,
    make_queues,
    queue_update,
    save_embeddings,
)
from .exceptions import ConfigError, DataError, NumericError
from .knn import MODES, KnnParams, knn_distances_batch, resolve_threads
from .metrics import ID, OOD, evaluate, id_accuracy, knn_score, npos_score, read_scores, write_scores
from .model import load_model, save_model
from .synth import synthesize
from .trainer import TrainConfig, format_config, parse_config, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
HELP_WIDTH = 80


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH)


def _data_file(directory, stem):
    for ext in (".bin", ".csv"):
        path = Path(directory) / f"{stem}{ext}"
        if path.exists():
            return path
    raise DataError(f"no {stem}.bin or {stem}.csv in {directory}")


def _read_config(path):
    if path is None:
        return TrainConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _report(args, extra=None):
    """Print every resolved option to stderr."""
    lines = [f"# npos {args.command}"]
    for key, value in sorted(vars(args).items()):
        if key not in ("command", "func"):
            lines.append(f"{key} = {value}")
    if extra:
        lines.append("# resolved training configuration")
        lines.append(extra.rstrip("\n"))
    print("\n".join(lines), file=sys.stderr)


# -- subcommands -----------------------------------------------------------------

def cmd_gen(args):
    spec = SyntheticSpec(kind=args.kind, n_per_class=args.n, d=args.d, n_classes=args.classes,
                         ood_kind=args.ood_kind, noise=args.noise, seed=args.seed)
    _report(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if args.format == "csv" else ".bin"
    for name, es in zip(("id_train", "id_test", "ood_test"), gen_synthetic(spec)):
        save_embeddings(es, out / f"{name}{ext}", args.format)
    return EXIT_OK


def cmd_train(args):
    cfg = _read_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    _report(args, format_config(cfg))
    data = load_embeddings(_data_file(args.data, "id_train"))
    if data.labels is None:
        raise DataError("training data carries no labels")
    model, history = train(data, cfg=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.bin")
    (out / "history.csv").write_text(history.to_csv())
    (out / "config.txt").write_text(format_config(cfg))
    return EXIT_OK


def cmd_synth(args):
    cfg = _read_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    _report(args, format_config(cfg))
    model = load_model(args.model)
    data = load_embeddings(_data_file(args.data, "id_train"))
    if data.labels is None:
        raise DataError("synthesis needs labeled ID data")
    queues = make_queues(model.n_classes, cfg.queue_capacity, model.embed_dim)
    queue_update(queues, model.embed(data.data.astype(np.float64)), data.labels)
    batch = synthesize(queues, cfg.synthesis, seed=cfg.seed, step=0)
    d = model.embed_dim
    with open(args.out, "w") as fh:
        fh.write(",".join([f"dim{j}" for j in range(d)] + ["source_class", "knn_dist"]) + "\n")
        for v, c, dist in zip(batch.vectors, batch.source_class, batch.knn_dist):
            fh.write(",".join([f"{x:.17g}" for x in v] + [str(int(c)), f"{dist:.17g}"]) + "\n")
    print(f"{len(batch)} outliers written to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_score(args):
    if args.id is None and args.ood is None:
        raise UsageError("score: give at least one of --id / --ood")
    _report(args)
    model = load_model(args.model)
    train_z = None
    if args.method == "knn":
        if args.train is None:
            raise UsageError("score: --method knn requires --train")
        train_z = model.embed(load_embeddings(args.train).data.astype(np.float64))

    def scores(path):
        if path is None:
            return []
        X = load_embeddings(path).data.astype(np.float64)
        if args.method == "knn":
            return knn_score(model.embed(X), train_z, args.k, threads=args.threads)
        return npos_score(model, model.encode(X), tau=args.tau)

    write_scores(args.out, scores(args.id), scores(args.ood))
    return EXIT_OK


def cmd_eval(args):
    _report(args)
    if args.scores is not None:
        s, lab = read_scores(args.scores)
        id_s, ood_s = s[lab == ID], s[lab == OOD]
    elif args.id_scores is not None and args.ood_scores is not None:
        id_s, ood_s = read_scores(args.id_scores)[0], read_scores(args.ood_scores)[0]
    else:
        raise UsageError("eval: give --scores or both --id-scores and --ood-scores")
    acc = None
    if args.model is not None and args.id_test is not None:
        test = load_embeddings(args.id_test)
        if test.labels is None:
            raise DataError("--id-test carries no labels")
        acc = id_accuracy(load_model(args.model), test.data.astype(np.float64), test.labels)
    report = evaluate(id_s, ood_s, tpr=args.tpr, id_acc=acc)
    text = report.to_csv()
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_knn(args):
    _report(args)
    ref = load_embeddings(args.ref)
    queries = None if args.queries is None else load_embeddings(args.queries)
    params = KnnParams(args.k, args.mode, args.exclude_self)
    q_labels = None if queries is None else queries.labels
    d = knn_distances_batch(None if queries is None else queries.data, ref, params,
                            query_labels=q_labels, threads=args.threads)
    lines = ["knn_dist"] + [f"{x:.17g}" for x in d]
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_gradcheck(args):
    from .checks import run_gradchecks

    _report(args)
    results = run_gradchecks(seed=args.seed, epsilon=args.epsilon)
    worst = 0.0
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
        worst = max(worst, err)
    if worst > args.tol:
        print(f"gradient check failed: {worst:.3e} > {args.tol:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _common(p):
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $NPOS_THREADS or 1); output does not depend on it")


def build_parser():
    parser = _Parser(prog="npos", description="Non-parametric outlier synthesis toolkit.",
                     formatter_class=_formatter)
    parser.add_argument("--version", action="version", version=f"npos {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic ID/OOD dataset", formatter_class=_formatter)
    p.add_argument("--kind", choices=("gaussian-mixture", "two-moons", "rings"), default="gaussian-mixture")
    p.add_argument("--classes", type=int, default=3, help="number of ID classes")
    p.add_argument("--n", type=int, default=500, help="points per class")
    p.add_argument("--d", type=int, default=2, help="dimension")
    p.add_argument("--ood-kind", choices=("ring", "uniform-shell", "shifted-mixture"), default="ring")
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model", formatter_class=_formatter)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--data", required=True, help="directory holding id_train.bin")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="dump synthesized outliers as CSV", formatter_class=_formatter)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="directory holding id_train.bin")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", required=True, help="output CSV")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("score", help="score embedding files", formatter_class=_formatter)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--id", help="ID embedding file")
    p.add_argument("--ood", help="OOD embedding file")
    p.add_argument("--method", choices=("npos", "knn"), default="npos",
                   help="max softmax over prototypes, or negative k-NN distance")
    p.add_argument("--train", help="training embedding file (knn method)")
    p.add_argument("--k", type=int, default=50, help="neighbours for the knn method")
    p.add_argument("--tau", type=float, default=None, help="test-time temperature (default: model's)")
    p.add_argument("--out", required=True, help="output scores CSV")
    _common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute FPR95, AUROC and AUPR", formatter_class=_formatter)
    p.add_argument("--scores", help="combined score,label CSV")
    p.add_argument("--id-scores", help="CSV of ID scores")
    p.add_argument("--ood-scores", help="CSV of OOD scores")
    p.add_argument("--tpr", type=float, default=0.95)
    p.add_argument("--model", help="model for ID accuracy")
    p.add_argument("--id-test", help="labeled ID test file for ID accuracy")
    p.add_argument("--out", help="metrics CSV (default: stdout)")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("knn", help="k-NN distances", formatter_class=_formatter)
    p.add_argument("--ref", required=True, help="reference embedding file")
    p.add_argument("--queries", help="query embedding file (default: the reference rows)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", choices=MODES, default="class-agnostic")
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--out", help="output CSV (default: stdout)")
    _common(p)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("gradcheck", help="check analytic gradients", formatter_class=_formatter)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    _common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    saved = os.environ.get("NPOS_THREADS")
    try:
        args = parser.parse_args(argv)
        if args.threads is not None:
            # synthesis inside training reads the worker count from the environment
            os.environ["NPOS_THREADS"] = str(resolve_threads(args.threads))
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return exc.code or EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if saved is None:
            os.environ.pop("NPOS_THREADS", None)
        else:
            os.environ["NPOS_THREADS"] = saved


if __name__ == "__main__":
    sys.exit(main())
