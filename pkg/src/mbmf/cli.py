"""Command-line entry point: ``mbmf <command> [flags]``.

Exit status is 0 on success, 1 when a command fails at run time (bad data,
divergence, I/O) and 2 for usage errors. ``MBMF_LOG`` sets the log level
(``DEBUG``, ``INFO``, ``WARNING``...); logs go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import train_mf, train_nmf
from .data import (
    DataError,
    SparseObservations,
    load_triplets,
    make_validation_folds,
    reindex,
    save_triplets,
    split_historical_present,
    training_view,
    write_folds,
)
from .evaluation import (
    EvalReport,
    evaluate,
    generate_synthetic,
    standard_algorithms,
    variance_experiment,
    write_eval_csv,
    write_variance_csv,
)
from .magnitudes import POLICIES, bounds_type3, prepare, read_magnitudes, shift_nonnegative, write_magnitudes
from .optimizer import CENTERED, NONNEGATIVE, DivergenceError, TrainConfig, predict, predict_raw, train
from .persistence import ModelFileError, load_model, save_model
from .seeding import rng_stream
from .spherical import MagnitudePair

_logger = logging.getLogger("mbmf")

VARIANTS = {"c": CENTERED, "n": NONNEGATIVE}
ALGORITHMS = ("mbmf-n", "mbmf-c", "mf", "nmf")


class UsageError(Exception):
    pass


def _k_list(text):
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"K list must be comma-separated integers, got {text!r}") from None
    if not ks:
        raise UsageError("K list is empty")
    return ks


def _magnitude_source(text):
    if text in ("type1", "historical"):
        return text, None
    if text.startswith("file:") and len(text) > 5:
        return "external", text[5:]
    raise UsageError(f"--magnitudes must be type1, historical or file:<path>, got {text!r}")


def _check_k(k):
    if k < 2:
        raise UsageError(
            f"--k {k} is not allowed: a magnitude-bounded factor needs at least two "
            f"coordinates (one angle), so K must be >= 2"
        )


def _add_data_flags(p):
    p.add_argument("--input", required=True, help="triplet file user,item,value")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--header", action="store_true", help="input has a header line")


def _add_training_flags(p):
    p.add_argument(
        "--magnitudes", default="type1",
        help="type1 | historical | file:<prefix> (reads <prefix>.rows and <prefix>.cols)",
    )
    p.add_argument("--range", nargs=2, type=float, metavar=("MIN", "MAX"), help="declared value range")
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--policy", choices=POLICIES, default="raise_magnitude")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1, help="initial step for both angle matrices")


def build_parser():
    parser = argparse.ArgumentParser(prog="mbmf", description="Magnitude-bounded matrix factorisation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and write it to a file")
    _add_data_flags(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS), default="n")
    _add_training_flags(p)
    p.add_argument("--history", help="historical triplets (default: split them off --input)")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--trace", help="trace CSV (default: <out>.trace.csv)")

    p = sub.add_parser("evaluate", help="split, fold and score over a list of K")
    _add_data_flags(p)
    p.add_argument("--k-list", default="10,20,50")
    p.add_argument("--algorithms", default="mbmf-n", help=f"comma-separated subset of {','.join(ALGORITHMS)}")
    _add_training_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--independent-folds", action="store_true", help="draw each fold on its own (may overlap)")
    p.add_argument("--f1-average", choices=("micro", "macro"), default="micro")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--folds-out", help="write the fold manifest here")
    p.add_argument("--out", required=True, help="results CSV")

    p = sub.add_parser("predict", help="predict user,item pairs with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True, help="file of user,item lines")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--header", action="store_true", help="pass the first line through as a header")
    p.add_argument("--out", help="output CSV (default: stdout)")

    p = sub.add_parser("variance", help="spread of predictions across random restarts")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--m", type=int, default=500)
    p.add_argument("--density", type=float, default=0.2)
    p.add_argument("--range", nargs=2, type=float, default=(0.0, 10.0), metavar=("MIN", "MAX"))
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--k-list", default=",".join(str(k) for k in range(5, 55, 5)))
    p.add_argument("--algorithms", default="mf,nmf,mbmf-n")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="write a synthetic full matrix and its observed part")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--density", type=float, default=0.2)
    p.add_argument("--range", nargs=2, type=float, default=(0.0, 10.0), metavar=("MIN", "MAX"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", help="triplets of every cell")
    p.add_argument("--observed", required=True, help="triplets of the kept cells")

    p = sub.add_parser("magnitudes", help="compute magnitudes and write label,magnitude files")
    _add_data_flags(p)
    p.add_argument("--variant", choices=sorted(VARIANTS), default="n")
    p.add_argument("--source", choices=("type1", "historical"), default="historical")
    p.add_argument("--history", help="historical triplets (default: split them off --input)")
    p.add_argument("--range", nargs=2, type=float, metavar=("MIN", "MAX"))
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--policy", choices=POLICIES, default="raise_magnitude")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="prefix; writes <out>.rows and <out>.cols")
    return parser


def _config(args, k, variant):
    return TrainConfig(
        k=k,
        max_iters=args.max_iters,
        tol=args.tol,
        patience=args.patience,
        lr_phi=args.lr,
        lr_theta=args.lr,
        seed=args.seed,
        variant=variant,
    )


def _bounds(args):
    return (None, None) if args.range is None else tuple(args.range)


def _history_and_present(args, data):
    """History aligned to ``data`` plus the part to train on."""
    if args.history:
        hist = load_triplets(args.history, args.delimiter, args.header)
        return reindex(hist, data.row_labels, data.col_labels), data
    plan = split_historical_present(data, args.seed)
    _logger.info("no --history given: split %d entries into history and present", data.nnz)
    return plan.historical, plan.present


def cmd_train(args):
    _check_k(args.k)
    source, mag_path = _magnitude_source(args.magnitudes)
    data = load_triplets(args.input, args.delimiter, args.header)
    r_min, r_max = _bounds(args)
    history, external = None, None
    if source == "historical":
        history, data = _history_and_present(args, data)
    elif source == "external":
        external = MagnitudePair(
            read_magnitudes(mag_path + ".rows", data.row_labels),
            read_magnitudes(mag_path + ".cols", data.col_labels),
        )
    variant = VARIANTS[args.variant]
    train_data, mags, record, found = prepare(
        data, variant, source, r_min, r_max, history, args.rho, args.policy, external
    )
    if found:
        _logger.warning("%d observation(s) contradicted their magnitudes (policy %s)", len(found), args.policy)
    model, trace = train(train_data, mags, _config(args, args.k, variant), preprocess=record)
    model.row_labels, model.col_labels = data.row_labels, data.col_labels
    save_model(model, args.out)
    trace.to_csv(args.trace or args.out + ".trace.csv")
    print(f"objective {trace.final_objective!r} iterations {trace.iterations} stop {trace.reason}")
    return 0


@dataclass(frozen=True, eq=False)
class _EvalContext:
    present: SparseObservations
    history: SparseObservations
    folds: tuple
    args: argparse.Namespace


_CTX = None


def _set_context(ctx):
    global _CTX
    _CTX = ctx


def _fit_predict(ctx, algorithm, k, train_data, pairs):
    args = ctx.args
    r_min, r_max = _bounds(args)
    if algorithm in ("mbmf-n", "mbmf-c"):
        source, mag_path = _magnitude_source(args.magnitudes)
        if source == "external":
            raise UsageError("evaluate supports type1 and historical magnitudes only")
        variant = NONNEGATIVE if algorithm == "mbmf-n" else CENTERED
        data, mags, record, _ = prepare(
            train_data, variant, source, r_min, r_max, ctx.history, args.rho, args.policy
        )
        model, _ = train(data, mags, _config(args, k, variant), preprocess=record)
        return predict(model, pairs)
    cfg = _config(args, max(k, 2), NONNEGATIVE)
    if algorithm == "mf":
        model, _ = train_mf(train_data, k, cfg)
        return predict_raw(model, pairs)
    lo = r_min if r_min is not None else bounds_type3(train_data)[0]
    shifted, record = shift_nonnegative(train_data, lo)
    model, _ = train_nmf(shifted, k, cfg)
    return record.restore(predict_raw(model, pairs), pairs[:, 0], pairs[:, 1])


def _eval_task(task):
    algorithm, k, f = task
    ctx = _CTX
    held = ctx.present.subset(ctx.folds[f])
    pairs = np.column_stack([held.rows, held.cols])
    preds = _fit_predict(ctx, algorithm, k, training_view(ctx.present, ctx.folds[f]), pairs)
    return evaluate(held.rows, held.values, preds, ctx.args.f1_average)


def cmd_evaluate(args):
    ks = _k_list(args.k_list)
    for k in ks:
        _check_k(k)
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    bad = [a for a in algorithms if a not in ALGORITHMS]
    if bad or not algorithms:
        raise UsageError(f"unknown algorithm(s) {bad}; choose from {','.join(ALGORITHMS)}")
    source, _ = _magnitude_source(args.magnitudes)
    if source == "external":
        raise UsageError("evaluate supports --magnitudes type1 or historical")
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")

    data = load_triplets(args.input, args.delimiter, args.header)
    plan = split_historical_present(data, args.seed)
    folds = make_validation_folds(
        plan.present, args.folds, args.fraction, args.seed, disjoint=not args.independent_folds
    )
    if args.folds_out:
        write_folds(args.folds_out, folds)
    ctx = _EvalContext(plan.present, plan.historical, tuple(folds), args)
    tasks = [(a, k, f) for a in algorithms for k in ks for f in range(len(folds))]
    _set_context(ctx)
    if args.jobs == 1:
        reports = [_eval_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(args.jobs, initializer=_set_context, initargs=(ctx,)) as pool:
            reports = list(pool.map(_eval_task, tasks))

    rows = [(a, k, f, rep) for (a, k, f), rep in zip(tasks, reports)]
    for a in algorithms:
        for k in ks:
            group = [rep for (a2, k2, _), rep in zip(tasks, reports) if a2 == a and k2 == k]
            rows.append((a, k, "avg", EvalReport(
                float(np.mean([r.rmse for r in group])),
                float(np.mean([r.mae for r in group])),
                float(np.mean([r.f1 for r in group])),
                sum(r.n_eval_entries for r in group),
            )))
    write_eval_csv(args.out, rows)
    for a, k, fold, rep in rows:
        if fold == "avg":
            print(f"{a} K={k} rmse {rep.rmse:.6g} mae {rep.mae:.6g} f1 {rep.f1:.6g}")
    return 0


def cmd_predict(args):
    model = load_model(args.model)
    rindex = {lab: i for i, lab in enumerate(model.row_labels)}
    cindex = {lab: j for j, lab in enumerate(model.col_labels)}
    with open(args.pairs, encoding="utf-8") as fh:
        lines = [line.rstrip("\r\n") for line in fh]
    header = None
    if args.header and lines:
        header, lines = lines[0], lines[1:]
    parsed, known = [], []
    for lineno, line in enumerate(lines, start=2 if header is not None else 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [t.strip() for t in line.split(args.delimiter)]
        if len(parts) < 2:
            raise DataError(f"{args.pairs}:{lineno}: expected user{args.delimiter}item")
        u, it = parts[0], parts[1]
        parsed.append((u, it))
        if u in rindex and it in cindex:
            known.append((rindex[u], cindex[it]))
    pairs = np.array(known, dtype=np.int64).reshape(-1, 2)
    values = iter(predict(model, pairs) if model.preprocess is not None else predict_raw(model, pairs))

    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        if header is not None:
            out.write(header + "\n")
        for u, it in parsed:
            if u not in rindex:
                out.write(f"{u},{it},ERROR unknown user\n")
            elif it not in cindex:
                out.write(f"{u},{it},ERROR unknown item\n")
            else:
                out.write(f"{u},{it},{float(next(values))!r}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_variance(args):
    ks = _k_list(args.k_list)
    available = standard_algorithms(tuple(args.range), max_iters=args.max_iters, tol=args.tol)
    names = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    bad = [a for a in names if a not in available]
    if bad or not names:
        raise UsageError(f"unknown algorithm(s) {bad}; choose from {','.join(available)}")
    for k in ks:
        if k < 1 or (k < 2 and any(a.startswith("mbmf") for a in names)):
            raise UsageError(f"K={k} is too small for the chosen algorithms")
    rows = []
    for k in ks:
        data_seed = int(rng_stream(args.seed, "variance-data", k).integers(2**31))
        data = generate_synthetic(args.n, args.m, tuple(args.range), args.density, data_seed)
        reports = variance_experiment(
            {a: available[a] for a in names}, args.n, args.m, args.density,
            args.repetitions, k, args.seed, tuple(args.range), data=data,
        )
        for a in names:
            rows.append((a, k, reports[a]))
            print(f"{a} K={k} ave_sigma {reports[a].ave_sigma:.6g} max_sigma {reports[a].max_sigma:.6g}")
    write_variance_csv(args.out, rows)
    return 0


def cmd_synth(args):
    full, observed = generate_synthetic(args.n, args.m, tuple(args.range), args.density, args.seed)
    save_triplets(observed, args.observed)
    if args.full:
        save_triplets(full, args.full)
    print(f"observed {observed.nnz} of {args.n * args.m} cells")
    return 0


def cmd_magnitudes(args):
    data = load_triplets(args.input, args.delimiter, args.header)
    history = None
    if args.source == "historical":
        history, data = _history_and_present(args, data)
    r_min, r_max = _bounds(args)
    _, mags, _, found = prepare(
        data, VARIANTS[args.variant], args.source, r_min, r_max, history, args.rho, args.policy
    )
    if found:
        _logger.warning("%d observation(s) contradicted their magnitudes (policy %s)", len(found), args.policy)
    write_magnitudes(args.out + ".rows", data.row_labels, mags.r_w)
    write_magnitudes(args.out + ".cols", data.col_labels, mags.r_h)
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "variance": cmd_variance,
    "synth": cmd_synth,
    "magnitudes": cmd_magnitudes,
}


def _configure_logging():
    level = os.environ.get("MBMF_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None):
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mbmf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ModelFileError, DivergenceError, ValueError, OSError) as exc:
        print(f"mbmf {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
