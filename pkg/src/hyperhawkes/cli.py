"""Command-line entry point: ``hyperhawkes <verb> [flags]``.

Verbs: simulate, split, train, eval, cl-run, predict.  Exit codes are 0 on
success, 2 for usage errors, 3 for invalid data and 4 for numerical
divergence.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _beta_list(text):
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("beta values must be non-negative")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperhawkes", description="Descriptor-conditioned neural Hawkes processes with hypernetworks.", epilog="exit codes: 0 success, 2 usage, 3 invalid data, 4 numerical divergence")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        p.add_argument("--threads", type=_positive_int, default=1, help="BLAS/OpenMP threads (default 1)")

    p = sub.add_parser("simulate", help="write a synthetic descriptor-conditioned Hawkes corpus")
    p.add_argument("--out", required=True, help="corpus file to write; the params sidecar goes next to it")
    p.add_argument("--sequences", type=_positive_int, default=50, help="number of sequences (default 50)")
    p.add_argument("--descriptor-dim", type=_positive_int, default=3, help="descriptor dimension D (default 3)")
    p.add_argument("--window", type=_positive_float, default=10.0, help="observation window length (default 10)")
    p.add_argument("--spread", default="1.5,0.2,0.2",
                   help="log-scale spread of mu, alpha, decay across descriptors (default 1.5,0.2,0.2)")
    p.add_argument("--drift", action="store_true",
                   help="order sequences along one descriptor direction (continual-learning stream)")
    common(p)

    p = sub.add_parser("split", help="partition a corpus for one experimental setup")
    p.add_argument("--corpus", required=True, help="corpus file")
    p.add_argument("--setup", required=True, help="zero-shot, generalized-zero-shot, standard or continual")
    p.add_argument("--out", required=True, help="split manifest to write")
    common(p)

    p = sub.add_parser("train", help="fit one model kind under the split's protocol")
    p.add_argument("--corpus", required=True, help="corpus file")
    p.add_argument("--split", required=True, help="split manifest")
    p.add_argument("--config", help="key=value training config (defaults otherwise)")
    p.add_argument("--variant", help="fnhp, fnhp-descriptor, hyper-fnn or hyper-fnn-rnn (overrides the config)")
    p.add_argument("--epochs", type=_positive_int, help="epoch budget (overrides the config)")
    p.add_argument("--out", required=True, help="output directory for checkpoint.txt and train_log.csv")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--threads", type=_positive_int, default=1, help="BLAS/OpenMP threads (default 1)")

    p = sub.add_parser("eval", help="evaluate checkpoints on the split's test events")
    p.add_argument("--corpus", required=True, help="corpus file")
    p.add_argument("--split", required=True, help="split manifest")
    p.add_argument("--checkpoint", required=True, nargs="+", help="one or more checkpoints")
    p.add_argument("--setup", help="expected setup; must match the split")
    p.add_argument("--out", required=True, help="output directory for headline.csv and per_sequence.csv")
    p.add_argument("--tol", type=_positive_float, default=1e-8, help="bisection tolerance (default 1e-8)")
    common(p)

    p = sub.add_parser("cl-run", help="continual learning over the corpus order for several beta values")
    p.add_argument("--corpus", required=True, help="corpus file; line order is the stream order")
    p.add_argument("--config", help="key=value training config")
    p.add_argument("--variant", help="hyper-fnn or hyper-fnn-rnn (overrides the config)")
    p.add_argument("--beta", type=_beta_list, required=True, help="comma-separated beta values, e.g. 0,0.5")
    p.add_argument("--epochs", type=_positive_int, help="epochs per stage (overrides the config)")
    p.add_argument("--out", required=True, help="output directory for matrices, curves and plots")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--threads", type=_positive_int, default=1, help="BLAS/OpenMP threads (default 1)")

    p = sub.add_parser("predict", help="median next-event time after one event of one sequence")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--corpus", required=True, help="corpus file")
    p.add_argument("--id", required=True, help="sequence id")
    p.add_argument("--index", type=int, help="event index j, 0-based (default: last event)")
    p.add_argument("--tol", type=_positive_float, default=1e-8, help="bisection tolerance (default 1e-8)")
    common(p)
    return parser


# ----------------------------------------------------------------------
# verbs
# ----------------------------------------------------------------------


def _config(args):
    from .train import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    changes = {}
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None):
        changes["epochs" if args.verb == "train" else "cl_epochs"] = args.epochs
    return cfg.replace(**changes) if changes else cfg


def cmd_simulate(args, out):
    from . import hawkes

    try:
        spread = tuple(float(x) for x in args.spread.split(","))
    except ValueError:
        raise UsageError(f"--spread expects three numbers, got {args.spread!r}") from None
    if len(spread) != 3 or any(s < 0 for s in spread):
        raise UsageError("--spread expects three non-negative numbers")
    records, truth, _ = hawkes.synthetic_corpus(
        args.sequences, args.descriptor_dim, args.window, args.seed, spread, args.drift
    )
    sidecar = hawkes.write_synthetic(args.out, records, truth)
    print(f"wrote {len(records)} sequences to {args.out} (params in {sidecar})", file=out)


def cmd_split(args, out):
    from .seqdata import load_corpus, make_split

    corpus = load_corpus(args.corpus)
    split = make_split(corpus, args.setup, args.seed)
    split.save(args.out)
    print(
        f"{split.setup.value}: {len(split.seen)} seen, {len(split.unseen_val)} unseen-val, "
        f"{len(split.unseen_test)} unseen-test -> {args.out}",
        file=out,
    )


def cmd_train(args, out):
    from . import evaluate, train
    from .seqdata import TRAIN, CorpusSplit, load_corpus

    corpus = load_corpus(args.corpus)
    split = CorpusSplit.load(args.split)
    cfg = _config(args)
    train_recs, train_roles, val, _ = evaluate.protocol_sets(corpus, split)
    train_set = train.EventSet.from_roles(train_recs, train_roles, TRAIN)
    log_ = train.TrainLog()
    model = train.new_model(cfg, train_set.descriptors.shape[1], train.time_scale_for(train_set))
    train.fit(model, train_set, val if val.n_events else None, cfg, cfg.epochs, log_)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    model.save(dest / "checkpoint.txt")
    log_.save(dest / "train_log.csv")
    print(
        f"{cfg.variant}: best epoch {model.meta['best_epoch']}, validation MNLL {model.meta['best_val']:.6f} "
        f"-> {dest / 'checkpoint.txt'}",
        file=out,
    )


def cmd_eval(args, out):
    from . import evaluate
    from .model import REPORT_NAMES, HawkesModel
    from .seqdata import CorpusSplit, Setup, load_corpus

    corpus = load_corpus(args.corpus)
    split = CorpusSplit.load(args.split)
    if args.setup is not None and Setup.parse(args.setup) is not split.setup:
        raise UsageError(f"split was made for {split.setup.value}, not {Setup.parse(args.setup).value}")
    _, _, _, test = evaluate.protocol_sets(corpus, split)
    reports = []
    for path in args.checkpoint:
        model = HawkesModel.load(path)
        _check_dim(model, test.descriptors.shape[1], path)
        m, a, per, fails = evaluate.evaluate(model, test, args.tol)
        reports.append(evaluate.MetricReport(split.setup, REPORT_NAMES[model.kind], m, a, per, fails))
        print(f"{split.setup.value} {REPORT_NAMES[model.kind]}: MNLL {m:.6f} MAE {a:.6f} failures {fails}", file=out)
    evaluate.emit_report(reports, args.out)


def cmd_cl_run(args, out):
    from . import evaluate
    from .seqdata import load_corpus

    stream = load_corpus(args.corpus)
    cfg = _config(args)
    if cfg.variant not in ("hyper-fnn", "hyper-fnn-rnn"):
        raise UsageError("cl-run needs a hypernetwork variant (hyper-fnn or hyper-fnn-rnn)")
    summary = evaluate.run_cl(stream, cfg, args.beta, include_zero=False)
    evaluate.emit_report(summary, args.out)
    for beta in sorted(summary.runs):
        run = summary.runs[beta]
        print(f"beta={beta:g}: final avg MNLL {run.curve_mnll[-1]:.6f} avg MAE {run.curve_mae[-1]:.6f}", file=out)


def cmd_predict(args, out):
    from .model import HawkesModel
    from .nhp import predict_next
    from .seqdata import CorpusError, load_corpus

    model = HawkesModel.load(args.checkpoint)
    by_id = {seq.id: (seq, desc) for seq, desc in load_corpus(args.corpus)}
    if args.id not in by_id:
        raise CorpusError(f"unknown sequence id {args.id!r}")
    seq, desc = by_id[args.id]
    _check_dim(model, desc.dim, args.checkpoint)
    j = len(seq) - 1 if args.index is None else args.index
    if not 0 <= j < len(seq):
        raise UsageError(f"--index must lie in [0, {len(seq) - 1}]")
    w_r, w_t = model.weights_for(desc.values if model.uses_descriptor else None)
    side = desc.values if model.kind == "fnhp-descriptor" else None
    print(repr(predict_next(seq, j, w_r, w_t, model.M, args.tol, side=side)), file=out)


def _check_dim(model, dim, path):
    from .seqdata import CorpusError

    if model.uses_descriptor and model.descriptor_dim != dim:
        raise CorpusError(f"{path}: checkpoint expects descriptors of dimension {model.descriptor_dim}, corpus has {dim}")


COMMANDS = {
    "simulate": cmd_simulate,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "cl-run": cmd_cl_run,
    "predict": cmd_predict,
}


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    # must precede the first numpy import to take effect
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)

    from .nhp import PredictionError
    from .seqdata import CorpusError
    from .train import ConfigError, DivergenceError

    try:
        COMMANDS[args.verb](args, out)
    except (UsageError, ConfigError) as exc:
        print(f"hyperhawkes {args.verb}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"hyperhawkes {args.verb}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PredictionError as exc:
        print(f"hyperhawkes {args.verb}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorpusError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"hyperhawkes {args.verb}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
