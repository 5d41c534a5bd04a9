"""Command-line entry point: ``capskit {train,eval,gradcheck,squash-curve,experiment}``.

Exit codes: 0 success, 1 configuration or input error, 2 a training fold
aborted on a non-finite loss, 3 a gradient check failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import data, squash, train, verify
from .errors import CapsKitError, ConfigError, FormatError, InvalidArgument

log = logging.getLogger("capskit")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_GRADCHECK = 0, 1, 2, 3

TABLE_SQUASHES = ("s1", "s2", "s3", "s4", "s5", "s10", "sinf")


def _add_train_flags(p, folds_default):
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    p.add_argument("--squash", default="s2",
                   help=f"one of {', '.join(squash.VALID_NAMES)} (default s2)")
    p.add_argument("--routing", choices=("dynamic", "self"), default="dynamic")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--preset", choices=("full", "reduced", "tiny"), default="full")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--folds", type=int, default=folds_default,
                   help="k-fold count; 1 trains on the whole training split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-size", type=int, default=None,
                   help="use only the first N training images")
    p.add_argument("--test-size", type=int, default=None)
    p.add_argument("--test-eval", choices=train.TEST_EVAL_MODES, default="every",
                   help="when to score the official test split")
    p.add_argument("--data-dir", default=os.environ.get("CAPSKIT_DATA_DIR"),
                   help="dataset root (default $CAPSKIT_DATA_DIR)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capskit", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one fold or every fold")
    _add_train_flags(p, folds_default=1)
    p.add_argument("--fold", type=int, default=None, help="train only this fold")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--stdout", action="store_true", help="also write metrics CSV to stdout")

    p = sub.add_parser("experiment", help="k-fold runs for several squash functions")
    _add_train_flags(p, folds_default=5)
    p.set_defaults(squash=",".join(TABLE_SQUASHES))
    p.add_argument("--stdout", action="store_true", help="write the summary CSV to stdout")

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--data-dir", default=os.environ.get("CAPSKIT_DATA_DIR"))
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference certification of every backward")
    p.add_argument("--only", default=None,
                   help=f"restrict to a group ({', '.join(verify.GROUPS)}) or one op")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the report CSV here")
    p.add_argument("--stdout", action="store_true", help="write the report CSV to stdout")

    p = sub.add_parser("squash-curve", help="output norm against input m-norm")
    p.add_argument("--m", default="1,2,3,4,5,10,inf", help="comma list; 'inf' for S_inf")
    p.add_argument("--max-norm", type=float, default=3.0)
    p.add_argument("--points", type=int, default=61)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--out", default=None, help="CSV path (default squash_curve.csv)")
    p.add_argument("--stdout", action="store_true")
    return parser


# ---------------------------------------------------------------------------

def _config(args, squash_name) -> train.TrainConfig:
    return train.TrainConfig(
        squash=squash_name, routing=args.routing, iterations=args.iterations, lr=args.lr,
        batch_size=args.batch_size, epochs=args.epochs, folds=args.folds, seed=args.seed,
        preset=args.preset, dataset=args.dataset, train_size=args.train_size,
        test_size=args.test_size, test_eval=args.test_eval)


def _dataset_root(data_dir, dataset):
    if not data_dir:
        raise FileNotFoundError("no data directory: pass --data-dir or set CAPSKIT_DATA_DIR")
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory {data_dir} not found")
    nested = os.path.join(data_dir, dataset)
    return nested if os.path.isdir(nested) else data_dir


def _load(dataset, data_dir):
    root = _dataset_root(data_dir, dataset)
    return data.load_dataset(dataset, root, "train"), data.load_dataset(dataset, root, "test")


def _write_config(out_dir, cfg: train.TrainConfig, **extra):
    os.makedirs(out_dir, exist_ok=True)
    doc = {"train": cfg.to_dict(), "architecture": cfg.arch().to_dict(), **extra}
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fresh(path):
    if os.path.exists(path):
        os.remove(path)


def cmd_train(args) -> int:
    cfg = _config(args, args.squash)
    resume = None
    if args.resume:
        resume = train.load_checkpoint(args.resume)
        cfg = resume.config
    out = args.out or os.path.join("runs", f"{cfg.dataset}-{cfg.squash}-{cfg.preset}-seed{cfg.seed}")
    tr, te = _load(cfg.dataset, args.data_dir)
    _write_config(out, cfg, data_dir=os.path.abspath(args.data_dir), workers=args.workers)
    metrics = os.path.join(out, "metrics.csv")
    folds = [resume.fold] if resume else [args.fold] if args.fold is not None else range(cfg.folds)
    if resume is None:
        _fresh(metrics)
    aborted = False
    for fold in folds:
        ckpt = os.path.join(out, f"checkpoint-fold{fold}.ckpt")
        records, abort = train.train_fold(cfg, tr, fold, te, metrics_path=metrics,
                                          checkpoint_path=ckpt, workers=args.workers,
                                          resume=resume)
        resume = None
        if abort is not None:
            aborted = True
            with open(os.path.join(out, f"abort-fold{fold}.json"), "w") as fh:
                json.dump(abort.__dict__, fh, indent=2)
            print(f"fold {fold} aborted: {abort.message}", file=sys.stderr)
    if args.stdout:
        with open(metrics) as fh:
            sys.stdout.write(fh.read())
    log.info("metrics written to %s", metrics)
    return EXIT_ABORT if aborted else EXIT_OK


def cmd_experiment(args) -> int:
    names = [s.strip() for s in args.squash.split(",") if s.strip()]
    configs = [_config(args, n) for n in names]          # validates every name up front
    if configs[0].folds < 2:
        raise ConfigError("experiment needs --folds >= 2")
    out = args.out or os.path.join("runs", f"experiment-{args.dataset}-{args.preset}-seed{args.seed}")
    tr, te = _load(args.dataset, args.data_dir)
    rows = []
    for cfg in configs:
        sub = os.path.join(out, cfg.squash)
        _write_config(sub, cfg, data_dir=os.path.abspath(args.data_dir), workers=args.workers)
        _fresh(os.path.join(sub, "metrics.csv"))
        summary = train.run_experiment(cfg, tr, te, out_dir=sub, workers=args.workers)
        rows.append(summary.row())
        log.info("%s", " | ".join(summary.row()))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(train.SUMMARY_HEADER)
    w.writerows(rows)
    with open(os.path.join(out, "summary.csv"), "w") as fh:
        fh.write(buf.getvalue())
    if args.stdout:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    tr, te = _load(cfg.dataset, args.data_dir)
    tr, te = train._prepare(cfg, tr, te)
    if args.split == "val":
        _, ds = train.fold_datasets(cfg, tr, ckpt.fold)
        if ds is None:
            raise ConfigError("this checkpoint was trained without a validation fold")
    else:
        ds = te
    acc, loss = train.evaluate(ckpt.params, cfg.arch(), ds, workers=args.workers)
    print(f"split={args.split} fold={ckpt.fold} epoch={ckpt.epoch} accuracy={acc:.6f} "
          f"loss={loss:.6f} n={len(ds)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        reports = verify.run_battery(args.only, args.trials, args.seed)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    width = max(len(r.op) for r in reports)
    for r in reports:
        print(f"{r.op:<{width}}  trials={r.trials}  rel={r.max_rel_err:.2e}  "
              f"abs={r.max_abs_err:.2e}  {'pass' if r.passed else 'FAIL'}", file=sys.stderr)
    text = verify.reports_csv(reports)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    if args.stdout:
        sys.stdout.write(text)
    failed = [r.op for r in reports if not r.passed]
    if failed:
        print(f"gradient check FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def squash_curve_rows(ms, max_norm=3.0, points=61, dim=8):
    """Rows ``(input_norm, m, output_norm)``; ``m`` is an int or ``math.inf``.

    Inputs lie along one fixed direction, scaled so their m-norm equals
    ``input_norm``; the output is the 2-norm of the squashed vector.
    """
    direction = np.arange(1.0, dim + 1.0)
    grid = np.round(np.linspace(0.0, max_norm, points), 12)
    rows = []
    for m in ms:
        spec = squash.SquashSpec.infinity() if m == math.inf else squash.SquashSpec.norm(m)
        unit = direction / np.linalg.norm(direction, ord=np.inf if m == math.inf else m)
        out = np.linalg.norm(squash.squash(grid[:, None] * unit, spec), axis=-1)
        rows += [(float(x), m, float(y)) for x, y in zip(grid, out)]
    return rows


def _parse_ms(text):
    ms = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok in ("inf", "sinf", "infinity"):
            ms.append(math.inf)
        elif tok.isdigit() and int(tok) >= 1:
            ms.append(int(tok))
        else:
            raise ConfigError(f"bad m value {tok!r}; use positive integers or 'inf'")
    return ms


def cmd_squash_curve(args) -> int:
    if args.points < 2 or args.max_norm <= 0 or args.dim < 1:
        raise ConfigError("need --points >= 2, --max-norm > 0 and --dim >= 1")
    rows = squash_curve_rows(_parse_ms(args.m), args.max_norm, args.points, args.dim)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["input_norm", "m", "output_norm"])
    for x, m, y in rows:
        w.writerow([repr(x), "inf" if m == math.inf else m, repr(y)])
    if args.stdout:
        sys.stdout.write(buf.getvalue())
    else:
        path = args.out or "squash_curve.csv"
        with open(path, "w") as fh:
            fh.write(buf.getvalue())
        log.info("wrote %d rows to %s", len(rows), path)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "experiment": cmd_experiment, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "squash-curve": cmd_squash_curve}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:     # argparse usage errors are configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        stream=sys.stderr, format="%(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgument, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapsKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
