"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ArgumentError, CheckpointError, DimensionError, NumericError, TrainingError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args):
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_config(args):
    print(json.dumps(_config(args).to_dict(), indent=2, sort_keys=True))


def cmd_generate(args):
    from .phantom import PhantomConfig, generate_dataset

    if args.n < 1:
        raise ArgumentError("--n must be >= 1")
    if args.config and args.size:
        raise ArgumentError("--config and --size are exclusive (the config's preset picks the size)")
    cfg = RunConfig.load(args.config).phantom if args.config else getattr(PhantomConfig, args.size or "desk")()
    manifest = generate_dataset(args.n, args.seed, args.out, cfg)
    labels = np.array([e["label"] for e in manifest["samples"]])
    print(f"wrote {args.n} samples ({cfg.frames} frames, {cfg.height}x{cfg.width}) to {args.out}")
    for name, lo, hi in zip(manifest["index_names"], labels.min(0), labels.max(0)):
        print(f"  {name:5s} {lo:7.3f} .. {hi:7.3f} mm")


def _load_data(path):
    from .phantom import load_dataset

    if not (Path(path) / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset at {path} (manifest.json missing)")
    return load_dataset(path)


def cmd_train(args):
    from .model import DMQCA, ablation, save_checkpoint, train

    cfg = _config(args)
    name = args.ablation or cfg.ablation
    ab = ablation(name)
    samples = _load_data(args.data or cfg.data)
    model = DMQCA(cfg.model, ab, seed=cfg.train.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss"])

        def on_epoch(epoch, loss, lr):
            w.writerow([epoch, repr(lr), repr(loss)])
            fh.flush()
            _log(f"epoch {epoch:3d}  lr {lr:.3e}  loss {loss:.5f}")

        train(model, samples, cfg.train, on_epoch)
    save_checkpoint(model, out)
    print(f"{name}: {len(model.params)} parameter tensors -> {out}; loss log {log_path}")


def cmd_eval(args):
    from .evalkit import FoldResult, MeanPredictor, OraclePredictor, summarize, write_reports
    from .model import load_checkpoint

    cfg = _config(args)
    samples = _load_data(args.data or cfg.data)
    labels = np.stack([s.label for s in samples])
    if args.predictor == "model":
        if not args.ckpt:
            raise ArgumentError("--ckpt is required with --predictor model")
        model = load_checkpoint(args.ckpt)
        preds, name = model.predict(samples), "Model"
    elif args.predictor == "oracle":
        preds, name = OraclePredictor().predict(samples), "Oracle"
    else:
        # reference level only: the mean is taken over the evaluated samples themselves
        mp = MeanPredictor()
        mp.fit(samples)
        preds, name = mp.predict(samples), "Mean"
    report = summarize(name, [FoldResult(0, list(range(len(samples))), preds, labels)])
    out = Path(args.out or cfg.out)
    write_reports([report], out, "eval")
    print((out / "eval.txt").read_text(), end="")


def cmd_crossval(args):
    from .evalkit import MeanPredictor, ModelPredictor, run_protocol, write_reports

    cfg = _config(args)
    samples = _load_data(args.data or cfg.data)
    predictors = [MeanPredictor()] + [ModelPredictor(n, cfg.model, cfg.train) for n in cfg.ablations]
    reports = []
    for p in predictors:
        def on_fold(i, fold, name=p.name):
            status = "failed: " + fold.failed if fold.failed else f"mae {np.abs(fold.preds - fold.labels).mean():.4f}"
            _log(f"{name} fold {i}: {status}")

        reports.append(run_protocol(samples, p, cfg.folds, cfg.fold_seed, on_fold))
    out = Path(args.out or cfg.out)
    write_reports(reports, out, "crossval")
    print((out / "crossval.txt").read_text(), end="")


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite

    worst = run_suite(args.seed, n_configs=args.configs)
    failed = 0
    for label, err in worst.items():
        ok = err < TOLERANCE
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {label:32s} {err:.2e}")
    print(f"{len(worst) - failed}/{len(worst)} operators within {TOLERANCE:g}")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser():
    p = _Parser(prog="dmqca", description="Multiview stenosis quantification: phantoms, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("config", help="print the expanded run configuration")
    c.add_argument("--config")
    c.set_defaults(func=cmd_config)

    g = sub.add_parser("generate", help="render a phantom dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", choices=("desk", "paper"), help="phantom preset (default desk)")
    g.add_argument("--config", help="take the phantom settings from a run configuration")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one configuration and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--ablation")
    t.add_argument("--data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="per-epoch loss CSV (default: <out>.loss.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a reference predictor on a dataset")
    e.add_argument("--config")
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--predictor", choices=("model", "oracle", "mean"), default="model")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("crossval", help="k-fold comparison of the configured ablations")
    x.add_argument("--config")
    x.add_argument("--data")
    x.add_argument("--out")
    x.set_defaults(func=cmd_crossval)

    k = sub.add_parser("gradcheck", help="finite-difference check of every operator and the full model")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--configs", type=int, default=20)
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"dmqca: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args) or EXIT_OK
    except (ArgumentError, DimensionError) as exc:
        print(f"dmqca: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"dmqca: training failed at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"dmqca: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"dmqca: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
