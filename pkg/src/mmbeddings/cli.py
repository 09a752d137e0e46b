"""Command-line harness: ``mmbeddings {simulate,train,evaluate,sweep}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence,
5 partial sweep. The default output directory comes from
``$MMBEDDINGS_OUTPUT_DIR`` (falling back to ``./mmbeddings_out``).

MetricRow CSV header::

    method,q,rep,metric_task,mse_or_auc_y,rmse_d,auc_b,n_params,seed

``metric_task`` is ``mse_y`` (regression) or ``auc_y`` (classification);
``rmse_d`` and ``auc_b`` are empty for methods without an embedding space.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import experiment
from .baselines import METHODS
from .metrics import METRIC_ROW_HEADER, MetricRow, auc, mse
from .simgen import SimConfig, SimConfigError, default_test_size, load_dataset, save_dataset, simulate, simulate_test
from .trainer import TrainConfig, TrainingDiverged, fit, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4, 5
OUTPUT_ENV = "MMBEDDINGS_OUTPUT_DIR"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _default_out() -> str:
    return os.environ.get(OUTPUT_ENV, "mmbeddings_out")


def _read_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, f"{path}: top level must be an object")
    return data


def _load_data(path: str):
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"cannot read dataset {path}: {exc}") from exc


def cmd_simulate(args) -> int:
    raw = _read_json(args.config)
    for key in ("seed", "q", "n", "task"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    try:
        cfg = SimConfig.from_dict(raw)
    except (SimConfigError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid simulation config: {exc}") from exc
    ds = simulate(cfg)
    test = simulate_test(ds, args.n_test or default_test_size(ds.n))
    os.makedirs(args.out, exist_ok=True)
    save_dataset(ds, os.path.join(args.out, "train.csv"))
    save_dataset(test, os.path.join(args.out, "test.csv"))
    line = f"n={ds.n} q={ds.cardinalities} p={ds.X.shape[1]} task={cfg.task} n_test={test.n}"
    if cfg.task == "classification":
        line += f" positive_rate={ds.y.mean():.4f}"
    print(line)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    for key in ("max_epochs", "batch_size", "patience", "lr", "fine_tune_epochs"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid train config: {exc}") from exc


def cmd_train(args) -> int:
    if args.method not in METHODS:
        raise CliError(EXIT_CONFIG, f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    tcfg = _train_config(args)
    ds = _load_data(args.data)
    try:
        mcfg = experiment.model_config_for(ds, _read_json(args.model_config))
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid model config: {exc}") from exc
    try:
        res = fit(args.method, mcfg, ds, tcfg)
    except TrainingDiverged as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"{args.method}.checkpoint.json")
    save_checkpoint(ckpt, res.model, res.embeddings, {"train_seed": tcfg.seed, "data": os.path.abspath(args.data)})
    lines = ["phase,epoch,train_loss,val_loss,seconds"]
    for phase, rep in (("train", res.report), ("fine_tune", res.fine_tune)):
        if rep is None:
            continue
        for e, (tl, vl, s) in enumerate(zip(rep.train_loss, rep.val_loss, rep.epoch_seconds)):
            lines.append(f"{phase},{e},{tl!r},{vl!r},{s!r}")
    report_path = os.path.join(args.out, f"{args.method}.train_report.csv")
    experiment._atomic_write(report_path, "\n".join(lines) + "\n")
    n_params = res.model.count_parameters()
    print(f"method={args.method} n_params={n_params['total']} best_epoch={res.report.best_epoch} "
          f"best_val_loss={res.report.best_val_loss:.6g} checkpoint={ckpt}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    test = _load_data(args.data)
    if args.predictions:
        y_hat = np.loadtxt(args.predictions, delimiter=",", ndmin=1, skiprows=1)
        if y_hat.shape[0] != test.n:
            raise CliError(EXIT_DATA, "predictions length does not match the dataset")
        if test.config.task == "regression":
            row = MetricRow("predictions", test.cardinalities[0], args.rep, "mse_y", mse(test.y, y_hat), None, None, 0, args.seed)
        else:
            row = MetricRow("predictions", test.cardinalities[0], args.rep, "auc_y", auc(y_hat, test.y), None, None, 0, args.seed)
    else:
        if not args.checkpoint:
            raise CliError(EXIT_CONFIG, "need --checkpoint or --predictions")
        try:
            model, emb, _ = load_checkpoint(args.checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(EXIT_DATA, f"cannot read checkpoint: {exc}") from exc
        cfg = model.config
        if (cfg.p != test.X.shape[1] or cfg.cardinalities != test.cardinalities):
            raise CliError(
                EXIT_DATA,
                f"schema mismatch: checkpoint p={cfg.p}, q={cfg.cardinalities}; "
                f"data p={test.X.shape[1]}, q={test.cardinalities}",
            )
        row = experiment.evaluate_fit(model.method, model, emb, test, args.rep, args.seed)
    text = METRIC_ROW_HEADER + "\n" + row.to_csv() + "\n"
    if args.out:
        experiment._atomic_write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    raw = _read_json(args.config)
    if args.replications is not None:
        raw["replications"] = args.replications
    if args.methods:
        raw["methods"] = args.methods.split(",")
    if args.q:
        raw["q_grid"] = [int(v) for v in args.q.split(",")]
    try:
        cfg = experiment.ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError, SimConfigError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid experiment config: {exc}") from exc
    out = args.out or cfg.output_dir or _default_out()
    result = experiment.run_sweep(cfg, args.seed, jobs=args.jobs)
    paths = experiment.write_sweep(result, cfg, out)
    sys.stdout.write(experiment.markdown_table(result.summary, cfg.methods))
    print(f"wrote {', '.join(sorted(paths.values()))}")
    if result.partial:
        print(f"{len(result.failures)} run(s) failed; see failures.csv", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmbeddings", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate train/test CSV datasets")
    p.add_argument("--config", help="JSON simulation config")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--task", choices=["regression", "classification"])
    p.add_argument("--n-test", type=int, dest="n_test")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one method on a dataset")
    p.add_argument("--data", required=True, help="dataset CSV (JSON sidecar alongside)")
    p.add_argument("--method", required=True)
    p.add_argument("--config", help="JSON train config")
    p.add_argument("--model-config", dest="model_config", help="JSON model overrides")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--fine-tune-epochs", type=int, dest="fine_tune_epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a test dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="CSV with a header and one prediction per row")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rep", type=int, default=0)
    p.add_argument("--out", help="write the MetricRow CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a seeded grid of simulate/train/evaluate")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--replications", type=int)
    p.add_argument("--methods")
    p.add_argument("--q")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None and args.command in ("simulate", "train"):
        args.out = _default_out()
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
