"""Command-line front end: ``qfmap <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Errors are written to
stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import TabularDataset, load_csv
from .errors import QFMapError
from .pipeline import (
    RunDirectory,
    SearchConfig,
    StageError,
    diagnose_kv,
    evaluate_kernel,
    heak_layout,
    rbfk_scores,
    run_full_search,
    stage_evaluate,
    stage_finetune,
    stage_label_pool,
    stage_rank,
    stage_sample_pool,
    stage_select_features,
    stage_train_predictor,
    train_tek,
    write_rows,
)
from .kernel import rbf_gamma_grid


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


_FIELD_TYPES = {
    "l0": _int_list,
    "strategy": str,
    "scoring": str,
    "feature_method": str,
    "carry_best": _bool,
    "noise_p1": float,
    "noise_p2": float,
    "finetune_lr": float,
    "predictor_lr": float,
    "lam": float,
    "train_fraction": float,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("search config (overrides --config values)")
    g.add_argument("--config", type=Path, help="JSON file with SearchConfig keys")
    for f in dataclasses.fields(SearchConfig):
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest="cfg_" + f.name, type=_FIELD_TYPES.get(f.name, int), default=None,
                       metavar=f.name.upper())


def _add_run(p: argparse.ArgumentParser, required=True) -> None:
    p.add_argument("--run", "--out", dest="run", type=Path, required=required, help="run directory")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qfmap", description="Feature-map search for quantum fidelity kernels.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("select-features", help="split raw data and fit the feature selector")
    _add_run(p)
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--label-column", default="-1")

    for name, help_ in (
        ("sample-pool", "sample the training pool of layouts"),
        ("label-pool", "compute train KTA for every pool layout"),
        ("train-predictor", "fit the KTA predictor"),
        ("rank", "score the ranking pool and keep the top k"),
        ("finetune", "promote gates and ascend KTA for each candidate"),
        ("evaluate", "accuracies for every stage, report and chosen kernel"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_run(p)
        _add_config_flags(p)

    p = sub.add_parser("search", help="run every stage")
    _add_run(p)
    _add_config_flags(p)
    p.add_argument("--data", type=Path, help="raw CSV (split and feature selection applied)")
    p.add_argument("--train", type=Path, help="prepared angle-scaled train CSV")
    p.add_argument("--test", type=Path, help="prepared angle-scaled test CSV")
    p.add_argument("--label-column", default="-1")

    p = sub.add_parser("baseline", help="evaluate a baseline kernel")
    p.add_argument("kind", choices=("rbfk", "heak", "tek"))
    p.add_argument("--train", type=Path, help="angle-scaled train CSV")
    p.add_argument("--test", type=Path, help="angle-scaled test CSV")
    p.add_argument("--run", type=Path, help="take train/test splits from a run directory")
    p.add_argument("--n-qubits", type=int)
    p.add_argument("--l0", type=int, default=1)
    p.add_argument("--gamma-grid", type=_float_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path, help="CSV path (default stdout)")

    p = sub.add_parser("diagnose-kv", help="kernel variance over an (L0, p) grid")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--label-column", default="-1")
    p.add_argument("--n-qubits", type=int, required=True)
    p.add_argument("--l0", type=_int_list, required=True)
    p.add_argument("--p", type=_int_list, required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path, help="CSV path (default stdout)")
    return parser


def _require_file(path: Path | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {flag}")
    if not path.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return path


def _label_col(text: str):
    return int(text) if text.lstrip("-").isdigit() else text


def _resolve_config(args, run: RunDirectory | None) -> SearchConfig:
    """File values, then the run's own config, then flag overrides."""
    base: dict = {}
    if args.config is not None:
        base = json.loads(_require_file(args.config, "--config").read_text())
    elif run is not None and run.config_path.exists():
        base = json.loads(run.config_path.read_text())
    overrides = {
        k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None
    }
    return SearchConfig.from_dict({**base, **overrides})


def _stage_config(args, run: RunDirectory) -> None:
    """Stages after the first keep the run's config unless flags change it."""
    changed = args.config is not None or any(
        v is not None for k, v in vars(args).items() if k.startswith("cfg_")
    )
    if not run.config_path.exists() and not changed:
        raise UsageError(f"--run: {run.root} has no config.json (pass --config)")
    if changed:
        run.write_config(_resolve_config(args, run))


def _emit(rows, output: Path | None) -> None:
    if output is not None:
        write_rows(output, rows)
        return
    if rows:
        print(",".join(rows[0]))
        for r in rows:
            print(",".join(repr(v) if isinstance(v, float) else str(v) for v in r.values()))


def _splits(args) -> tuple[TabularDataset, TabularDataset]:
    if args.run is not None:
        return RunDirectory(args.run).datasets()
    train = load_csv(_require_file(args.train, "--train"), "label")
    test = load_csv(_require_file(args.test, "--test"), "label", train.num_classes)
    return train, test


def _baseline(args) -> None:
    train, test = _splits(args)
    if args.kind == "rbfk":
        rows = rbfk_scores(train, test, rbf_gamma_grid(train.features, args.gamma_grid), args.lam)
        for r, c in zip(rows, args.gamma_grid):
            r["multiplier"] = c
        _emit([{"kernel": "rbfk", **r} for r in rows], args.output)
        return
    n = args.n_qubits or train.d
    if args.kind == "heak":
        layout, theta = heak_layout(n, train.d, args.l0), None
    else:
        layout, theta, _ = train_tek(train, n, args.l0, args.epochs, args.lr, args.seed)
    s = evaluate_kernel(layout, theta, train, test, args.lam)
    _emit(
        [
            {
                "kernel": args.kind,
                "n_qubits": n,
                "l0": args.l0,
                "kta": s.kta,
                "train_accuracy": s.train_accuracy,
                "test_accuracy": s.test_accuracy,
            }
        ],
        args.output,
    )


_STAGES = {
    "sample-pool": stage_sample_pool,
    "label-pool": stage_label_pool,
    "train-predictor": stage_train_predictor,
    "rank": stage_rank,
    "finetune": stage_finetune,
    "evaluate": stage_evaluate,
}


def _run(args) -> None:
    cmd = args.command
    if cmd == "select-features":
        run = RunDirectory(args.run)
        data = load_csv(_require_file(args.data, "--data"), _label_col(args.label_column))
        config = _resolve_config(args, run)
        if run.config_path.exists() and not args.force and run.config() != config:
            raise FileExistsError(f"{run.config_path} exists with a different config (use --force)")
        run.write_config(config)
        stage_select_features(run, config, data, args.force)
    elif cmd in _STAGES:
        run = RunDirectory(args.run)
        _stage_config(args, run)
        _STAGES[cmd](run, args.force)
    elif cmd == "search":
        config = _resolve_config(args, None)
        if args.data is not None:
            data = load_csv(_require_file(args.data, "--data"), _label_col(args.label_column))
            result = run_full_search(config, args.run, dataset=data, force=args.force)
        elif args.train is not None or args.test is not None:
            train = load_csv(_require_file(args.train, "--train"), "label")
            test = load_csv(_require_file(args.test, "--test"), "label", train.num_classes)
            result = run_full_search(config, args.run, train=train, test=test, force=args.force)
        else:
            raise UsageError("search needs --data or --train/--test")
        _emit(result.report, None)
    elif cmd == "baseline":
        _baseline(args)
    elif cmd == "diagnose-kv":
        data = load_csv(_require_file(args.data, "--data"), _label_col(args.label_column))
        rows = diagnose_kv(data, args.n_qubits, args.l0, args.p, args.trials, args.seed)
        _emit(rows, args.output)


def _report(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        _run(args)
    except UsageError as exc:
        _report("usage", str(exc))
        return 1
    except StageError as exc:
        _report(type(exc.cause).__name__, str(exc.cause), stage=exc.stage)
        return 2
    except (QFMapError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        _report(type(exc).__name__, str(exc))
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
