"""``canet`` command line: gen-data, train, adapt, eval, gradcheck, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .checks import CASES, run_case
from .config import ConfigError, ExperimentConfig, load_config, load_spec_file
from .metrics import Metrics
from .model import ABLATIONS, CANetModel
from .nn import UnknownDatasetError
from .synthdata import DatasetFormatError, load_dataset, read_manifest, save_dataset
from .trainer import (
    CSV_COLUMNS,
    RunRecord,
    TrainingDivergedError,
    adapt,
    adapt_variant,
    evaluate_with_loss,
    format_value,
    predict_maps,
    train,
    write_maps,
)

CHECKPOINT_NAME = "checkpoint.cant"


class UsageError(Exception):
    pass


def _versions() -> dict:
    return {"canet": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _write_run_info(out: str, cfg: Optional[ExperimentConfig], **info) -> None:
    os.makedirs(out, exist_ok=True)
    if cfg is not None:
        with open(os.path.join(out, "config.ini"), "w") as f:
            f.write(cfg.to_ini())
    payload = {"versions": _versions(), "argv": sys.argv[1:], **info}
    if cfg is not None:
        payload["seeds"] = {"model": cfg.model.seed, "train": cfg.train.seed}
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _split_or_none(root: str, split: str, name: str):
    if not os.path.isdir(os.path.join(root, split, "label")):
        return None
    return load_dataset(root, split, name=name)


def _dataset_name(root: str) -> str:
    spec = read_manifest(root)
    return spec.name if spec is not None else os.path.basename(os.path.normpath(root))


def _eval_sets(root: str, dataset_id: str):
    sets = []
    for split in ("val", "test"):
        data = _split_or_none(root, split, dataset_id)
        if data is not None:
            sets.append((split, dataset_id, data))
    return sets


def _print_rows(rows: Sequence[dict], columns=CSV_COLUMNS, prefix: Sequence[str] = ()) -> None:
    print(",".join(list(prefix) + list(columns)))
    for row in rows:
        print(",".join([str(row[p]) for p in prefix] + [format_value(row[c]) for c in columns]))


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_spec_file(args.spec)
    family = cfg.family()
    if family is not None:
        for spec in family:
            save_dataset(spec, os.path.join(args.out, spec.name))
            print(f"wrote {spec.name}: {spec.n_train}/{spec.n_val}/{spec.n_test} pairs -> {os.path.join(args.out, spec.name)}")
        return 0
    spec = cfg.dataset_spec()
    if spec is None:
        raise ConfigError("data: no dataset spec keys given")
    save_dataset(spec, args.out)
    print(f"wrote {spec.name}: {spec.n_train}/{spec.n_val}/{spec.n_test} pairs -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset_id = args.dataset_id or _dataset_name(args.data)
    data = load_dataset(args.data, "train", name=dataset_id)
    model = CANetModel(cfg.model, [dataset_id])
    record = train(model, data, cfg.train, dataset_id, _eval_sets(args.data, dataset_id))
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out, CHECKPOINT_NAME), {"epochs": cfg.train.epochs})
    record.to_csv(os.path.join(args.out, "run.csv"))
    _write_run_info(args.out, cfg, data=os.path.abspath(args.data), dataset_id=dataset_id)
    part = model.param_partition(dataset_id)
    print(f"trained {dataset_id!r}: {record.epochs} epochs, final loss {record.epoch_losses[-1]:.4f}, {part.total} parameters")
    _print_rows([r for r in record.rows if r["split"] != "train"] or record.rows[-1:])
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    if not model.dataset_ids:
        raise UsageError("checkpoint holds no historical dataset")
    if args.dataset_id in model.dataset_ids:
        raise UsageError(f"dataset id {args.dataset_id!r} is already registered in the checkpoint")
    hist_id = model.dataset_ids[0]
    data = load_dataset(args.new_data, "train", name=args.dataset_id)
    hist_sets = []
    if args.hist_data:
        hist_sets = [(s, hist_id, d) for s, _, d in _eval_sets(args.hist_data, hist_id)]
    before = RunRecord()
    for split, ds, d in hist_sets:
        loss, m = evaluate_with_loss(model, ds, d)
        before.add(0, split, ds, loss, m, 0.0)
    train_cfg = replace(cfg.train, scope="adapter_only", ablation=model.ablation)
    record = adapt(model, args.dataset_id, data, train_cfg, eval_sets=_eval_sets(args.new_data, args.dataset_id) + hist_sets)
    os.makedirs(args.out, exist_ok=True)
    meta = dict(model.meta, epochs=train_cfg.epochs)
    save_checkpoint(model, os.path.join(args.out, CHECKPOINT_NAME), meta)
    record.to_csv(os.path.join(args.out, "run.csv"))
    _write_run_info(args.out, cfg, checkpoint=os.path.abspath(args.checkpoint), new_data=os.path.abspath(args.new_data), dataset_id=args.dataset_id)
    part = model.param_partition(args.dataset_id)
    print(f"updated parameters: {part.updated_count} of {part.total} (fraction {part.fraction:.4f})")
    for row in before.rows:
        after = next(r for r in record.rows if r["split"] == row["split"] and r["dataset_id"] == row["dataset_id"] and r["epoch"] == train_cfg.epochs)
        same = all(row[k] == after[k] for k in ("loss", "f1", "precision", "recall", "iou"))
        print(f"historical {row['dataset_id']}/{row['split']}: f1 before {row['f1']:.6f} after {after['f1']:.6f} ({'unchanged' if same else 'CHANGED'})")
    _print_rows([r for r in record.rows if r["split"] != "train"])
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.dataset_id not in model.dataset_ids:
        raise UsageError(f"dataset id {args.dataset_id!r} is not in the checkpoint (has {model.dataset_ids})")
    data = load_dataset(args.data, args.split, name=args.dataset_id)
    loss, metrics = evaluate_with_loss(model, args.dataset_id, data)
    rec = RunRecord()
    row = rec.add(int(model.meta.get("epochs", 0)), args.split, args.dataset_id, loss, metrics, 0.0)
    if args.emit_maps:
        write_maps(predict_maps(model, args.dataset_id, data), args.emit_maps)
    _print_rows([row])
    return 0


def cmd_gradcheck(args) -> int:
    names = list(CASES) if args.ops == "all" else [n.strip() for n in args.ops.split(",") if n.strip()]
    for n in names:
        if n not in CASES:
            raise UsageError(f"unknown op {n!r}; choose from: {', '.join(CASES)}")
    failed = 0
    print(f"{'check':<28} {'input':<36} {'max rel err':>11}  status")
    for n in names:
        report = run_case(n, args.tol)
        for line in report.lines():
            print(line)
        failed += not report.passed
    print(f"{len(names) - failed}/{len(names)} checks passed")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    pretrained = load_checkpoint(args.checkpoint)
    if not pretrained.dataset_ids:
        raise UsageError("checkpoint holds no historical dataset")
    if pretrained.ablation != "none":
        raise UsageError(f"checkpoint already carries ablation {pretrained.ablation!r}")
    hist_id = pretrained.dataset_ids[0]
    new_id = args.dataset_id or _dataset_name(args.data)
    if new_id in pretrained.dataset_ids:
        raise UsageError(f"dataset id {new_id!r} is already registered in the checkpoint")
    data = load_dataset(args.data, "train", name=new_id)
    hist_train = load_dataset(args.hist_data, "train", name=hist_id) if args.hist_data else None
    sets = _eval_sets(args.data, new_id)
    if args.hist_data:
        sets += [(s, hist_id, d) for s, _, d in _eval_sets(args.hist_data, hist_id)]
    if not sets:
        sets = [("train", new_id, data)]
    rows: List[dict] = []
    for variant in ("none", args.which):
        model = adapt_variant(pretrained, variant, new_id, data, replace(cfg.train, scope="adapter_only"), hist_train)
        if variant == "shared_bn":
            counts = {len(b.entries) for b in model._shared_banks()}
            if counts != {1}:
                raise RuntimeError(f"shared_bn: expected one BN entry per shared layer, found {sorted(counts)}")
            print("shared_bn: every shared BN layer routes all datasets through 1 bank entry")
        for split, ds, d in sets:
            loss, m = evaluate_with_loss(model, ds, d)
            rows.append({"variant": variant, "epoch": cfg.train.epochs, "split": split, "dataset_id": ds, "loss": loss, **m.as_dict(), "seconds": 0.0})
    os.makedirs(args.out, exist_ok=True)
    cols = ("variant",) + CSV_COLUMNS[:-1]
    with open(os.path.join(args.out, "ablation.csv"), "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(str(r[c]) if c in ("variant", "split", "dataset_id", "epoch") else format_value(r[c]) for c in cols) + "\n")
    _write_run_info(args.out, cfg, checkpoint=os.path.abspath(args.checkpoint), data=os.path.abspath(args.data), which=args.which)
    _print_rows(rows, CSV_COLUMNS[:-1], prefix=("variant",))
    return 0


# -- entry point -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="canet", description="Change detection with per-dataset adapters.")
    parser.add_argument("--version", action="version", version=f"canet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset (or family) to disk")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on one dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset-id")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="add a dataset and train only its adapter")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--new-data", required=True)
    p.add_argument("--dataset-id", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hist-data", help="historical dataset, evaluated before and after")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dataset-id", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--emit-maps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of ops and blocks")
    p.add_argument("--ops", default="all", help="'all' or comma-separated names")
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="adapt an ablated variant next to the full model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--which", required=True, choices=[a for a in ABLATIONS if a != "none"])
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--dataset-id")
    p.add_argument("--hist-data")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DatasetFormatError, UnknownDatasetError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
