"""Command-line entry points.

Subcommands: train, kfold, evaluate, explain, select, synth.  Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric or analysis
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (ConfigError, DataError, ExplanationError,
                     InferenceError, MetricError, NumericError,
                     SelectionError, ShapeError)
from .harness import (ExperimentConfig, RunLedger, evaluate, run_kfold,
                      select_checkpoint, train)
from .records import (load_ground_truth_jsonl, load_records_jsonl,
                      save_ground_truth_jsonl, save_records_jsonl)
from .synthetic import SynthConfig, generate_synthetic
from .xai import write_brhr_csv, write_importance_jsonl


def _cmd_train(args):
    config = ExperimentConfig.from_json_file(args.config)
    ledger = train(config, log=print)
    for strategy, ckpt in sorted(ledger.selected.items()):
        print(f"selected[{strategy}] {ckpt}")
    print(f"ledger {Path(config.out_dir) / 'ledger.jsonl'}")
    return 0


def _cmd_kfold(args):
    config = ExperimentConfig.from_json_file(args.config)
    report = run_kfold(config, log=print)
    for fold in report["folds"]:
        print(f"fold {fold['fold']} val_auc {fold['val_auc']:.4f} "
              f"(epoch {fold['epoch']}, n_val {fold['n_val']})")
    print(f"aggregate {report['formatted']}")
    return 0


def _cmd_evaluate(args):
    records = load_records_jsonl(args.data)
    truth = (load_ground_truth_jsonl(args.ground_truth)
             if args.ground_truth else None)
    report = evaluate(args.checkpoint, records, truth=truth, t=args.t,
                      t_dec=args.t_dec)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_explain(args):
    from .harness import load_model
    from .xai import dataset_brhr

    records = load_records_jsonl(args.data)
    truth = load_ground_truth_jsonl(args.ground_truth)
    model, _ = load_model(args.checkpoint)
    table = dataset_brhr(model, records, truth, t=args.t, t_dec=args.t_dec)
    write_brhr_csv(table, args.t, args.out)
    for (modality, partner), stat in sorted(table.items()):
        print(f"{modality} <- {partner}: mean_brhr {stat.mean_brhr:.4f} "
              f"n {stat.n_records}")
    print(f"wrote {args.out}")
    if args.importance_out:
        write_importance_jsonl(model, records, args.importance_out)
        print(f"wrote {args.importance_out}")
    return 0


def _cmd_select(args):
    ledger = RunLedger.load(args.ledger)
    row = select_checkpoint(ledger, args.strategy)
    print(row.checkpoint)
    return 0


def _cmd_synth(args):
    config = SynthConfig(rule=args.rule, n=args.n)
    records, truth, meta = generate_synthetic(config, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_records_jsonl(records, out_dir / "data.jsonl")
    save_ground_truth_jsonl(truth, out_dir / "truth.jsonl")
    with open(out_dir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump({**meta, "n": args.n, "seed": args.seed}, fh, indent=2,
                  sort_keys=True)
    print(f"wrote {out_dir / 'data.jsonl'} ({len(records)} records)")
    print(f"wrote {out_dir / 'truth.jsonl'}")
    print(f"wrote {out_dir / 'meta.json'}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tcrlab",
        description="Multi-modal TCR-pMHC binding models with "
                    "attention-based explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one configured training job")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("kfold", help="k-fold cross-validation")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.set_defaults(func=_cmd_kfold)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="records JSONL")
    p.add_argument("--ground-truth", help="distance ground-truth JSONL")
    p.add_argument("--t", type=float, default=0.25)
    p.add_argument("--t-dec", type=float, default=0.5)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("explain",
                       help="BRHR table for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="records JSONL")
    p.add_argument("--ground-truth", required=True,
                   help="distance ground-truth JSONL")
    p.add_argument("--t", type=float, default=0.25)
    p.add_argument("--t-dec", type=float, default=0.5)
    p.add_argument("--out", default="brhr.csv", help="output CSV path")
    p.add_argument("--importance-out",
                   help="also dump per-record importance JSONL here")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("select", help="pick a checkpoint from a run ledger")
    p.add_argument("--ledger", required=True, help="ledger.jsonl path")
    p.add_argument("--strategy", required=True,
                   choices=["loss", "explanation"])
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("synth", help="generate a planted-motif dataset")
    p.add_argument("--rule", required=True,
                   choices=["epitope-only", "cdr3b-only", "joint"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", default=".",
                   help="directory for data.jsonl / truth.jsonl / meta.json")
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, SelectionError, InferenceError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, MetricError, ExplanationError, ShapeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
