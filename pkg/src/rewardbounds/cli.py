"""Command line interface.

Subcommands: generate synthetic datasets, train a single head, evaluate a
checkpoint, run a sweep, export/aggregate reports (with calibration
figures rendered next to the delimited output), and selfcheck.  Exit
status 0 on success, 1 on validation errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .corpus import (
    DatasetError,
    generate_synthetic,
    load_dataset,
    random_world,
    save_dataset,
)
from .figures import report_figures
from .harness import (
    CategoryWeights,
    HarnessError,
    SweepSpec,
    aggregate_by_category,
    export_structured,
    export_tabular,
    run_sweep,
    train_candidate,
    write_sweep_outputs,
)
from .heads import ModelError, load_model, save_model
from .metrics import MetricError, MetricReport, evaluate
from .optim import ConvergenceError, TrainingDivergedError
from .selfcheck import run_selfcheck


class _Parser(argparse.ArgumentParser):
    # Argument errors are user errors: print usage, exit 1 instead of 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="rewardbounds", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rewardbounds {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="sample a synthetic preference dataset")
    gen.add_argument("--dim", type=int, required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument(
        "--mode", choices=("bernoulli", "deterministic"), default="bernoulli"
    )
    gen.add_argument(
        "--world-seed",
        type=int,
        dest="world_seed",
        help="seed of the ground-truth reward; pass the same value with "
        "different --seed values to draw train/val splits from one world "
        "(default: derived from --seed)",
    )
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train one reward head")
    tr.add_argument("--arch", choices=("ens-mlp", "ens-lora", "mcd", "bay-lin"), required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", default="model.json")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--config", help="JSON config file; explicit flags override it")
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int, dest="batch_size")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--warmup-fraction", type=float, dest="warmup_fraction")
    tr.add_argument("--weight-decay", type=float, dest="weight_decay")
    tr.add_argument("--hidden", type=int)
    tr.add_argument("--members", type=int)
    tr.add_argument("--rank", type=int)
    tr.add_argument("--scaling", type=float)
    tr.add_argument("--dropout", type=float)
    tr.add_argument("--masks", type=int)
    tr.add_argument("--lambda-anchor", type=float, dest="lambda_anchor")
    tr.add_argument("--gamma-center", type=float, dest="gamma_center")
    tr.add_argument("--lambda-l2", type=float, dest="lambda_l2")
    tr.add_argument("--weighted", action="store_true", default=None,
                    help="use the sigmoid-derivative-weighted Hessian (bay-lin)")
    tr.add_argument("--tol", type=float)
    tr.add_argument("--max-iter", type=int, dest="max_iter")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--alpha", type=float, default=0.2)
    ev.add_argument("--beta", type=float, default=None)
    ev.add_argument("--bins", type=int, default=10)
    ev.add_argument("--out", help="write the metric report JSON here")

    sw = sub.add_parser("sweep", help="grid sweep with threshold-then-rank selection")
    sw.add_argument("--spec", required=True)
    sw.add_argument("--out-dir", dest="out_dir", required=True)
    sw.add_argument("--workers", type=int)

    rp = sub.add_parser("report", help="aggregate and export metric reports")
    rp.add_argument("--reports", nargs="*", default=[], help="metric report JSON files")
    rp.add_argument("--checkpoint", help="aggregate this checkpoint on --data")
    rp.add_argument("--data")
    rp.add_argument("--weights", help="category weights JSON for aggregation")
    rp.add_argument("--alpha", type=float, default=0.2)
    rp.add_argument("--beta", type=float, default=None)
    rp.add_argument("--bins", type=int, default=10)
    rp.add_argument("--out-dir", dest="out_dir", required=True)
    rp.add_argument("--no-figures", action="store_true")

    sub.add_parser("selfcheck", help="run the built-in invariant suite")
    return parser


_CONFIG_KEYS = (
    "lr",
    "batch_size",
    "epochs",
    "warmup_fraction",
    "weight_decay",
    "hidden",
    "members",
    "rank",
    "scaling",
    "dropout",
    "masks",
    "lambda_anchor",
    "gamma_center",
    "lambda_l2",
    "weighted",
    "tol",
    "max_iter",
)


def _cmd_generate(args) -> int:
    # World and sample streams are always distinct derivations, otherwise the
    # ground-truth weights would equal the first drawn feature row.
    world_seq, data_seq = np.random.SeedSequence(args.seed).spawn(2)
    world_seed = (
        args.world_seed
        if args.world_seed is not None
        else int(world_seq.generate_state(1, np.uint64)[0])
    )
    world = random_world(args.dim, world_seed, noise_model=args.mode)
    dataset = generate_synthetic(world, args.n, int(data_seq.generate_state(1, np.uint64)[0]))
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} examples (dim={dataset.dim}, mode={args.mode}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    config: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config.update(json.load(fh))
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    model = train_candidate(args.arch, dataset, config, args.seed)
    save_model(model, args.out)
    print(f"trained {args.arch} on {len(dataset)} examples, checkpoint at {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(
        model,
        dataset,
        alpha=args.alpha,
        beta=args.beta,
        m_bins=args.bins,
        meta={
            "architecture": model.arch,
            "checkpoint": args.checkpoint,
            "dataset": args.data,
        },
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    print(
        f"n={report.n} win_rate={report.win_rate:.4f} rs_{report.alpha:g}={report.rs_alpha:.4f} "
        f"ece={report.ece:.4f} ebce={report.ebce:.4f}"
    )
    return 0


def _cmd_sweep(args) -> int:
    spec = SweepSpec.from_json_file(args.spec)
    if args.workers is not None:
        spec = SweepSpec.from_dict({**spec.to_dict(), "workers": args.workers})
    result = run_sweep(spec)
    write_sweep_outputs(result, args.out_dir)
    if result.best is None:
        print("no candidate passed the calibration thresholds; see manifest for reasons")
    else:
        best = result.best
        print(
            f"selected {best.candidate_id} "
            f"(rs_{spec.selection.alpha:g}={best.report.rs_alpha:.4f}, "
            f"ece={best.report.ece:.4f}, ebce={best.report.ebce:.4f})"
        )
    print(f"outputs in {args.out_dir}")
    return 0


def _cmd_report(args) -> int:
    reports: list[MetricReport] = []
    for path in args.reports:
        with open(path, "r", encoding="utf-8") as fh:
            reports.append(MetricReport.from_json(fh.read()))
    if args.checkpoint or args.weights:
        if not (args.checkpoint and args.data and args.weights):
            raise HarnessError("aggregation needs --checkpoint, --data, and --weights together")
        model = load_model(args.checkpoint)
        dataset = load_dataset(args.data)
        weights = CategoryWeights.from_json_file(args.weights)
        reports.append(
            aggregate_by_category(
                model,
                dataset,
                weights,
                alpha=args.alpha,
                beta=args.beta,
                m_bins=args.bins,
                meta={
                    "architecture": model.arch,
                    "checkpoint": args.checkpoint,
                    "dataset": args.data,
                    "aggregation": "category-weighted",
                },
            )
        )
    if not reports:
        raise HarnessError("nothing to report: pass --reports and/or an aggregation input")
    os.makedirs(args.out_dir, exist_ok=True)
    structured = os.path.join(args.out_dir, "report.json")
    tabular = os.path.join(args.out_dir, "report.csv")
    export_structured(reports, structured)
    export_tabular(reports, tabular)
    written = [structured, tabular]
    if not args.no_figures:
        fig_dir = os.path.join(args.out_dir, "figures")
        for i, report in enumerate(reports):
            stem = str(report.meta.get("candidate", report.meta.get("checkpoint", f"report{i}")))
            stem = os.path.basename(stem).replace("/", "_") or f"report{i}"
            written += report_figures(report, fig_dir, f"{i:02d}-{stem}")
    for path in written:
        print(path)
    return 0


def _cmd_selfcheck(_args) -> int:
    return 0 if run_selfcheck() else 1


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
    "selfcheck": _cmd_selfcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except (TrainingDivergedError, ConvergenceError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, ModelError, MetricError, HarnessError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
