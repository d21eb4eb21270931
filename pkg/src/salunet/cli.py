"""``salunet`` command line: synth, filter, train, evaluate, compare, report, experiment.

Options may also come from a YAML or JSON file given with ``--config``; keys
are option names with dashes or underscores, and flags on the command line win.
Exit status is 0 on success, 1 on invalid input and 2 when a run aborts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from .dataset import N_FOLDS, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .experiment import ExperimentConfig, compare_replicates, run_experiment
from .model import VARIANTS
from .pipeline import (
    compare_per_image,
    evaluate_run,
    format_summary_table,
    report_run,
    train_run,
    write_comparison,
)
from .saliency_filter import ConfidenceParams, filter_dataset, write_reports
from .trainer import TrainConfig, TrainingAborted

log = logging.getLogger("salunet")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here that status means a run abort
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _filter_options(p: argparse.ArgumentParser) -> None:
    d = ConfidenceParams()
    g = p.add_argument_group("confidence filter")
    g.add_argument("--threshold", type=float, default=d.threshold, help="saliency binarization level")
    g.add_argument("--a1", type=float, default=d.a1, help="rule 1 ratio of top to second cumulative intensity")
    g.add_argument("--a2", type=float, default=d.a2, help="rule 2 ratio of top to second area")
    g.add_argument("--a3", type=float, default=d.a3, help="rule 2 minimum mean intensity")
    g.add_argument("--a4", type=float, default=d.a4, help="rule 3 minimum mean intensity")


def _params(args) -> ConfidenceParams:
    return ConfidenceParams(threshold=args.threshold, a1=args.a1, a2=args.a2, a3=args.a3, a4=args.a4)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="salunet", description="Salient-attention U-Net segmentation pipeline.")
    parser.add_argument("--config", type=Path, help="YAML or JSON file with option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--quality-mix", type=float, nargs=4, default=[0.7, 0.2, 0.1, 0.0],
                   metavar=("SAT", "MOD", "LOW", "POOR"))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("filter", help="drop low-confidence saliency maps")
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, required=True, help="directory for kept_ids.txt and confidence.csv")
    _filter_options(p)

    p = sub.add_parser("train", help="cross-validate one or more variants")
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", nargs="+", choices=VARIANTS, default=["unet-sa"])
    p.add_argument("--ids", type=Path, help="train only on ids listed in this file (e.g. kept_ids.txt)")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--folds", type=int, default=N_FOLDS)
    p.add_argument("--seed", type=int, default=0, help="weight init and shuffling seed")
    p.add_argument("--fold-seed", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    _filter_options(p)

    p = sub.add_parser("evaluate", help="score a training run on its test folds")
    p.add_argument("run", type=Path)
    p.add_argument("--dataset", type=Path, help="override the dataset root recorded in the run")
    p.add_argument("--variant", nargs="+", choices=VARIANTS)

    p = sub.add_parser("compare", help="paired Wilcoxon tests between two per-image CSVs")
    p.add_argument("csv_a", type=Path)
    p.add_argument("csv_b", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("report", help="write image panels and an HTML summary")
    p.add_argument("run", type=Path)
    p.add_argument("--dataset", type=Path)

    d = ExperimentConfig()
    p = sub.add_parser("experiment", help="synthetic U-Net vs U-Net-SA experiment")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=list(d.seeds))
    p.add_argument("--count", type=int, default=d.count)
    p.add_argument("--size", type=int, default=d.size)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--replicate-of", type=Path, help="compare against an earlier experiment directory")
    return parser


def _load_config(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping of option names to values")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv):
    argv = list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    config_path = pre.parse_known_args(argv)[0].config
    parser = build_parser()
    if config_path is not None:
        command = next((a for a in argv if a in COMMANDS), None)
        if command is not None:
            _apply_config(parser, command, config_path)
    return parser.parse_args(argv)


def _apply_config(parser: argparse.ArgumentParser, command: str, path: Path) -> None:
    """Turn file values into defaults of ``command`` so that flags still win."""
    overrides = _load_config(path)
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    unknown = sorted(set(overrides) - set(actions))
    if unknown:
        raise ValueError(f"{path}: unknown options for {command}: {', '.join(unknown)}")
    for dest, value in overrides.items():
        action = actions[dest]
        # string defaults go through the option's type conversion
        action.default = str(value) if isinstance(value, (str, Path)) else value
        action.required = False
        if not action.option_strings:
            action.nargs = "?"


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(count=args.count, size=args.size, quality_mix=tuple(args.quality_mix), seed=args.seed)
    samples = generate_synthetic(cfg)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    params = _params(args)
    kept, reports = filter_dataset(load_dataset(args.dataset), params)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "kept_ids.txt").write_text("".join(f"{s.id}\n" for s in kept))
    write_reports(reports, args.out / "confidence.csv")
    (args.out / "filter_params.json").write_text(json.dumps(asdict(params), indent=1) + "\n")
    print(f"kept {len(kept)} removed {len(reports) - len(kept)} of {len(reports)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, patience=args.patience,
                      max_epochs=args.max_epochs, seed=args.seed)
    manifest = train_run(
        args.dataset, args.out, args.variant,
        spec_kwargs={"input_side": args.size, "init_seed": args.seed},
        train_config=cfg, fold_seed=args.fold_seed, n_folds=args.folds,
        filter_params=_params(args), ids_file=args.ids, config_path=args.config, resume=args.resume,
    )
    print(f"trained {', '.join(args.variant)}; manifest at {Path(manifest.out_dir) / 'manifest.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    summary = evaluate_run(args.run, dataset_root=args.dataset, variants=args.variant)
    print(format_summary_table(summary), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = compare_per_image(args.csv_a, args.csv_b)
    write_comparison(rows, args.out)
    for r in rows:
        print(f"{r['metric']:>4}  {r.get('display') or 'n/a: ' + r['note']}")
    return EXIT_OK


def cmd_report(args) -> int:
    result = report_run(args.run, dataset_root=args.dataset)
    print(f"{result['panels']} panels; summary at {result['index']}")
    for p in result["problems"]:
        print(f"missing: {p}", file=sys.stderr)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig(count=args.count, size=args.size, seeds=tuple(args.seeds),
                           max_epochs=args.max_epochs, patience=args.patience)
    res = run_experiment(args.out, cfg)
    print(f"U-Net-SA mean DSC {res.mean_sa_dsc:.4f} (>= {cfg.min_sa_dsc}: {res.dsc_ok})")
    print(f"FPR within margin in {res.fpr_wins}/{len(cfg.seeds)} seeds ({res.fpr_ok})")
    print(f"wall time {res.wall_time_s / 60:.1f} min ({res.time_ok})")
    if args.replicate_of is not None:
        diffs = compare_replicates(args.replicate_of, args.out)
        print("replicate identical" if not diffs else "replicate differs:\n  " + "\n  ".join(diffs))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "filter": cmd_filter,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "report": cmd_report,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
