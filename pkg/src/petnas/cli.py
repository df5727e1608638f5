"""Command-line entry point: ``petnas search | baseline | report``.

Output directory layout (``--out``)::

    config.json            fully resolved configuration echo
    spec_seed<N>.json      architecture spec per seed
    history_seed<N>.csv    per-step training history (stage, step, lr, loss, accuracy)
    scores_seed<N>.csv     criterion score per prune op (search only)
    metrics.csv            one row per seed
    summary.json           medians across seeds

Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import RunConfig, load_config
from .criterion import CRITERION_MODES, write_scores_csv
from .errors import ConfigError, DivergenceError, InputError, UsageError
from .pipeline import ArchitectureSpec, architecture_map, run_baseline, run_nas
from .train import write_history_csv

log = logging.getLogger("petnas")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
BASELINE_KINDS = {"random": "random_mask", "last_step": "last_step_criterion", "full": "full"}
METRIC_FIELDS = ["seed", "selection", "param_count", "budget", "initial_param_count",
                 "val_accuracy", "val_loss", "train_loss"]


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _resolve(args) -> RunConfig:
    config = load_config(args.config)
    return config.with_overrides(seeds=args.seeds, budget=args.budget, criterion=args.criterion,
                                 lora_init=args.init)


def _one_seed(config: RunConfig, selection: str, seed: int):
    if selection == "search":
        return run_nas(config, seed)
    return run_baseline(config, selection, seed)


def _run_seeds(config: RunConfig, selection: str, jobs: int):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_one_seed, config, selection, s) for s in config.seeds]
            return [f.result() for f in futures]
    return [_one_seed(config, selection, s) for s in config.seeds]


def _write_outputs(out: Path, config: RunConfig, selection: str, results) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = []
    for r in results:
        (out / f"spec_seed{r.seed}.json").write_text(r.spec.to_json())
        write_history_csv(r.history, out / f"history_seed{r.seed}.csv")
        if selection == "search":
            write_scores_csv(r.ops, out / f"scores_seed{r.seed}.csv")
        rows.append({
            "seed": r.seed, "selection": r.spec.selection, "param_count": r.spec.param_count,
            "budget": r.spec.budget, "initial_param_count": r.spec.initial_param_count,
            "val_accuracy": repr(r.validation.accuracy), "val_loss": repr(r.validation.loss),
            "train_loss": repr(r.train_loss),
        })
        print(f"seed {r.seed}: {r.spec.selection} val_accuracy={r.validation.accuracy:.4f} "
              f"val_loss={r.validation.loss:.4f} params={r.spec.param_count}/{r.spec.initial_param_count}")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    summary = {
        "selection": results[0].spec.selection,
        "seeds": [r.seed for r in results],
        "median_val_accuracy": statistics.median(r.validation.accuracy for r in results),
        "median_val_loss": statistics.median(r.validation.loss for r in results),
        "param_count": [r.spec.param_count for r in results],
        "budget": config.resolved_budget(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"median val_accuracy over {len(results)} seeds: {summary['median_val_accuracy']:.4f}")
    return summary


def cmd_search(args) -> int:
    config = _resolve(args)
    if config.resolved_budget() >= config.initial_param_count():
        log.warning("budget %d >= initial parameter count %d: no pruning performed",
                    config.resolved_budget(), config.initial_param_count())
    results = _run_seeds(config, "search", args.jobs)
    _write_outputs(Path(args.out), config, "search", results)
    return EXIT_OK


def cmd_baseline(args) -> int:
    config = _resolve(args)
    results = _run_seeds(config, BASELINE_KINDS[args.kind], args.jobs)
    _write_outputs(Path(args.out), config, BASELINE_KINDS[args.kind], results)
    return EXIT_OK


def cmd_report(args) -> int:
    specs = [ArchitectureSpec.load(p) for p in args.specs]
    rows = architecture_map(specs)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, ["layer", "site_name", "fraction_kept"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({**row, "fraction_kept": repr(row["fraction_kept"])})
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petnas", description="Prune-based search over parameter-efficient tuning architectures.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log pipeline stages")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", type=_parse_seeds, help="comma-separated run seeds")
        p.add_argument("--budget", type=int, help="parameter budget override")
        p.add_argument("--criterion", choices=CRITERION_MODES)
        p.add_argument("--init", choices=("balanced", "original"), help="low-rank init scheme")
        p.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel processes")

    p = sub.add_parser("search", help="prune-based architecture search")
    run_flags(p)
    p.set_defaults(func=cmd_search)
    p = sub.add_parser("baseline", help="comparison runs with the same retrain protocol")
    p.add_argument("kind", choices=sorted(BASELINE_KINDS))
    run_flags(p)
    p.set_defaults(func=cmd_baseline)
    p = sub.add_parser("report", help="average kept fraction per (layer, site) over specs")
    p.add_argument("specs", nargs="+", help="architecture spec JSON files")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, InputError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
