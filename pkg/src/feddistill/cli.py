"""Command-line entry point: ``feddistill {partition,run,cost,sweep}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ARMS, ConfigError, ExperimentConfig, load_config, validate
from .data import write_manifest
from .harness import METHOD_NAMES, cost_calculator, prepare, run_repeated, summary_csv, sweep, table1_costs
from .metrics import COST_COLUMNS, write_cost_csv
from .nn import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--arm", choices=ARMS)
    p.add_argument("--devices", type=int, help="number of devices M")
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int, help="thread pool size for device work")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="write the partition manifest only")
    _common(p)
    p = sub.add_parser("run", help="run one experiment arm")
    _common(p)
    p = sub.add_parser("sweep", help="grid over devices, redundant and target label counts")
    _common(p)
    p.add_argument("--devices-grid", type=_int_list, default=[2, 4, 6, 8, 10])
    p.add_argument("--redundant-grid", type=_int_list)
    p.add_argument("--targets-grid", type=_int_list)

    p = sub.add_parser("cost", help="communication cost without training")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--arm", choices=ARMS, help="one arm; omit for all four table rows")
    p.add_argument("--rounds", type=int)
    p.add_argument("--labels", type=int)
    p.add_argument("--model-params", type=int)
    p.add_argument("--generator-params", type=int)
    p.add_argument("--seed-samples", type=int)
    p.add_argument("--pixels", type=int)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    for flag, key in (("seed", "seed"), ("arm", "arm"), ("repeats", "repeats"), ("workers", "workers"),
                      ("out", "output_dir"), ("devices", "partition.num_devices")):
        v = getattr(args, flag, None)
        if v is not None:
            changes[key] = v
    cfg = cfg.replace(**changes) if changes else cfg
    validate(cfg)
    return cfg


def _cost(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.arm is None and all(getattr(args, k) is None for k in
                                ("rounds", "labels", "model_params", "generator_params", "seed_samples", "pixels")):
        rows = table1_costs(cfg)
    else:
        a, f = cfg.accounting, cfg.faug
        default_seeds = (cfg.partition.num_target_labels + f.redundant_count) * f.seeds_per_label
        arms = [args.arm] if args.arm else ["fd-faug", "fd", "fl-faug", "fl"]
        rows = []
        for arm in arms:
            ledger = cost_calculator(
                arm,
                args.rounds if args.rounds is not None else cfg.training.global_rounds,
                args.labels if args.labels is not None else cfg.corpus.num_labels,
                args.model_params if args.model_params is not None else a.model_params,
                args.generator_params if args.generator_params is not None else a.generator_params,
                args.seed_samples if args.seed_samples is not None else default_seeds,
                args.pixels if args.pixels is not None else a.pixels_per_sample,
            )
            rows.append((METHOD_NAMES[arm], ledger))
    print(",".join(COST_COLUMNS))
    for method, ledger in rows:
        r = ledger.as_row()
        print(f"{method},{r['logits']},{r['model_parameters']},{r['samples']},{r['total_bits']}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_cost_csv(Path(args.out) / "cost.csv", rows)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "cost":
            return _cost(args)
        cfg = _config(args)
        out = Path(cfg.output_dir)
        if args.command == "partition":
            prep = prepare(cfg)
            out.mkdir(parents=True, exist_ok=True)
            write_manifest(out / "partition_manifest.json", prep.datasets, prep.spec)
            print(out / "partition_manifest.json")
        elif args.command == "run":
            _, summary = run_repeated(cfg, out)
            sys.stdout.write(summary_csv([summary]))
        else:
            rows = sweep(cfg, args.devices_grid, args.redundant_grid, args.targets_grid, out)
            sys.stdout.write(summary_csv(rows))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
