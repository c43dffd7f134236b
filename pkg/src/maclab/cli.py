"""Command-line entry points for the protocol laboratory.

Every run is described by a scenario (optionally loaded from a JSON config
file and overridden by flags) and produces a per-episode CSV, a summary JSON,
and a resilience-curve CSV in the output directory. Reruns with identical
inputs produce identical CSV bytes.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .harness import (
    Scenario,
    adapt_params,
    build_teacher_backend,
    emit_curve,
    emit_results,
    load_scenario,
    pretrain_base_params,
    resolve_instruction,
    run_scenario,
    save_scenario,
    table1_matrix,
)
from .switch import sweep_tm

logger = logging.getLogger(__name__)

DEFAULT_SWEEP_GRID = (0, 24, 48, 72, 96, 120, 144)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="scenario JSON file (flags below override it)")
    parser.add_argument("--seeds", type=int, nargs="+", default=None,
                        help="seeds to run (default: the scenario's seed)")
    parser.add_argument("--out", type=Path, default=Path("results"),
                        help="output directory")
    parser.add_argument("--name", default=None, help="scenario name for output files")
    parser.add_argument("--episodes", type=int, default=None)
    parser.add_argument("--shift-episode", type=int, default=None,
                        help="episode index at which the environment shifts")
    parser.add_argument("--pretrain-episodes", type=int, default=None)
    parser.add_argument("--instruction", default=None,
                        help="'default', 'seed', or a path to an instruction text file")
    parser.add_argument("--teacher", choices=("scripted", "remote", "fixture"),
                        default=None)
    parser.add_argument("--remote-url", default=None,
                        help="base URL of the chat-completions endpoint")
    parser.add_argument("--model", default=None, help="remote model identifier")
    parser.add_argument("--token-env", default=None,
                        help="environment variable holding the API token")
    parser.add_argument("--fixture", default=None,
                        help="recorded teacher responses for offline replay")
    parser.add_argument("--miss-rate", type=float, default=None,
                        help="scripted teacher: chance a state gets an unparseable answer")
    parser.add_argument("--plots", action="store_true", help="also render SVG plots")
    parser.add_argument("-v", "--verbose", action="store_true")


def _base_scenario(args) -> Scenario:
    scenario = load_scenario(args.config) if args.config else Scenario()
    updates = {}
    if args.name is not None:
        updates["name"] = args.name
    if args.episodes is not None:
        updates["episodes"] = args.episodes
    if getattr(args, "shift_episode", None) is not None:
        updates["shift_episode"] = args.shift_episode
    if getattr(args, "pretrain_episodes", None) is not None:
        updates["pretrain_episodes"] = args.pretrain_episodes
    if args.instruction is not None:
        updates["instruction"] = args.instruction

    teacher_updates = {}
    if args.teacher is not None:
        teacher_updates["kind"] = args.teacher
    if args.remote_url is not None:
        teacher_updates["base_url"] = args.remote_url
    if args.model is not None:
        teacher_updates["model"] = args.model
    if args.token_env is not None:
        teacher_updates["token_env"] = args.token_env
    if args.fixture is not None:
        teacher_updates["fixture_path"] = args.fixture
    if args.miss_rate is not None:
        teacher_updates["miss_rate"] = args.miss_rate
    if teacher_updates:
        updates["teacher"] = replace(scenario.teacher, **teacher_updates)

    if updates:
        scenario = replace(scenario, **updates)
    return scenario


def _seed_list(args, scenario: Scenario) -> list:
    return list(args.seeds) if args.seeds is not None else [scenario.seed]


def _run_protocol(args, protocol: str) -> int:
    scenario = replace(_base_scenario(args), protocol=protocol)
    if getattr(args, "tm", None) is not None:
        scenario = replace(scenario, switch=replace(scenario.switch, t_m=args.tm))
    for seed in _seed_list(args, scenario):
        record = run_scenario(replace(scenario, seed=seed))
        paths = emit_results(record, args.out, plots=args.plots)
        summary = record.summary()
        line = (f"{record.scenario} {protocol} seed {seed}: "
                f"mean goodput {summary['mean_goodput']:.4f}, "
                f"meta-resilience {summary['meta_resilience']:.4f}")
        if record.switch_episode is not None:
            line += f", switched at episode {record.switch_episode}"
        print(line)
        logger.info("wrote %s", paths["episodes"])
    return 0


def _cmd_sweep(args) -> int:
    scenario = _base_scenario(args)
    seeds = args.seeds if args.seeds is not None else [0, 1, 2, 3, 4]
    grid = tuple(args.grid) if args.grid else DEFAULT_SWEEP_GRID
    backend = build_teacher_backend(scenario.teacher)
    instruction = resolve_instruction(scenario.instruction)
    post = scenario.post

    cache = {}

    def initial_params_fn(seed):
        if seed not in cache:
            base = pretrain_base_params(
                scenario.pre, scenario.train, scenario.reward, seed=seed,
                episodes=scenario.pretrain_episodes, shape=scenario.shape)
            cache[seed] = adapt_params(base, post, seed)
        return cache[seed]

    result = sweep_tm(
        post, backend, instruction,
        initial_params_fn=initial_params_fn,
        train_cfg=scenario.train, reward_cfg=scenario.reward,
        distill_cfg=scenario.distill, grid=grid, seeds=tuple(seeds),
        alpha=scenario.switch.alpha, episodes=scenario.episodes)

    args.out.mkdir(parents=True, exist_ok=True)
    rows_path = args.out / f"{scenario.name}_sweep.csv"
    with open(rows_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("T_M", "seed", "switch_episode", "meta_resilience"))
        for row in result.rows:
            switch = "" if row["switch_episode"] is None else row["switch_episode"]
            writer.writerow([row["t_m"], row["seed"], switch,
                             repr(row["meta_resilience"])])
    summary_path = args.out / f"{scenario.name}_sweep_summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump({"means": {str(k): v for k, v in result.means.items()},
                   "best_t_m": result.best_t_m}, fh, indent=1)

    for t_m in grid:
        print(f"T_M={t_m:>3}: mean meta-resilience {result.means[t_m]:.4f}")
    print(f"best T_M: {result.best_t_m}")
    logger.info("wrote %s and %s", rows_path, summary_path)
    return 0


def _cmd_table1(args) -> int:
    scenario = _base_scenario(args)
    seeds = args.seeds if args.seeds is not None else [0, 1, 2, 3, 4]
    table = table1_matrix(seeds, base=scenario, tail_episodes=args.tail)

    args.out.mkdir(parents=True, exist_ok=True)
    json_path = args.out / f"{scenario.name}_table1.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=1)
    csv_path = args.out / f"{scenario.name}_table1.csv"
    columns = list(table)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protocol"] + columns)
        for label in ("saloha", "frozen", "retrained"):
            writer.writerow([label] + [repr(table[c][label]) for c in columns])

    width = max(len(c) for c in columns) + 2
    print("protocol   " + "".join(c.rjust(width) for c in columns))
    for label in ("saloha", "frozen", "retrained"):
        cells = "".join(f"{table[c][label]:.2f}".rjust(width) for c in columns)
        print(f"{label:<11}" + cells)
    logger.info("wrote %s and %s", json_path, csv_path)
    return 0


def _cmd_curve(args) -> int:
    with open(args.input, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if "goodput" not in (reader.fieldnames or ()):
            raise SystemExit(f"{args.input}: no 'goodput' column")
        goodputs = [float(row["goodput"]) for row in reader]
    if not goodputs:
        raise SystemExit(f"{args.input}: no episode rows")
    output = args.output or Path(args.input).with_suffix("").name + "_curve.csv"
    emit_curve(goodputs, output)
    values = np.asarray(goodputs)
    print(f"{len(goodputs)} episodes, mean goodput {values.mean():.4f}; wrote {output}")
    return 0


def _cmd_init_config(args) -> int:
    path = args.path
    if path.exists() and not args.force:
        raise SystemExit(f"{path} already exists (use --force to overwrite)")
    save_scenario(Scenario(), path)
    print(f"wrote default scenario to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maclab",
        description="Multiple-access protocol laboratory: trained, teacher-driven, "
                    "and hybrid uplink protocols under environmental shifts.")
    sub = parser.add_subparsers(dest="command", required=True)

    protocol_commands = (
        ("train-npm", "npm", "retrain the network protocol after the shift"),
        ("run-tpm", "tpm", "drive every slot with the text teacher"),
        ("train-t2npm", "t2npm", "retrain with teacher distillation"),
        ("run-t3npm", "t3npm", "distill, measure, and switch when the student wins"),
        ("baseline", "saloha", "fixed transmit-probability baseline"),
    )
    for command, protocol, help_text in protocol_commands:
        p = sub.add_parser(command, help=help_text)
        _add_common(p)
        if command == "run-t3npm":
            p.add_argument("--tm", type=int, default=None,
                           help="measurement TTIs per episode (multiple of 12)")
        p.set_defaults(func=_run_protocol, protocol=protocol)

    p = sub.add_parser("sweep-tm", help="meta-resilience across measurement budgets")
    _add_common(p)
    p.add_argument("--grid", type=int, nargs="+", default=None,
                   help=f"measurement budgets to sweep (default {DEFAULT_SWEEP_GRID})")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("table1", help="goodput comparison across environmental shifts")
    _add_common(p)
    p.add_argument("--tail", type=int, default=20,
                   help="episodes of the retrained run to average")
    p.set_defaults(func=_cmd_table1)

    p = sub.add_parser("curve", help="resilience curve from a per-episode CSV")
    p.add_argument("input", help="per-episode CSV produced by a run")
    p.add_argument("--output", default=None, help="curve CSV path")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=_cmd_curve)

    p = sub.add_parser("init-config", help="write a default scenario config file")
    p.add_argument("path", type=Path, nargs="?", default=Path("scenario.json"))
    p.add_argument("--force", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=_cmd_init_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "protocol"):
        return args.func(args, args.protocol)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
