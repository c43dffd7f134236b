#!/usr/bin/env python3
"""Protocol comparison under the grown-network shift.

Runs every protocol (fixed-probability baseline, frozen network, retrained
network, teacher-only, distillation-trained, and the measuring/switching
hybrid) over a common set of seeds, sharing one pretrained network per seed,
then prints recovery and resilience summaries and writes the per-episode
CSVs, summary JSONs, and resilience curves into the output directory.

    python scripts/run_comparison.py --seeds 0 1 2 3 4 --out results/comparison
"""
import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from maclab.harness import Scenario, emit_results, pretrain_base_params, run_scenario

PROTOCOLS = ("saloha", "npm-frozen", "npm", "tpm", "t2npm", "t3npm")
EARLY_WINDOW = 30


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--out", type=Path, default=Path("results/comparison"))
    parser.add_argument("--episodes", type=int, default=None,
                        help="override the scenario's episode count")
    args = parser.parse_args(argv)

    base = Scenario(name="comparison")
    if args.episodes is not None:
        base = replace(base, episodes=args.episodes)

    records = {p: {} for p in PROTOCOLS}
    for seed in args.seeds:
        t0 = time.perf_counter()
        pretrained = pretrain_base_params(
            base.pre, base.train, base.reward,
            seed=seed, episodes=base.pretrain_episodes, shape=base.shape)
        for protocol in PROTOCOLS:
            scenario = replace(base, protocol=protocol, seed=seed)
            record = run_scenario(scenario, pretrained=pretrained)
            records[protocol][seed] = record
            emit_results(record, args.out)
        print(f"seed {seed}: done in {time.perf_counter() - t0:.0f}s")

    def seed_mean(fn, protocol):
        return float(np.mean([fn(records[protocol][s]) for s in args.seeds]))

    summary = {}
    print(f"\n{'protocol':<12}{'goodput':>9}{'early':>9}{'meta-R':>9}{'switch':>9}")
    for protocol in PROTOCOLS:
        overall = seed_mean(lambda r: np.mean(r.goodputs), protocol)
        early = seed_mean(lambda r: np.mean(r.goodputs[:EARLY_WINDOW]), protocol)
        meta = seed_mean(lambda r: r.meta_resilience, protocol)
        switches = [records[protocol][s].switch_episode for s in args.seeds]
        switch = ("-" if all(e is None for e in switches)
                  else f"{np.mean([e for e in switches if e is not None]):.0f}")
        print(f"{protocol:<12}{overall:>9.4f}{early:>9.4f}{meta:>9.4f}{switch:>9}")
        summary[protocol] = {
            "mean_goodput": overall,
            "early_goodput": early,
            "meta_resilience": meta,
            "switch_episodes": switches,
        }

    args.out.mkdir(parents=True, exist_ok=True)
    summary_path = args.out / "comparison_summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump({"seeds": list(args.seeds), "protocols": summary}, fh, indent=1)
    print(f"\nwrote {summary_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
