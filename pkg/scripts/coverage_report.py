"""Interval coverage of calibrated and plug-in forecasts on simulated fleets."""

import argparse
import json

from fleetlife.config import load_config
from fleetlife.simulation import CoverageConfig, coverage_study, population_coverage, reference_scenario, scenario_from_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    sub = ap.add_subparsers(dest="kind", required=True)
    ind = sub.add_parser("individual", help="per-unit remaining-life intervals over many fleets")
    ind.add_argument("--scenario", default="configs/coverage_small.toml")
    ind.add_argument("--replications", type=int, default=100)
    ind.add_argument("--B", type=int, default=500)
    ind.add_argument("--units", type=int, default=10)
    ind.add_argument("--jobs", type=int, default=1)
    pop = sub.add_parser("population", help="cumulative failure-count bands for the reference fleet")
    pop.add_argument("--B", type=int, default=1000)
    pop.add_argument("--futures", type=int, default=500)
    for p in (ind, pop):
        p.add_argument("--level", type=float, default=0.90)
        p.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.kind == "individual":
        sc = scenario_from_config(load_config(args.scenario))
        cc = CoverageConfig(replications=args.replications, B=args.B, level=args.level,
                            units_per_fleet=args.units, seed=args.seed, jobs=args.jobs)
        print(json.dumps(coverage_study(sc, cc).summary(), indent=1))
    else:
        res = population_coverage(reference_scenario(), B=args.B, futures=args.futures, level=args.level, seed=args.seed)
        print(json.dumps({k: res[k] for k in ("calibrated_date_coverage", "naive_date_coverage")}, indent=1))


if __name__ == "__main__":
    main()
