#!/usr/bin/env python3
"""Timing sweep over dataset sizes for the four models.

Simulates uniform binomial surveys from a synthetic two-bump surface and
runs fit + predict per (model, n), single-threaded, writing bench.json
and the truth raster into --out. Exact-GP cells above --gp-cap are
skipped, mirroring the protocol that leaves the slowest model out of the
largest runs.

Usage:
    python scripts/run_scaling_bench.py --out bench_out \
        --sizes 500 1000 2000 --models gp sprf frk lgm --seed 7
"""

import argparse
import json
import os
import sys
from pathlib import Path


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--sizes", type=int, nargs="+", default=[500, 1000, 2000])
    parser.add_argument("--models", nargs="+", default=["gp", "sprf", "frk", "lgm"])
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--gp-cap", type=int, default=4000)
    parser.add_argument("--gp-rounds", type=int, default=3)
    args = parser.parse_args()

    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")

    from prevmap.cli import bench_scaling
    from prevmap.geodata import Location, write_asc
    from prevmap.simkit import two_bump_raster

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raster = two_bump_raster((Location(0, 0), Location(8, 8)), 0.1)
    write_asc(raster, out / "truth.asc")

    cfg = {
        "gp_exact_cap": args.gp_cap,
        "gp": {
            "cov": {"family": "exponential", "variance": 1.0, "range": 1.0,
                    "metric": "euclidean"},
            "boosting": {"rounds": args.gp_rounds, "learning_rate": 0.3},
            "early_stop": True,
        },
        "sprf": {"num_trees": 500},
        "frk": {"nres": 2, "bau_cell_size": 0.25, "n_mc": 400},
        "lgm": {"lattice_cell": 0.5, "margin": 2.0},
    }
    rows = bench_scaling(args.models, sorted(args.sizes), raster, args.seed, cfg)
    with (out / "bench.json").open("w") as fh:
        json.dump({"runs": rows, "seed": args.seed}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for row in rows:
        status = row.get("skipped") or row.get("error") or f"{row.get('wall_time_s', 0):.1f}s"
        print(f"{row['model']:>6} n={row['n_records']:>6}  {status}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
