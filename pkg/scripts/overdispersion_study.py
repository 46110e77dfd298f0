#!/usr/bin/env python3
"""Effect of logit-scale noise on the lattice-GMRF binomial fit.

Repeats the noise-injection experiment: binomial surveys are drawn from a
smooth surface with Gaussian logit noise of increasing standard deviation,
a binomial-response lattice model is fitted to each level, and the fitted
practical range, field variance, and intercept are reported. A
Beta-binomial fit on the noisiest level shows the overdispersion fix.

Usage:
    python scripts/overdispersion_study.py --out study_out \
        --noise 0 0.4 1.2 --sites 300 --seed 77
"""

import argparse
import json
import sys
from pathlib import Path


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.4, 1.2])
    parser.add_argument("--sites", type=int, default=300)
    parser.add_argument("--seed", type=int, default=77)
    args = parser.parse_args()

    from prevmap import lgm, simkit
    from prevmap.geodata import Location, write_asc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bumps = ((0.28, 0.62, 0.55, 0.13), (0.70, 0.30, 0.45, 0.10), (0.75, 0.78, 0.35, 0.08))
    raster = simkit.two_bump_raster(
        (Location(0, 0), Location(8, 8)), 0.1, base=0.04, bumps=bumps
    )
    write_asc(raster, out / "truth.asc")

    rows = []
    noisiest = None
    for sd in args.noise:
        sim = simkit.simulate(
            simkit.SimConfig(raster=raster, uniform_count=args.sites,
                             tests_per_site=85, noise_sd=sd, rng_seed=args.seed)
        )
        fit = lgm.fit(sim.records, lgm.LgmSpec(lattice_cell=0.5, margin=3.0))
        diag = lgm.range_diagnostic(fit)
        rows.append(
            {
                "noise_sd": sd,
                "response": "binomial",
                "practical_range": diag["practical_range"],
                "field_variance": diag["field_variance"],
                "intercept": fit.beta0,
            }
        )
        noisiest = (sd, sim.records)
        print(
            f"noise {sd:>4}: range {diag['practical_range']:.3f}  "
            f"variance {diag['field_variance']:.3f}  intercept {fit.beta0:.3f}"
        )

    sd, records = noisiest
    fit_bb = lgm.fit(records, lgm.LgmSpec(lattice_cell=0.5, margin=3.0,
                                          response="betabinomial"))
    diag = lgm.range_diagnostic(fit_bb)
    rows.append(
        {
            "noise_sd": sd,
            "response": "betabinomial",
            "practical_range": diag["practical_range"],
            "field_variance": diag["field_variance"],
            "intercept": fit_bb.beta0,
            "phi": fit_bb.theta_hat["phi"],
        }
    )
    print(
        f"beta-binomial at noise {sd}: range {diag['practical_range']:.3f}  "
        f"phi {fit_bb.theta_hat['phi']:.2f}"
    )
    with (out / "study.json").open("w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
