"""Seed sweep at desk scale: CL, FL and noisy-link FL against LS / LMMSE.

Writes one CSV row per (seed, method, test SNR). Five seeds take about
twelve minutes on one core.

    python scripts/desk_sweep.py --seeds 0 1 2 3 4 --out out/desk_sweep.csv
"""

import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from irsfed.experiments import desk_trial

log = logging.getLogger("desk_sweep")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--out", type=Path, default=Path("out/desk_sweep.csv"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rows = []
    for seed in args.seeds:
        result = desk_trial(seed)
        log.info("seed %d done in %.0f s, diverged: %s", seed, sum(result.seconds.values()), result.diverged or "none")
        for method, curve in result.nmse.items():
            rows += [(seed, method, snr, nmse) for snr, nmse in curve.items()]

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "method", "test_snr_db", "nmse"])
        writer.writerows((s, m, f"{snr:g}", repr(v)) for s, m, snr, v in rows)

    methods = sorted({m for _, m, _, _ in rows})
    snrs = sorted({snr for _, _, snr, _ in rows})
    print("method  " + "  ".join(f"{s:>8g}" for s in snrs))
    for m in methods:
        means = [np.mean([v for _, mm, ss, v in rows if mm == m and ss == s]) for s in snrs]
        print(f"{m:<7} " + "  ".join(f"{v:8.4f}" for v in means))


if __name__ == "__main__":
    main()
