"""Held-out first- vs final-layer scores on the synthetic consistency corpus."""

import argparse
import logging
import time

import numpy as np

from nereasoner.experiments import ambiguous_recall, consistency_run, override_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--probe", action="store_true", help="also run the manual-override probe")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    rows = []
    for seed in args.seeds:
        t0 = time.time()
        run = consistency_run(seed)
        rows.append((run.first.recall, run.final.recall, run.first.f1, run.final.f1))
        print(f"seed {seed}: recall {run.first.recall:.2f} -> {run.final.recall:.2f}  "
              f"F1 {run.first.f1:.2f} -> {run.final.f1:.2f}  "
              f"ambiguous recovered {100 * ambiguous_recall(run, -1):.1f}%  ({time.time() - t0:.0f}s)")
        if args.probe:
            cases = override_probe(run, max_cases=10**6)
            print(f"  override probe: {sum(c.reverts for c in cases)}/{len(cases)} revert, "
                  f"{sum(c.preserved for c in cases)}/{len(cases)} keep")
    m = np.mean(rows, axis=0)
    print(f"mean: recall {m[0]:.2f} -> {m[1]:.2f}  F1 {m[2]:.2f} -> {m[3]:.2f}")


if __name__ == "__main__":
    main()
