"""Full-scale study grid (manual, long-running).

Reruns every (design, error distribution, N, T, tau) cell at 200
replications and writes one summary block per cell. This is the
long-running reference mode -- expect hours of wall time at desk scale;
the CI-friendly acceptance runs live in tests/test_acceptance.py instead.

    python3 demos/06_full_table_reproduction.py --out tables/ [--reps 200]
    python3 demos/06_full_table_reproduction.py --only dgp1:normal --reps 50
"""

import argparse
import itertools
from pathlib import Path

from panelqr import DGPConfig, run_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="tables")
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--threads", type=int, default=2)
    ap.add_argument("--seed", type=int, default=20240901)
    ap.add_argument("--only", default=None,
                    help="restrict to one dgp:errors cell, e.g. dgp1:t5")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = itertools.product(
        ("dgp1", "dgp2"), ("normal", "t5", "chi2"),
        (50, 100), (50, 100), (0.25, 0.5, 0.75),
    )
    for dgp, errors, n, t, tau in cells:
        if args.only and f"{dgp}:{errors}" != args.only:
            continue
        cfg = DGPConfig(dgp=dgp, n_subjects=n, n_times=t, tau=tau,
                        error_dist=errors, seed=args.seed)
        report = run_study(cfg, args.reps, threads=args.threads)
        stem = f"{dgp}_{errors}_N{n}_T{t}_tau{tau}"
        report.records_to_csv(out / f"{stem}_records.csv")
        report.aggregate_to_csv(out / f"{stem}_aggregate.csv")
        print(f"== {stem}")
        print(report.summary_text())
        print(flush=True)


if __name__ == "__main__":
    main()
