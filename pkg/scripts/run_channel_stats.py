"""Channel frequencies on the rosenbrock and GP suites, with parallel-update fractions.

    python scripts/run_channel_stats.py --inits 5 --targets 40 --out results/channels
"""

import argparse
import json
from pathlib import Path

import numpy as np

from chaninf.studies import channel_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10, help="grid points per axis")
    ap.add_argument("--hidden", type=int, default=4)
    ap.add_argument("--targets", type=int, default=40, help="GP target draws per scale")
    ap.add_argument("--inits", type=int, default=5, help="initialisations per GP target")
    ap.add_argument("--rosen-seeds", type=int, default=200)
    ap.add_argument("--scales", type=float, nargs="+", default=[0.1, 0.5, 2.0, 10.0])
    ap.add_argument("--out", default="results/channels")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = dict(n=args.n, widths=(2, args.hidden, 1))
    suites = [channel_suite("rosenbrock_mod", init_seeds=range(args.rosen_seeds), **common)]
    for s in args.scales:
        suites.append(channel_suite("gp_matern32", s, target_seeds=range(args.targets),
                                    init_seeds=range(args.inits), **common))
    rows = [s.to_dict() for s in suites]
    for s, row in zip(suites, rows):
        row["parallel_fractions"] = s.parallel_fractions
        print(f"{s.name:22s} runs {s.runs:4d}  channel freq {s.channel_freq:.3f}  "
              f"median pf {np.median(s.parallel_fractions) if s.parallel_fractions else np.nan:.3f}"
              f"  {s.counts}")
    (out / "channel_stats.json").write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
