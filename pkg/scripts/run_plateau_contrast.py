"""Duplicate-neuron (plateau saddle) frequency with and without biases on the rosenbrock grid.

    python scripts/run_plateau_contrast.py --seeds 50 --out results/plateau
"""

import argparse
import json
from pathlib import Path

from chaninf.studies import plateau_contrast


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10, help="grid points per axis")
    ap.add_argument("--hidden", type=int, nargs="+", default=[2, 3, 4, 5])
    ap.add_argument("--seeds", type=int, default=50, help="initialisations per width")
    ap.add_argument("--out", default="results/plateau")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for has_bias in (False, True):
        st = plateau_contrast(has_bias, hidden=args.hidden, seeds=range(args.seeds), n=args.n)
        rows.append(st.to_dict())
        print(f"bias={has_bias!s:5s} duplicates {st.duplicates}/{st.finite} converged "
              f"({st.runs} runs)  freq {st.duplicate_freq:.3f}  by width {st.by_width}")
    (out / "plateau_contrast.json").write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
