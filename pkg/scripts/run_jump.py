"""Find a channel on a GP(s=0.5) target and follow it with the jump procedure.

    python scripts/run_jump.py --target 0 --out results/jump
"""

import argparse
import json
from pathlib import Path

import numpy as np

from chaninf.data import TargetSpec
from chaninf.experiments import ExperimentConfig, _jsonable, experiment_dataset, train_one
from chaninf.channels import net_pair_reparam
from chaninf.net import NetworkParams
from chaninf.studies import SWEEP_FLOW, follow_record


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--target", type=int, default=0, help="GP target seed")
    ap.add_argument("--scale", type=float, default=0.5)
    ap.add_argument("--inits", type=int, default=20)
    ap.add_argument("--min-eps", type=float, default=0.05,
                    help="skip channels already too deep for ten halvings")
    ap.add_argument("--halvings", type=int, default=10)
    ap.add_argument("--out", default="results/jump")
    args = ap.parse_args()

    cfg = ExperimentConfig(kind="channel_follow", n=10, widths=[[2, 4, 1]],
                           target=TargetSpec("gp_matern32", 2, args.scale, seed=args.target),
                           activation="softplus", has_bias=True, flow=SWEEP_FLOW,
                           halvings=args.halvings)
    data = experiment_dataset(cfg)
    for seed in range(args.inits):
        rec = train_one(cfg, 0, seed, data)
        if not rec.get("is_channel") or rec["closest_pair"][0] != 0:
            continue
        net = NetworkParams.from_flat(np.asarray(rec["theta"]), [2, 4, 1], "softplus", True)
        eps = net_pair_reparam(net, tuple(rec["closest_pair"][1:])).eps
        if eps < args.min_eps:
            print(f"init {seed}: channel at eps={eps:.2g}, too deep")
            continue
        out = follow_record(cfg, rec, data)
        print(f"init {seed}: pair {rec['closest_pair'][1:]}, {out['jump_stop']}")
        for r in out["jump"]:
            print(f"  eps {r['eps']:.3e}  loss {r['loss']:.12f}  glu {r['glu_error']:.2e}  "
                  f"c {r['c']:.6f}  a {r['a']:.6f}  cos {r['cos_delta_w']:.6f}")
        print(f"  glu ratios {np.round(out['glu_ratios'], 3)}")
        print(f"  slope exponent {out['slope_exponent']:.2f}, loss~eps^p with p={out['loss_eps2_slope']:.2f}")
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "jump.json").write_text(json.dumps(_jsonable(out), indent=1))
        return
    print("no suitable channel found; try another --target")


if __name__ == "__main__":
    main()
