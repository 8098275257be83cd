"""Certainty-equivalence planning gap vs sample size (reference linear MDP, 3 actions).

    python scripts/run_planning_gap.py --seeds 10 --out results/planning_gap.json
"""
import argparse
import json
from pathlib import Path

from invariance_lab.experiments import planning_curve


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--sizes", default="100,1000,10000")
    ap.add_argument("--mle-sizes", default="1000")
    ap.add_argument("--out", default="results/planning_gap.json")
    args = ap.parse_args()

    sizes = [int(v) for v in args.sizes.split(",")]
    mle_sizes = [int(v) for v in args.mle_sizes.split(",") if v]
    curve = planning_curve(sizes, range(args.seeds), mle_sizes)
    print(f"V*(mu0) = {curve.v_star:.4f}")
    for n in sizes:
        line = f"N={n:>6}  invariant gap {curve.mean('invariant', n):.4f}"
        if n in curve.mle:
            line += f"  mle gap {curve.mean('mle', n):.4f}"
        print(line)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(curve.to_json(), indent=2) + "\n")


if __name__ == "__main__":
    main()
