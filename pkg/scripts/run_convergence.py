"""Estimator convergence on one transition of the reference MDP (CSV for plotting).

    python scripts/run_convergence.py --seeds 10 --out results/convergence.csv
"""
import argparse
from pathlib import Path

from invariance_lab.cdp import APPENDIX_B_HORIZON, APPENDIX_B_QUERY, appendix_b_mdp
from invariance_lab.estimation import convergence_experiment, summarize_convergence, write_convergence_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--grid", default="50,100,200,500,1000,100000")
    ap.add_argument("--out", default="results/convergence.csv")
    args = ap.parse_args()

    cdp, policies = appendix_b_mdp()
    grid = [int(v) for v in args.grid.split(",")]
    rows = convergence_experiment(cdp, policies, APPENDIX_B_QUERY, grid, args.seeds, APPENDIX_B_HORIZON)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_convergence_csv(rows, out)

    summary = summarize_convergence(rows)
    print(f"truth = {rows[0]['truth']:.6f}")
    print(f"{'n':>7} {'estimator':<10} {'mae':>8} {'env std':>8}")
    for (est, n), s in sorted(summary.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        print(f"{n:>7} {est:<10} {s['mae']:8.4f} {s['env_std']:8.4f}")


if __name__ == "__main__":
    main()
