"""Command-line entry points and the end-to-end pipeline.

Every command is a function of (config, seed): no timestamps or other hidden
state end up in the artifacts, so repeated runs produce identical files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .abstraction import AbstractionPhi, load_phi
from .cdp import (APPENDIX_B_QUERY, FactoredCdp, Policy, SoftIntervention, appendix_b_mdp,
                  collect_samples, intervention_policies, load_cdp, random_policy, read_jsonl,
                  synth_random_cdp, uniform_policy, write_jsonl)
from .errors import LabError
from .estimation import (CSV_HEADER, INVARIANT, MLE, convergence_experiment, estimate_invariant,
                         estimate_mle)
from .icp import icp_all
from .invariance_loss import gradient_check_suite
from .planning import certainty_equivalence_plan, optimal_value
from .sweeps import SWEEPS

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_VIOLATION, EXIT_USAGE = 0, 2, 3, 64


@dataclass
class ExperimentConfig:
    # {"preset": "appendix_b", "action_count": 1}, {"path": "cdp.json"} or {"synth": {...}}
    cdp: dict = field(default_factory=lambda: {"preset": "appendix_b", "action_count": 1})
    # None: one environment per variable, each softly intervening on that variable
    policies: list[dict] | None = None
    alpha: float = 0.05
    samples: int = 1000  # per environment
    horizon: int = 10
    sample_grid: list[int] = field(default_factory=lambda: [50, 100, 200, 500, 1000, 100_000])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    query: list | None = None  # [x, a, x_next]; defaults to the reference-MDP query
    out_dir: str = "lab_out"
    tol: float = 1e-9
    max_subset_size: int | None = None
    instances: int | None = None  # verify sweeps; None uses each sweep's default

    def __post_init__(self):
        if not self.seeds:
            raise LabError("seeds must be nonempty")
        if not 0.0 < self.alpha < 1.0:
            raise LabError("alpha must lie in (0, 1)")
        if self.samples < 2 or self.horizon < 1:
            raise LabError("samples must be >= 2 and horizon >= 1")
        if "path" in self.cdp and not Path(self.cdp["path"]).exists():
            raise LabError(f"CDP file {self.cdp['path']} does not exist")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            doc = json.load(fh)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise LabError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)


def build_cdp(cfg: ExperimentConfig) -> FactoredCdp:
    source = cfg.cdp
    if "path" in source:
        return load_cdp(source["path"])
    if "synth" in source:
        return synth_random_cdp(**source["synth"])
    if source.get("preset") == "appendix_b":
        return appendix_b_mdp(int(source.get("action_count", 1)))[0]
    raise LabError(f"cannot build a CDP from {source}")


def build_policies(cfg: ExperimentConfig, cdp: FactoredCdp) -> list[Policy]:
    if cfg.policies is None:
        return intervention_policies(cdp)
    out = []
    for k, entry in enumerate(cfg.policies):
        pid = entry.get("id", f"env{k}")
        ivs = tuple(SoftIntervention(iv["variable"], tuple(iv["offsets"]), tuple(iv["probs"]))
                    for iv in entry.get("interventions", []))
        kind = entry.get("kind", "uniform")
        if kind == "uniform":
            out.append(uniform_policy(cdp, pid, ivs))
        elif kind == "random":
            base = random_policy(cdp, np.random.default_rng(entry.get("seed", k)), pid)
            out.append(Policy(base.probs, pid, ivs))
        else:
            raise LabError(f"unknown policy kind {kind!r}")
    if not out:
        raise LabError("at least one policy is required")
    return out


# -- output helpers -------------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def _collect(cfg: ExperimentConfig, cdp: FactoredCdp, policies, seed: int):
    return [collect_samples(cdp, pol, cfg.samples, cfg.horizon, np.random.SeedSequence([seed, k]))
            for k, pol in enumerate(policies)]


def _marginal_l1(model, data, cdp: FactoredCdp) -> float:
    """Mean per-variable L1 error of the estimated next-value distributions over visited keys."""
    x = np.concatenate([ds.x for ds in data])
    a = np.concatenate([ds.a for ds in data])
    keys = np.unique(np.column_stack([x, a]), axis=0)
    errs = [np.abs(model.dimension_row(i, k[:-1], k[-1]) - cdp.factor_row(i, k[:-1], k[-1])).sum()
            for k in keys for i in range(cdp.d)]
    return float(np.mean(errs))


def run_pipeline(cfg: ExperimentConfig, seed: int = 0) -> dict:
    """collect -> ICP -> invariant estimate -> certainty-equivalence plan."""
    cdp = build_cdp(cfg)
    policies = build_policies(cfg, cdp)
    data = _collect(cfg, cdp, policies, seed)
    results, phi = icp_all(data, cfg.alpha, cfg.max_subset_size)
    inv = estimate_invariant(data, phi, cdp)
    mle = estimate_mle(data, cdp)
    v_star = optimal_value(cdp, cfg.tol)
    plan_inv = certainty_equivalence_plan(inv, cdp.reward, cdp.gamma, cdp, phi, cfg.tol, v_star)
    plan_mle = certainty_equivalence_plan(mle, cdp.reward, cdp.gamma, cdp, None, cfg.tol, v_star)
    return {
        "seed": seed,
        "environments": [p.id for p in policies],
        "samples_per_environment": cfg.samples,
        "icp": [r.to_json() for r in results],
        "icp_uninformative": any(r.uninformative for r in results),
        "recovered_abstraction": phi.to_json(),
        "true_parents": [list(p) for p in cdp.parents],
        "estimator_errors": {"invariant_mean_marginal_l1": _marginal_l1(inv, data, cdp),
                             "mle_mean_marginal_l1": _marginal_l1(mle, data, cdp)},
        "planning": {"v_star_mu0": v_star, "invariant_gap": plan_inv.gap, "mle_gap": plan_mle.gap},
    }


# -- commands -------------------------------------------------------------------------


def cmd_synth(args, cfg, out: Path) -> int:
    cdp = synth_random_cdp(args.d, args.domain_size, args.actions, args.max_parents, args.gamma, args.seed)
    write_atomic(out / "cdp.json", dump_json(cdp.to_json()))
    return EXIT_OK


def cmd_collect(args, cfg, out: Path) -> int:
    cdp = build_cdp(cfg)
    data = _collect(cfg, cdp, build_policies(cfg, cdp), args.seed)
    path = out / "data.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    write_jsonl(data, tmp)
    os.replace(tmp, path)
    return EXIT_OK


def _data(args, cfg):
    cdp = build_cdp(cfg)
    if args.data:
        return cdp, read_jsonl(args.data)
    return cdp, _collect(cfg, cdp, build_policies(cfg, cdp), args.seed)


def cmd_icp(args, cfg, out: Path) -> int:
    _, data = _data(args, cfg)
    results, phi = icp_all(data, cfg.alpha, cfg.max_subset_size)
    write_atomic(out / "icp.json", dump_json({"results": [r.to_json() for r in results], "phi": phi.to_json()}))
    return EXIT_OK


def _phi(args, cdp: FactoredCdp) -> AbstractionPhi:
    return load_phi(args.phi) if args.phi else AbstractionPhi(cdp.parents)


def cmd_estimate(args, cfg, out: Path) -> int:
    cdp, data = _data(args, cfg)
    model = estimate_mle(data, cdp) if args.kind == MLE else estimate_invariant(data, _phi(args, cdp), cdp)
    write_atomic(out / f"model_{args.kind}.json", dump_json(model.to_json()))
    return EXIT_OK


def cmd_plan(args, cfg, out: Path) -> int:
    cdp, data = _data(args, cfg)
    if args.kind == MLE:
        model, phi = estimate_mle(data, cdp), None
    else:
        phi = _phi(args, cdp)
        model = estimate_invariant(data, phi, cdp)
    res = certainty_equivalence_plan(model, cdp.reward, cdp.gamma, cdp, phi, cfg.tol)
    write_atomic(out / f"plan_{args.kind}.json", dump_json({"kind": args.kind, **res.to_json()}))
    return EXIT_OK


def cmd_verify(args, cfg, out: Path) -> int:
    sweep = SWEEPS[args.which]
    kwargs = {"seed": args.seed}
    if cfg.instances is not None:
        kwargs["instances"] = cfg.instances
    if args.instances is not None:
        kwargs["instances"] = args.instances
    rep = sweep(**kwargs)
    write_atomic(out / f"verify_{args.which}.json", dump_json(rep.to_json()))
    print(f"{args.which}: {rep.instances} instances, {len(rep.violations)} violations")
    return EXIT_OK if rep.passed else EXIT_VIOLATION


def cmd_fig2(args, cfg, out: Path) -> int:
    cdp = build_cdp(cfg)
    q = cfg.query or APPENDIX_B_QUERY
    rows = convergence_experiment(cdp, build_policies(cfg, cdp), (tuple(q[0]), int(q[1]), tuple(q[2])),
                                  cfg.sample_grid, [s + args.seed for s in cfg.seeds], cfg.horizon)
    lines = [",".join(CSV_HEADER)]
    for r in rows:
        lines.append(",".join([r["env_id"], str(r["n"]), r["estimator"], str(r["seed"]),
                               repr(r["estimate"]), repr(r["truth"]), r["flag"]]))
    write_atomic(out / "fig2.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_loss_kernel_check(args, cfg, out: Path) -> int:
    checks = gradient_check_suite(seed=args.seed)
    print(f"{'seed':>4}  {'mode':<13} {'stop':<4} {'shape':<7} {'rel_error':>10}  result")
    for c in checks:
        print(f"{c.seed:>4}  {c.mode:<13} {c.stop_gradient_side:<4} {str(c.shape):<7} "
              f"{c.rel_error:10.2e}  {'pass' if c.passed else 'FAIL'}")
    write_atomic(out / "loss_kernel_check.json", dump_json([asdict(c) for c in checks]))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VIOLATION


def cmd_run(args, cfg, out: Path) -> int:
    report = run_pipeline(cfg, args.seed)
    write_atomic(out / "report.json", dump_json(report))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory (LAB_OUT overrides)")
    common.add_argument("--alpha", type=float)
    common.add_argument("--tol", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="invlab", description="Model-invariance lab for factored MDPs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a random factored CDP")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--domain-size", type=int, default=3)
    p.add_argument("--actions", type=int, default=2)
    p.add_argument("--max-parents", type=int, default=2)
    p.add_argument("--gamma", type=float, default=0.9)
    p.set_defaults(func=cmd_synth)

    sub.add_parser("collect", parents=[common], help="sample datasets to JSON-lines").set_defaults(func=cmd_collect)

    p = sub.add_parser("icp", parents=[common], help="invariant causal prediction per variable")
    p.add_argument("--data", help="JSON-lines dataset (collected from the config if omitted)")
    p.set_defaults(func=cmd_icp)

    for name, func in (("estimate", cmd_estimate), ("plan", cmd_plan)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data")
        p.add_argument("--kind", choices=[INVARIANT, MLE], default=INVARIANT)
        p.add_argument("--phi", help="abstraction JSON (true parents if omitted)")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", parents=[common], help="exact sweeps over random instances")
    p.add_argument("which", choices=sorted(SWEEPS))
    p.add_argument("--instances", type=int)
    p.set_defaults(func=cmd_verify)

    sub.add_parser("fig2", parents=[common], help="estimator convergence CSV").set_defaults(func=cmd_fig2)
    sub.add_parser("loss-kernel-check", parents=[common],
                   help="gradient checks for the invariance loss").set_defaults(func=cmd_loss_kernel_check)
    sub.add_parser("run", parents=[common], help="end-to-end pipeline").set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.alpha is not None:
            cfg.alpha = args.alpha
        if args.tol is not None:
            cfg.tol = args.tol
        cfg.__post_init__()
        out = Path(os.environ.get("LAB_OUT") or args.out or cfg.out_dir)
        return args.func(args, cfg, out)
    except (LabError, ValueError, KeyError, TypeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
