"""Seeded sweeps over random instances for the exact bound checks."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .abstraction import AbstractionPhi, check_model_invariance, parent_abstraction
from .cdp import FactoredCdp, random_policy, synth_random_cdp
from .planning import random_block_weights, verify_lemma1, verify_theorem2


@dataclass
class SweepReport:
    name: str
    instances: int
    violations: list[dict] = field(default_factory=list)
    worst_slack: float = float("inf")
    seconds: float = 0.0
    details: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {"name": self.name, "instances": self.instances, "passed": self.passed,
                "violations": self.violations, "worst_slack": self.worst_slack,
                "details": self.details}


def random_cdp(rng: np.random.Generator, max_d: int = 4, max_domain: int = 4, max_actions: int = 3,
               gamma: float = 0.9) -> FactoredCdp:
    d = int(rng.integers(1, max_d + 1))
    return synth_random_cdp(d, int(rng.integers(2, max_domain + 1)), int(rng.integers(1, max_actions + 1)),
                            int(rng.integers(0, d + 1)), gamma=gamma, seed=int(rng.integers(2**31)))


def random_abstraction(d: int, rng: np.random.Generator) -> AbstractionPhi:
    sets = []
    for _ in range(d):
        size = int(rng.integers(0, d + 1))
        sets.append(tuple(sorted(int(j) for j in rng.choice(d, size=size, replace=False))))
    return AbstractionPhi(tuple(sets))


def theorem1_sweep(instances: int = 100, seed: int = 0) -> SweepReport:
    """The true parent sets must pass the exact model-invariance check."""
    rng = np.random.default_rng(seed)
    rep = SweepReport("theorem1", instances)
    t0 = time.perf_counter()
    for k in range(instances):
        cdp = random_cdp(rng)
        verdict = check_model_invariance(cdp, parent_abstraction(cdp))
        if not verdict:
            rep.violations.append({"instance": k, "counterexample": repr(verdict.counterexample)})
    rep.worst_slack = 0.0
    rep.seconds = time.perf_counter() - t0
    return rep


def lemma1_sweep(instances: int = 100, seed: int = 0) -> SweepReport:
    rng = np.random.default_rng(seed)
    rep = SweepReport("lemma1", instances)
    t0 = time.perf_counter()
    for k in range(instances):
        cdp = random_cdp(rng, max_d=3)
        phi = random_abstraction(cdp.d, rng)
        r = verify_lemma1(cdp, phi, random_block_weights(cdp, phi, rng))
        rep.worst_slack = min(rep.worst_slack, r.slack)
        rep.details.append({"instance": k, "lhs": r.lhs, "lhs_telescoped": r.lhs_telescoped, "rhs": r.rhs})
        if not r.holds:
            rep.violations.append({"instance": k, **r.to_json()})
    rep.seconds = time.perf_counter() - t0
    return rep


def theorem2_sweep(instances: int = 50, seed: int = 0, tol: float = 1e-9,
                   slack_tol: float = 1e-8) -> SweepReport:
    """mu uniform over state-action pairs, nu the discounted visitation of a random policy."""
    rng = np.random.default_rng(seed)
    rep = SweepReport("theorem2", instances)
    t0 = time.perf_counter()
    for k in range(instances):
        cdp = random_cdp(rng, max_d=3)
        phi = random_abstraction(cdp.d, rng)
        weights = random_block_weights(cdp, phi, rng)
        r = verify_theorem2(cdp, phi, weights, policy=random_policy(cdp, rng), tol=tol, slack_tol=slack_tol)
        rep.worst_slack = min(rep.worst_slack, r.slack1, r.slack2)
        rep.details.append({"instance": k, "slack1": r.slack1, "slack2": r.slack2, "C": r.C})
        if not r.holds:
            rep.violations.append({"instance": k, **r.to_json()})
    rep.seconds = time.perf_counter() - t0
    return rep


SWEEPS = {"theorem1": theorem1_sweep, "lemma1": lemma1_sweep, "theorem2": theorem2_sweep}
