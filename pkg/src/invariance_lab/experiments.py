"""Seeded experiment runners on the three-variable reference linear MDP.

Data for (seed, environment k, size n) always comes from
``SeedSequence([seed, k, n])``, so cells are independent and reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .abstraction import parent_abstraction
from .cdp import APPENDIX_B_HORIZON, appendix_b_mdp, collect_samples
from .estimation import estimate_invariant, estimate_mle
from .icp import icp_all
from .planning import certainty_equivalence_plan, optimal_value


def _data(cdp, policies, n: int, seed: int):
    return [collect_samples(cdp, pol, n, APPENDIX_B_HORIZON, np.random.SeedSequence([seed, k, n]))
            for k, pol in enumerate(policies)]


@dataclass
class IcpRecovery:
    """Recovery counts over seeds.

    A rejected model (no accepted subset) reports ``None``; by the usual ICP
    convention its estimate is the empty set, which counts as a subset of the
    truth but never as exact.  ``strict`` counts treat rejection as failure.
    """

    seeds: list[int]
    estimates: list[list[tuple[int, ...] | None]]  # per seed, per variable
    truth: list[tuple[int, ...]]

    def _count(self, i: int, rule) -> int:
        return sum(rule(row[i], self.truth[i]) for row in self.estimates)

    def subset_counts(self, strict: bool = False) -> list[int]:
        def rule(e, t):
            return (not strict) if e is None else set(e) <= set(t)
        return [self._count(i, rule) for i in range(len(self.truth))]

    def exact_counts(self) -> list[int]:
        return [self._count(i, lambda e, t: e is not None and tuple(e) == t) for i in range(len(self.truth))]

    @property
    def joint_subset(self) -> int:
        """Seeds where every variable is a subset (strict: no rejections)."""
        return sum(all(e is not None and set(e) <= set(t) for e, t in zip(row, self.truth))
                   for row in self.estimates)

    @property
    def joint_exact(self) -> int:
        return sum(all(e is not None and tuple(e) == t for e, t in zip(row, self.truth)) for row in self.estimates)

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "truth": [list(t) for t in self.truth],
                "estimates": [[None if e is None else list(e) for e in row] for row in self.estimates],
                "subset_per_variable": self.subset_counts(),
                "subset_per_variable_strict": self.subset_counts(strict=True),
                "exact_per_variable": self.exact_counts(),
                "joint_subset": self.joint_subset, "joint_exact": self.joint_exact}


def icp_recovery(seeds: Sequence[int] = range(20), n: int = 1000, alpha: float = 0.05,
                 action_count: int = 1) -> IcpRecovery:
    cdp, policies = appendix_b_mdp(action_count)
    rec = IcpRecovery(list(seeds), [], [tuple(p) for p in cdp.parents])
    for seed in seeds:
        results, _ = icp_all(_data(cdp, policies, n, seed), alpha)
        rec.estimates.append([None if r.rejected else r.estimate for r in results])
    return rec


@dataclass
class PlanningCurve:
    sizes: list[int]
    invariant: dict[int, list[float]] = field(default_factory=dict)  # n -> gap per seed
    mle: dict[int, list[float]] = field(default_factory=dict)
    v_star: float = 0.0

    def mean(self, kind: str, n: int) -> float:
        return float(np.mean(getattr(self, kind)[n]))

    def to_json(self) -> dict:
        return {"sizes": self.sizes, "v_star_mu0": self.v_star,
                "invariant": {str(n): g for n, g in self.invariant.items()},
                "mle": {str(n): g for n, g in self.mle.items()},
                "invariant_mean": {str(n): self.mean("invariant", n) for n in self.invariant},
                "mle_mean": {str(n): self.mean("mle", n) for n in self.mle}}


def planning_curve(sizes: Sequence[int] = (100, 1000, 10_000), seeds: Sequence[int] = range(10),
                   mle_sizes: Sequence[int] = (1000,), action_count: int = 3) -> PlanningCurve:
    """Certainty-equivalence planning gaps, with the true parent sets as the abstraction."""
    cdp, policies = appendix_b_mdp(action_count)
    phi = parent_abstraction(cdp)
    curve = PlanningCurve(list(sizes), v_star=optimal_value(cdp))
    for n in sizes:
        curve.invariant[n] = []
        if n in mle_sizes:
            curve.mle[n] = []
        for seed in seeds:
            data = _data(cdp, policies, n, seed)
            plan = certainty_equivalence_plan(estimate_invariant(data, phi, cdp), cdp.reward, cdp.gamma,
                                              cdp, phi, v_star=curve.v_star)
            curve.invariant[n].append(plan.gap)
            if n in mle_sizes:
                plan = certainty_equivalence_plan(estimate_mle(data, cdp), cdp.reward, cdp.gamma, cdp,
                                                  v_star=curve.v_star)
                curve.mle[n].append(plan.gap)
    return curve
