"""Invariant causal prediction for each next-state variable.

Predictors are the current state variables, plus the action as a real-valued
column when more than one action occurs in the data.  A predictor subset is
accepted when the residuals of the pooled least-squares fit look identically
distributed across environments; the parent estimate is the intersection of
all accepted subsets.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .abstraction import AbstractionPhi
from .cdp import EnvironmentDataset
from .errors import InvalidInput, SingularDesign
from .stats import f_test, welch_t_test

log = logging.getLogger(__name__)


@dataclass
class RegressionData:
    """Pooled regression samples with their environment labels."""

    predictors: np.ndarray  # (N, p)
    target: np.ndarray  # (N,)
    env: np.ndarray  # (N,) integer environment index
    env_ids: list[str]

    def residual_groups(self, residuals: np.ndarray) -> list[np.ndarray]:
        return [residuals[self.env == k] for k in range(len(self.env_ids))]


def regression_data(datasets: Sequence[EnvironmentDataset], target: int,
                    include_action: bool | None = None) -> RegressionData:
    if not datasets:
        raise InvalidInput("at least one dataset is required")
    d = datasets[0].x.shape[1]
    if not 0 <= target < d:
        raise InvalidInput(f"target {target} out of range for d={d}")
    actions = np.concatenate([ds.a for ds in datasets])
    if include_action is None:
        include_action = len(np.unique(actions)) > 1
    cols = [np.concatenate([ds.x for ds in datasets]).reshape(-1, d).astype(float)]
    if include_action:
        cols.append(actions.astype(float)[:, None])
    return RegressionData(
        predictors=np.hstack(cols),
        target=np.concatenate([ds.x_next[:, target] for ds in datasets]).astype(float),
        env=np.concatenate([np.full(len(ds), k) for k, ds in enumerate(datasets)]),
        env_ids=[ds.env_id for ds in datasets],
    )


def fit_ols(predictors: np.ndarray, target: np.ndarray, subset: Sequence[int] = (),
            strict: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Least squares on the chosen columns plus an intercept.

    Returns ``(coefficients, residuals)`` with the intercept first.  With
    ``strict=False`` a rank-deficient design falls back to the minimum-norm
    solution; its residuals are still the unique orthogonal projection.
    """
    predictors = np.asarray(predictors, dtype=float)
    target = np.asarray(target, dtype=float)
    n = len(target)
    design = np.hstack([np.ones((n, 1)), predictors[:, list(subset)]])
    if n <= len(subset):
        raise InvalidInput(f"need more samples ({n}) than predictors ({len(subset)})")
    coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if strict and rank < design.shape[1]:
        raise SingularDesign(f"design for subset {tuple(subset)} has rank {rank} < {design.shape[1]}")
    return coef, target - design @ coef


def residual_invariance_test(groups: Sequence[np.ndarray], zero_tol: float = 1e-10) -> float:
    """p-value for "residual distribution identical across environments".

    Each environment is compared with the pooled rest by a Welch t-test on the
    mean and an F-test on the variance; the two are combined as
    ``2 * min(p_t, p_F)`` and the environments by Bonferroni.
    """
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2:
        raise InvalidInput("the invariance test needs at least two environments")
    if any(len(g) < 2 for g in groups):
        raise InvalidInput("each environment needs at least two residuals")
    groups = [np.where(np.abs(g) <= zero_tol, 0.0, g) for g in groups]
    worst = 1.0
    for k, g in enumerate(groups):
        rest = np.concatenate([h for j, h in enumerate(groups) if j != k])
        p_env = 2.0 * min(welch_t_test(g, rest), f_test(g, rest))
        worst = min(worst, p_env)
    return float(min(1.0, max(0.0, len(groups) * worst)))


@dataclass
class IcpResult:
    target: int
    alpha: float
    tested: list[tuple[tuple[int, ...], float]]
    accepted: list[tuple[tuple[int, ...], float]]
    estimate: tuple[int, ...]
    rejected: bool = False
    predictor_names: list[str] = field(default_factory=list)
    uninformative: bool = False  # a single environment accepts every subset

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "alpha": self.alpha,
            "accepted": [{"subset": list(s), "p": p} for s, p in self.accepted],
            "estimate": list(self.estimate),
            "rejected": self.rejected,
            "uninformative": self.uninformative,
        }


def icp_for_target(datasets: Sequence[EnvironmentDataset], target: int, alpha: float = 0.05,
                   max_subset_size: int | None = None,
                   include_action: bool | None = None) -> IcpResult:
    if not 0.0 < alpha < 1.0:
        raise InvalidInput("alpha must lie in (0, 1)")
    data = regression_data(datasets, target, include_action)
    p = data.predictors.shape[1]
    d = datasets[0].x.shape[1]
    names = [f"x{j}" for j in range(d)] + (["a"] if p > d else [])
    max_size = p if max_subset_size is None else min(max_subset_size, p)
    single_env = len(datasets) < 2

    tested, accepted = [], []
    for size in range(max_size + 1):
        for subset in itertools.combinations(range(p), size):
            if single_env:
                pval = 1.0
            else:
                _, resid = fit_ols(data.predictors, data.target, subset, strict=False)
                pval = residual_invariance_test(data.residual_groups(resid))
            tested.append((subset, pval))
            if pval >= alpha:
                accepted.append((subset, pval))

    if not accepted:
        log.warning("ICP rejected every predictor set for target %d", target)
        return IcpResult(target, alpha, tested, [], (), rejected=True, predictor_names=names)
    estimate = set(accepted[0][0])
    for subset, _ in accepted[1:]:
        estimate &= set(subset)
    return IcpResult(target, alpha, tested, accepted, tuple(sorted(estimate)), predictor_names=names,
                     uninformative=single_env)


def icp_all(datasets: Sequence[EnvironmentDataset], alpha: float = 0.05,
            max_subset_size: int | None = None,
            include_action: bool | None = None) -> tuple[list[IcpResult], AbstractionPhi]:
    """ICP for every variable and the abstraction it induces.

    The action column is dropped from the induced index sets (the action is
    always conditioned on).  A rejected model, or a single environment where
    every subset passes trivially, falls back to the full state.
    """
    if not datasets:
        raise InvalidInput("at least one dataset is required")
    d = datasets[0].x.shape[1]
    results = [icp_for_target(datasets, i, alpha, max_subset_size, include_action) for i in range(d)]
    if len(datasets) < 2:
        log.warning("one environment only: ICP is uninformative, using the full state for every variable")
    index_sets = []
    for res in results:
        if res.rejected or res.uninformative:
            index_sets.append(tuple(range(d)))
        else:
            index_sets.append(tuple(j for j in res.estimate if j < d))
    return results, AbstractionPhi(tuple(index_sets))


def linear_sem_environments(parents: Sequence[Sequence[int]], shifts: Sequence[Sequence[float]],
                            n: int, seed: int, noise_scale: float = 1.0,
                            coef_range: tuple[float, float] = (0.5, 1.5)) -> list[EnvironmentDataset]:
    """Continuous one-step linear SEM, one dataset per row of ``shifts``.

    Current-state variables follow a random chain x_j = 0.5 x_{j-1} + noise,
    then get the environment's mean shift; next-state variable i is a linear
    function of its parents plus noise and is never intervened on.
    """
    rng = np.random.default_rng(seed)
    d = len(parents)
    coefs = []
    for pa in parents:
        mags = rng.uniform(*coef_range, size=len(pa))
        coefs.append(mags * rng.choice([-1.0, 1.0], size=len(pa)))
    datasets = []
    for e, shift in enumerate(shifts):
        x = np.empty((n, d))
        for j in range(d):
            base = 0.5 * x[:, j - 1] if j > 0 else 0.0
            x[:, j] = base + rng.normal(size=n) + shift[j]
        x_next = np.empty((n, d))
        for i, pa in enumerate(parents):
            x_next[:, i] = x[:, list(pa)] @ coefs[i] + noise_scale * rng.normal(size=n)
        datasets.append(EnvironmentDataset(f"env{e}", x, np.zeros(n, dtype=int), x_next,
                                           np.zeros(n), np.zeros(n, dtype=int)))
    return datasets
