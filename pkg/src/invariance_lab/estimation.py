"""Tabular transition estimators and the sample-size convergence experiment.

``estimate_mle`` counts next full states per observed (state, action) key.
``estimate_invariant`` counts, for each variable i separately, next values of
that variable per (phi_i(state), action) key, pooling every state that shares
the projection; the full kernel is the product over variables.  Ragged pools
are handled by pooling raw counts.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .abstraction import AbstractionPhi
from .cdp import (FactoredCdp, EnvironmentDataset, Policy, collect_samples, compose_transition,
                  concat_datasets)
from .errors import InvalidInput, NoData

log = logging.getLogger(__name__)

MLE = "mle"
INVARIANT = "invariant"


@dataclass(eq=False)
class EstimatedModel:
    kind: str
    domain_sizes: tuple[int, ...]
    action_count: int
    # MLE: sparse (n_states * action_count, n_states) counts.
    # INVARIANT: one dense tensor per variable, shape (*D[phi_i], A, D_i).
    counts: object
    phi: AbstractionPhi | None = None
    _dim_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind == INVARIANT and self.phi is None:
            raise InvalidInput("an invariant model needs its abstraction")

    @property
    def d(self) -> int:
        return len(self.domain_sizes)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.domain_sizes))

    def _key(self, x, a) -> int:
        return int(np.ravel_multi_index(tuple(x), self.domain_sizes)) * self.action_count + int(a)

    def _dim_index(self, i: int, x, a) -> tuple:
        return tuple(int(x[j]) for j in self.phi.index_sets[i]) + (int(a),)

    def key_count(self, x, a) -> int:
        """Number of observations behind the (x, a) estimate (the smallest pool for INVARIANT)."""
        if self.kind == MLE:
            return int(self.row_totals()[self._key(x, a)])
        return int(min(self.counts[i][self._dim_index(i, x, a)].sum() for i in range(self.d)))

    def row_totals(self) -> np.ndarray:
        if "totals" not in self._dim_cache:
            self._dim_cache["totals"] = np.asarray(self.counts.sum(axis=1)).ravel()
        return self._dim_cache["totals"]

    def dimension_row(self, i: int, x, a) -> np.ndarray:
        """Estimated next-value distribution of variable i."""
        if self.kind == INVARIANT:
            row = self.counts[i][self._dim_index(i, x, a)]
            total = row.sum()
            if total == 0:
                raise NoData(f"no data for variable {i} at key {self._dim_index(i, x, a)}")
            return row / total
        key = self._key(x, a)
        total = self.row_totals()[key]
        if total == 0:
            raise NoData(f"no data for state {tuple(x)}, action {a}")
        row = self.counts.getrow(key)
        marg = np.zeros(self.domain_sizes[i])
        nxt = np.unravel_index(row.indices, self.domain_sizes)[i]
        np.add.at(marg, nxt, row.data)
        return marg / total

    def probability(self, x, a, x_next) -> float:
        if self.kind == MLE:
            key = self._key(x, a)
            total = self.row_totals()[key]
            if total == 0:
                raise NoData(f"no data for state {tuple(x)}, action {a}")
            col = int(np.ravel_multi_index(tuple(x_next), self.domain_sizes))
            return float(self.counts[key, col] / total)
        prob = 1.0
        for i in range(self.d):
            prob *= self.dimension_row(i, x, a)[x_next[i]]
        return float(prob)

    def probability_or_fallback(self, x, a, x_next) -> tuple[float, bool]:
        """Estimate with unseen keys replaced by uniform rows; second item flags the fallback."""
        if self.kind == MLE:
            try:
                return self.probability(x, a, x_next), False
            except NoData:
                return 1.0 / self.n_states, True
        prob, missing = 1.0, False
        for i in range(self.d):
            try:
                prob *= self.dimension_row(i, x, a)[x_next[i]]
            except NoData:
                prob /= self.domain_sizes[i]
                missing = True
        return float(prob), missing

    def factor_tables(self, fallback: str = "uniform") -> list[np.ndarray]:
        """Per-variable probability tensors with unseen keys filled (INVARIANT only)."""
        if self.kind != INVARIANT:
            raise InvalidInput("factor tables exist only for invariant models")
        if fallback != "uniform":
            raise InvalidInput(f"unknown fallback {fallback!r}")
        tables = []
        for i, c in enumerate(self.counts):
            totals = c.sum(axis=-1, keepdims=True)
            unseen = int((totals == 0).sum())
            if unseen:
                log.info("variable %d: %d unseen keys filled with uniform rows", i, unseen)
            with np.errstate(invalid="ignore", divide="ignore"):
                t = np.where(totals > 0, c / np.where(totals > 0, totals, 1), 1.0 / c.shape[-1])
            tables.append(t)
        return tables

    def transition_operator(self) -> tuple[sparse.csr_matrix, np.ndarray]:
        """(MLE only) row-normalized sparse kernel and a mask of unseen keys."""
        if self.kind != MLE:
            raise InvalidInput("the sparse operator exists only for MLE models")
        totals = self.row_totals()
        seen = totals > 0
        scale = np.where(seen, 1.0 / np.where(seen, totals, 1.0), 0.0)
        if (~seen).any():
            log.info("MLE model: %d unseen (state, action) keys use uniform rows", int((~seen).sum()))
        return sparse.diags(scale) @ self.counts, ~seen

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "domain_sizes": list(self.domain_sizes), "action_count": self.action_count}
        if self.kind == MLE:
            coo = self.counts.tocoo()
            doc["counts"] = [[int(r), int(c), int(v)] for r, c, v in zip(coo.row, coo.col, coo.data)]
        else:
            doc["phi"] = self.phi.to_json()
            doc["counts"] = [c.astype(int).tolist() for c in self.counts]
        return doc


def _shape(cdp_or_shape) -> tuple[tuple[int, ...], int]:
    if isinstance(cdp_or_shape, FactoredCdp):
        return cdp_or_shape.domain_sizes, cdp_or_shape.action_count
    domain_sizes, action_count = cdp_or_shape
    return tuple(domain_sizes), int(action_count)


def estimate_mle(data: Sequence[EnvironmentDataset] | EnvironmentDataset, cdp_or_shape) -> EstimatedModel:
    domain_sizes, action_count = _shape(cdp_or_shape)
    n_states = int(np.prod(domain_sizes))
    x, a, x_next = concat_datasets(data) if _nonempty(data) else _empty(len(domain_sizes))
    keys = np.ravel_multi_index(x.T, domain_sizes) * action_count + a if len(a) else np.zeros(0, int)
    cols = np.ravel_multi_index(x_next.T, domain_sizes) if len(a) else np.zeros(0, int)
    counts = sparse.csr_matrix((np.ones(len(keys)), (keys, cols)), shape=(n_states * action_count, n_states))
    counts.sum_duplicates()
    return EstimatedModel(MLE, domain_sizes, action_count, counts)


def estimate_invariant(data: Sequence[EnvironmentDataset] | EnvironmentDataset, phi: AbstractionPhi,
                       cdp_or_shape) -> EstimatedModel:
    domain_sizes, action_count = _shape(cdp_or_shape)
    d = len(domain_sizes)
    if phi.d != d or any(j >= d for s in phi.index_sets for j in s):
        raise InvalidInput("abstraction dimension does not match the data")
    x, a, x_next = concat_datasets(data) if _nonempty(data) else _empty(d)
    counts = []
    for i, sel in enumerate(phi.index_sets):
        shape = tuple(domain_sizes[j] for j in sel) + (action_count, domain_sizes[i])
        c = np.zeros(shape)
        np.add.at(c, tuple(x[:, j] for j in sel) + (a, x_next[:, i]), 1.0)
        counts.append(c)
    return EstimatedModel(INVARIANT, domain_sizes, action_count, counts, phi)


def _nonempty(data) -> bool:
    if isinstance(data, EnvironmentDataset):
        return True
    return len(list(data)) > 0


def _empty(d: int):
    return np.zeros((0, d), dtype=int), np.zeros(0, dtype=int), np.zeros((0, d), dtype=int)


# -- convergence experiment -------------------------------------------------------

CSV_HEADER = ("env_id", "n", "estimator", "seed", "estimate", "truth", "flag")


def convergence_experiment(cdp: FactoredCdp, policies: Sequence[Policy], query, sample_grid: Sequence[int],
                           seeds: int | Sequence[int] = 10, horizon: int = 10,
                           phi: AbstractionPhi | None = None) -> list[dict]:
    """Estimate one transition probability from growing per-environment samples.

    ``query`` is ``(x, a, x_next)``.  Both estimators see the same data in each
    (environment, n, seed) cell.  The invariant estimator uses ``phi``, by
    default the true parent sets.  Unseen keys fall back to uniform rows and
    the row is flagged ``nodata``.
    """
    x, a, x_next = query
    x, a, x_next = cdp.check_state(x), cdp.check_action(a), cdp.check_state(x_next)
    phi = phi or AbstractionPhi(cdp.parents)
    truth = float(compose_transition(cdp, x, a)[cdp.state_index(x_next)])
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    rows = []
    for k, pol in enumerate(policies):
        for n in sample_grid:
            for seed in seed_list:
                data = collect_samples(cdp, pol, n, horizon, np.random.SeedSequence([seed, k, n]))
                for name, model in ((INVARIANT, estimate_invariant(data, phi, cdp)),
                                    (MLE, estimate_mle(data, cdp))):
                    est, missing = model.probability_or_fallback(x, a, x_next)
                    rows.append({"env_id": pol.id, "n": n, "estimator": name, "seed": seed,
                                 "estimate": est, "truth": truth, "flag": "nodata" if missing else ""})
    rows.sort(key=lambda r: (r["env_id"], r["n"], r["estimator"], r["seed"]))
    return rows


def write_convergence_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "estimate": repr(r["estimate"]), "truth": repr(r["truth"])})


def summarize_convergence(rows: Sequence[dict]) -> dict:
    """Per-(estimator, n) mean absolute error and across-environment spread of seed means."""
    out: dict = {}
    keys = sorted({(r["estimator"], r["n"]) for r in rows})
    for est, n in keys:
        cell = [r for r in rows if r["estimator"] == est and r["n"] == n]
        envs = sorted({r["env_id"] for r in cell})
        env_means = [float(np.mean([r["estimate"] for r in cell if r["env_id"] == e])) for e in envs]
        out[(est, n)] = {
            "mae": float(np.mean([abs(r["estimate"] - r["truth"]) for r in cell])),
            "env_means": env_means,
            "env_std": float(np.std(env_means)),
            "truth": cell[0]["truth"],
        }
    return out
