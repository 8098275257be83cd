"""Dynamic programming over original, abstract and estimated models, plus
brute-force checks of the model-error and value bounds.

Every planner works against a small backup interface: a reward table
``(S, A)``, a discount, and ``expected_next(V) -> (S, A)`` giving
``E[V(x') | x, a]``.  Dense, factored (einsum) and sparse kernels implement it.
"""
from __future__ import annotations

import logging
import math
import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .abstraction import (AbstractionPhi, DEFAULT_MAX_PAIRS, block_membership, epsilon_model_invariance,
                          epsilon_reward)
from .cdp import FactoredCdp, Policy, deterministic_policy, transition_matrix
from .errors import InvalidInput, TooLarge, Unbounded
from .estimation import INVARIANT, MLE, EstimatedModel

log = logging.getLogger(__name__)

DENSE_LIMIT = 5000


# -- backup models ---------------------------------------------------------------


class DenseModel:
    def __init__(self, P: np.ndarray, R: np.ndarray, gamma: float, mu0: np.ndarray | None = None):
        self.P, self.reward, self.gamma, self.mu0 = P, R, gamma, mu0

    @property
    def n_states(self):
        return self.reward.shape[0]

    def expected_next(self, V: np.ndarray) -> np.ndarray:
        return self.P @ V


class FactoredModel:
    """Kernel given as a product of per-variable tables.

    Table i has shape ``(*D[index_sets[i]], A, D_i)``.
    """

    def __init__(self, domain_sizes, index_sets, tables, R, gamma, mu0=None):
        self.domain_sizes = tuple(domain_sizes)
        self.index_sets = [tuple(s) for s in index_sets]
        self.tables = list(tables)
        self.reward, self.gamma, self.mu0 = R, gamma, mu0
        d = len(self.domain_sizes)
        letters = iter(string.ascii_letters)
        cur = [next(letters) for _ in range(d)]
        nxt = [next(letters) for _ in range(d)]
        act = next(letters)
        self._used = sorted(set().union(*map(set, self.index_sets)))
        terms = ["".join(cur[j] for j in s) + act + nxt[i] for i, s in enumerate(self.index_sets)]
        terms.append("".join(nxt))
        self._subs = ",".join(terms) + "->" + "".join(cur[j] for j in self._used) + act
        dummy = np.zeros(self.domain_sizes)
        self._path = np.einsum_path(self._subs, *self.tables, dummy, optimize="greedy")[0]
        self._out_shape = [self.domain_sizes[j] if j in self._used else 1 for j in range(d)]

    @property
    def n_states(self):
        return self.reward.shape[0]

    def expected_next(self, V: np.ndarray) -> np.ndarray:
        A = self.reward.shape[1]
        res = np.einsum(self._subs, *self.tables, V.reshape(self.domain_sizes), optimize=self._path)
        res = np.broadcast_to(res.reshape(self._out_shape + [A]), self.domain_sizes + (A,))
        return res.reshape(-1, A)


class SparseModel:
    """Row-normalized sparse kernel; unseen keys act as uniform rows."""

    def __init__(self, P: sparse.csr_matrix, unseen: np.ndarray, R: np.ndarray, gamma: float, mu0=None):
        self.P, self.unseen, self.reward, self.gamma, self.mu0 = P, unseen, R, gamma, mu0

    @property
    def n_states(self):
        return self.reward.shape[0]

    def expected_next(self, V: np.ndarray) -> np.ndarray:
        S, A = self.reward.shape
        flat = self.P @ V
        flat = np.where(self.unseen, V.mean(), flat)
        return flat.reshape(S, A)


def as_model(mdp):
    if isinstance(mdp, (DenseModel, FactoredModel, SparseModel)):
        return mdp
    if isinstance(mdp, AbstractMdp):
        return DenseModel(mdp.P, mdp.R, mdp.gamma)
    if isinstance(mdp, FactoredCdp):
        return FactoredModel(mdp.domain_sizes, mdp.parents, mdp.factors, mdp.reward, mdp.gamma, mdp.mu0)
    raise InvalidInput(f"cannot plan over {type(mdp).__name__}")


def dense_model(cdp: FactoredCdp) -> DenseModel:
    return DenseModel(transition_matrix(cdp, DENSE_LIMIT), cdp.reward, cdp.gamma, cdp.mu0)


# -- value tables ------------------------------------------------------------------


@dataclass
class QTable:
    values: np.ndarray  # (S, A)
    domain: str = "original"
    iterations: int = 0

    @property
    def V(self) -> np.ndarray:
        return self.values.max(axis=1)

    def greedy(self) -> np.ndarray:
        return self.values.argmax(axis=1)


def bellman_optimality(mdp, Q: np.ndarray) -> np.ndarray:
    model = as_model(mdp)
    return model.reward + model.gamma * model.expected_next(Q.max(axis=1))


def value_iteration(mdp, tol: float = 1e-9, max_iter: int = 1_000_000) -> QTable:
    """Iterate the optimality operator until the result is within ``tol`` of Q*.

    A sup-norm step of ``delta`` bounds the distance to the fixed point by
    ``gamma / (1 - gamma) * delta``, so iteration stops at
    ``delta <= tol * (1 - gamma) / gamma``.
    """
    if tol <= 0:
        raise InvalidInput("tol must be positive")
    model = as_model(mdp)
    gamma = model.gamma
    threshold = tol * (1.0 - gamma) / gamma
    Q = np.zeros_like(model.reward, dtype=float)
    for it in range(1, max_iter + 1):
        Q_new = model.reward + gamma * model.expected_next(Q.max(axis=1))
        delta = np.abs(Q_new - Q).max()
        Q = Q_new
        if delta <= threshold:
            break
    log.debug("value iteration converged after %d sweeps", it)
    domain = "abstract" if isinstance(mdp, AbstractMdp) else "original"
    return QTable(Q, domain, it)


def _policy_matrix(model, policy) -> np.ndarray:
    probs = policy.probs if isinstance(policy, Policy) else np.asarray(policy, dtype=float)
    if probs.shape != model.reward.shape:
        raise InvalidInput(f"policy shape {probs.shape} does not match {model.reward.shape}")
    return probs


def policy_evaluation(mdp, policy, method: str = "auto", tol: float = 1e-12) -> QTable:
    """Q^pi by a direct linear solve (dense kernels) or by fixed-point iteration."""
    model = as_model(mdp) if not isinstance(mdp, FactoredCdp) else None
    if model is None:
        model = dense_model(mdp) if mdp.n_states <= DENSE_LIMIT and method != "iterative" else as_model(mdp)
    pi = _policy_matrix(model, policy)
    S = model.n_states
    gamma = model.gamma
    if method == "auto":
        method = "direct" if isinstance(model, DenseModel) else "iterative"
    if method == "direct":
        if not isinstance(model, DenseModel):
            raise InvalidInput("direct evaluation needs a dense kernel")
        P_pi = np.einsum("sa,sat->st", pi, model.P)
        R_pi = (pi * model.reward).sum(axis=1)
        V = np.linalg.solve(np.eye(S) - gamma * P_pi, R_pi)
        return QTable(model.reward + gamma * model.P @ V)
    V = np.zeros(S)
    it = 0
    while True:
        it += 1
        V_new = (pi * (model.reward + gamma * model.expected_next(V))).sum(axis=1)
        delta = np.abs(V_new - V).max()
        V = V_new
        if delta <= tol * (1.0 - gamma):
            break
    return QTable(model.reward + gamma * model.expected_next(V), iterations=it)


def discounted_visitation(mdp, policy, mu0: np.ndarray | None = None) -> np.ndarray:
    """State-action discounted visitation (1 - gamma) * sum_t gamma^t P(x_t = x, a_t = a)."""
    if isinstance(mdp, FactoredCdp):
        mu0 = mdp.mu0 if mu0 is None else mu0
        model = dense_model(mdp)
    else:
        model = as_model(mdp)
        mu0 = model.mu0 if mu0 is None else mu0
    if mu0 is None:
        raise InvalidInput("an initial distribution is required")
    pi = _policy_matrix(model, policy)
    P_pi = np.einsum("sa,sat->st", pi, model.P)
    S = model.n_states
    occupancy = (1.0 - model.gamma) * np.linalg.solve((np.eye(S) - model.gamma * P_pi).T, mu0)
    return occupancy[:, None] * pi


def concentrability(mu: np.ndarray, nu: np.ndarray) -> float:
    mu, nu = np.asarray(mu, dtype=float), np.asarray(nu, dtype=float)
    if mu.shape != nu.shape:
        raise InvalidInput("mu and nu must have the same shape")
    if np.any((nu > 0) & (mu <= 0)):
        raise Unbounded("nu puts mass where mu has none")
    pos = mu > 0
    return float((nu[pos] / mu[pos]).max())


def weighted_norm(f: np.ndarray, rho: np.ndarray) -> float:
    return math.sqrt(float((rho * f * f).sum()))


# -- abstract MDPs -------------------------------------------------------------------


@dataclass(eq=False)
class AbstractMdp:
    states: list[tuple]
    block: np.ndarray  # (S,) abstract index of every original state
    P: np.ndarray  # (m, A, m)
    R: np.ndarray  # (m, A)
    gamma: float
    weights: list[np.ndarray]  # weights[k] over members of block k, in state-index order

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.block == k)


def _check_weights(block: np.ndarray, weights) -> list[np.ndarray]:
    m = block.max() + 1
    out = []
    for k in range(m):
        size = int((block == k).sum())
        if weights is None:
            out.append(np.full(size, 1.0 / size))
            continue
        w = np.asarray(weights[k], dtype=float)
        if w.shape != (size,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise InvalidInput(f"weights for abstract state {k} must be a distribution over its {size} members")
        out.append(w)
    return out


def build_abstract_mdp(cdp: FactoredCdp, phi: AbstractionPhi, weights=None) -> AbstractMdp:
    """Average lifted rows and rewards over each block with the given weights (uniform by default)."""
    phi.check_against(cdp)
    block, member = block_membership(phi.joint_labels(cdp))
    lifted = transition_matrix(cdp, DENSE_LIMIT) @ member  # (S, A, m)
    w = _check_weights(block, weights)
    m = member.shape[1]
    P = np.empty((m, cdp.action_count, m))
    R = np.empty((m, cdp.action_count))
    states = []
    for k in range(m):
        idx = np.flatnonzero(block == k)
        P[k] = np.tensordot(w[k], lifted[idx], axes=1)
        R[k] = w[k] @ cdp.reward[idx]
        states.append(phi(cdp.state_vector(idx[0])))
    return AbstractMdp(states, block, P, R, cdp.gamma, w)


def random_block_weights(cdp: FactoredCdp, phi: AbstractionPhi, rng: np.random.Generator) -> list[np.ndarray]:
    """Product-form weights: each variable outside every index set gets its own
    Dirichlet draw per abstract state; the kept variables are pinned by the block."""
    block, _ = block_membership(phi.joint_labels(cdp))
    free = [j for j in range(cdp.d) if j not in phi.used_variables]
    states = cdp.all_states()
    weights = []
    for k in range(block.max() + 1):
        idx = np.flatnonzero(block == k)
        w = np.ones(len(idx))
        for j in free:
            wj = rng.dirichlet(np.ones(cdp.domain_sizes[j]))
            w *= wj[states[idx, j]]
        weights.append(w / w.sum())
    return weights


def lift_q(q_phi: QTable, amdp: AbstractMdp) -> QTable:
    return QTable(q_phi.values[amdp.block], "original", q_phi.iterations)


def project_q(q: QTable, amdp: AbstractMdp) -> QTable:
    """Inverse of :func:`lift_q` for block-constant tables."""
    _, first = np.unique(amdp.block, return_index=True)
    return QTable(q.values[first], "abstract", q.iterations)


# -- bound verification -------------------------------------------------------------


def _factor_rows(cdp: FactoredCdp) -> list[np.ndarray]:
    return [cdp.factor_rows_all(i) for i in range(cdp.d)]


def _outer_chain(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Batched outer product over the last axis: (..., D0), (..., D1) -> (..., D0*D1)."""
    out = vectors[0]
    for v in vectors[1:]:
        out = (out[..., :, None] * v[..., None, :]).reshape(*out.shape[:-1], -1)
    return out


@dataclass
class TransitionErrorReport:
    lhs: float  # max over (x, a) of the L1 gap on full next states
    lhs_abstract: float  # same gap after lifting both sides to abstract states
    lhs_telescoped: float  # gap rebuilt from the per-variable telescoping sum
    chain_bound: float  # sum over variables of the averaged per-variable gaps
    rhs: float
    eps_p: tuple[float, ...]
    holds: bool
    lhs_by_pair: np.ndarray | None = None  # (S, A) direct gap
    slack: float = field(init=False)

    def __post_init__(self):
        self.slack = self.rhs - self.lhs

    def to_json(self) -> dict:
        doc = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}
        if self.lhs_by_pair is not None:
            doc["lhs_by_pair"] = self.lhs_by_pair.tolist()
        return doc


def verify_lemma1(cdp: FactoredCdp, phi: AbstractionPhi, weights=None,
                  max_pairs: int = DEFAULT_MAX_PAIRS) -> TransitionErrorReport:
    eps = epsilon_model_invariance(cdp, phi, max_pairs)
    rhs = float(sum(eps))
    amdp = build_abstract_mdp(cdp, phi, weights)
    T = transition_matrix(cdp, DENSE_LIMIT)
    block, member = block_membership(phi.joint_labels(cdp))
    rows = _factor_rows(cdp)  # each (S, A, D_i)
    lhs = lhs_abs = lhs_tel = chain = 0.0
    by_pair = np.zeros((cdp.n_states, cdp.action_count))
    for k in range(len(amdp.states)):
        idx = amdp.members(k)
        w = amdp.weights[k]
        mixture = np.tensordot(w, T[idx], axes=1)  # (A, S)
        gap = np.abs(mixture[None] - T[idx]).sum(axis=-1)  # (B, A)
        by_pair[idx] = gap
        lhs = max(lhs, float(gap.max()))
        lhs_abs = max(lhs_abs, float(np.abs(amdp.P[k][None] - T[idx] @ member).sum(axis=-1).max()))
        # telescoping: prod(q_bar) - prod(q) = sum_k q_bar_<k (q_bar_k - q_k) q_>k
        for x in idx:
            q = [r[x] for r in rows]  # (A, D_i)
            qbar = [r[idx] for r in rows]  # (B, A, D_i)
            diff = 0.0
            per_var = 0.0
            for v in range(cdp.d):
                parts = [qbar[i] for i in range(v)] + [qbar[v] - q[v][None]] + \
                        [np.broadcast_to(q[i], qbar[i].shape) for i in range(v + 1, cdp.d)]
                diff = diff + np.tensordot(w, _outer_chain(parts), axes=1)
                per_var = per_var + np.abs(qbar[v] - q[v][None]).sum(axis=-1)
            lhs_tel = max(lhs_tel, float(np.abs(diff).sum(axis=-1).max()))
            chain = max(chain, float((w @ per_var).max()))
    holds = lhs <= rhs + 1e-9 and lhs_abs <= rhs + 1e-9
    return TransitionErrorReport(lhs, lhs_abs, lhs_tel, chain, rhs, eps, holds, by_pair)


@dataclass
class ValueBoundReport:
    bound1_lhs: float
    bound1_rhs: float
    bound2_lhs: float
    bound2_rhs: float
    C: float
    eps_r: float
    eps_p: tuple[float, ...]
    holds: bool
    slack1: float = field(init=False)
    slack2: float = field(init=False)

    def __post_init__(self):
        self.slack1 = self.bound1_rhs - self.bound1_lhs
        self.slack2 = self.bound2_rhs - self.bound2_lhs

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def verify_theorem2(cdp: FactoredCdp, phi: AbstractionPhi, weights=None, mu: np.ndarray | None = None,
                    nu: np.ndarray | None = None, policy: Policy | None = None, tol: float = 1e-9,
                    slack_tol: float = 1e-8, max_pairs: int = DEFAULT_MAX_PAIRS) -> ValueBoundReport:
    """Check both value bounds exactly.

    ``mu`` defaults to uniform over state-action pairs; ``nu`` defaults to the
    discounted visitation of ``policy`` (uniform random if omitted).
    """
    S, A = cdp.n_states, cdp.action_count
    if mu is None:
        mu = np.full((S, A), 1.0 / (S * A))
    if nu is None:
        if policy is None:
            policy = Policy(np.full((S, A), 1.0 / A), "uniform")
        nu = discounted_visitation(cdp, policy)
    C = concentrability(mu, nu)
    eps_p = epsilon_model_invariance(cdp, phi, max_pairs)
    eps_r = epsilon_reward(cdp, phi, max_pairs)
    amdp = build_abstract_mdp(cdp, phi, weights)
    model = dense_model(cdp)
    q_lift = lift_q(value_iteration(amdp, tol), amdp).values
    q_star = value_iteration(model, tol).values
    residual = q_lift - bellman_optimality(model, q_lift)
    gamma = cdp.gamma
    b1_lhs = weighted_norm(q_lift - q_star, nu)
    b2_lhs = weighted_norm(residual, mu)
    b1_rhs = math.sqrt(C) / (1.0 - gamma) * b2_lhs
    b2_rhs = eps_r + gamma * sum(eps_p) * cdp.r_max / (2.0 * (1.0 - gamma))
    holds = b1_rhs - b1_lhs >= -slack_tol and b2_rhs - b2_lhs >= -slack_tol
    return ValueBoundReport(b1_lhs, b1_rhs, b2_lhs, b2_rhs, C, eps_r, eps_p, holds)


# -- certainty equivalence --------------------------------------------------------------


@dataclass
class PlanResult:
    actions: np.ndarray
    v_star: float
    v_pi: float
    gap: float
    q_hat: QTable

    def policy(self, cdp: FactoredCdp) -> Policy:
        return deterministic_policy(cdp, self.actions)

    def to_json(self) -> dict:
        return {"actions": self.actions.tolist(), "v_star_mu0": self.v_star, "v_pi_mu0": self.v_pi,
                "gap": self.gap, "iterations": self.q_hat.iterations}


def estimated_model(estimated: EstimatedModel, reward: np.ndarray, gamma: float, mu0=None):
    if estimated.kind == INVARIANT:
        return FactoredModel(estimated.domain_sizes, estimated.phi.index_sets, estimated.factor_tables(),
                             reward, gamma, mu0)
    if estimated.kind == MLE:
        P, unseen = estimated.transition_operator()
        return SparseModel(P.tocsr(), unseen, reward, gamma, mu0)
    raise InvalidInput(f"unknown model kind {estimated.kind!r}")


def _truth_model(cdp: FactoredCdp):
    return as_model(cdp) if cdp.n_states > DENSE_LIMIT else dense_model(cdp)


def optimal_value(cdp: FactoredCdp, tol: float = 1e-9) -> float:
    """V*(mu0) of the true CDP."""
    return float(cdp.mu0 @ value_iteration(_truth_model(cdp), tol).V)


def certainty_equivalence_plan(estimated: EstimatedModel, reward: np.ndarray, gamma: float,
                               true_cdp: FactoredCdp, phi: AbstractionPhi | None = None,
                               tol: float = 1e-9, v_star: float | None = None) -> PlanResult:
    """Plan greedily on the estimated model and score the plan on the true CDP.

    ``gap`` is V*(mu0) - V^pi(mu0) under the true dynamics.  Pass ``v_star``
    (from :func:`optimal_value`) to skip re-solving the true CDP in sweeps.
    """
    if phi is not None and estimated.kind == INVARIANT and phi != estimated.phi:
        raise InvalidInput("phi differs from the abstraction the model was estimated with")
    reward = np.asarray(reward, dtype=float)
    q_hat = value_iteration(estimated_model(estimated, reward, gamma), tol)
    actions = q_hat.greedy()
    policy = deterministic_policy(true_cdp, actions)
    truth = _truth_model(true_cdp)
    if v_star is None:
        v_star = optimal_value(true_cdp, tol)
    q_pi = policy_evaluation(truth, policy)
    v_pi = float(true_cdp.mu0 @ q_pi.values[np.arange(true_cdp.n_states), actions])
    return PlanResult(actions, v_star, v_pi, v_star - v_pi, q_hat)
