"""Per-variable state abstractions and exact invariance checks.

An abstraction keeps, for every variable ``i``, a set of state-variable
indices; ``phi_i(x)`` is ``x`` restricted to that set and the joint
abstraction is the tuple of all ``phi_i(x)``.  Every checker here enumerates
states exactly; nothing is sampled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cdp import FactoredCdp, transition_matrix
from .errors import InvalidInput, TooLarge

DEFAULT_MAX_PAIRS = 10**6


@dataclass(frozen=True)
class AbstractionPhi:
    index_sets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        sets = tuple(tuple(int(j) for j in s) for s in self.index_sets)
        for s in sets:
            if list(s) != sorted(set(s)) or any(j < 0 for j in s):
                raise InvalidInput(f"index set {s} must be sorted, duplicate-free and nonnegative")
        object.__setattr__(self, "index_sets", sets)

    @property
    def d(self) -> int:
        return len(self.index_sets)

    @classmethod
    def identity(cls, d: int) -> "AbstractionPhi":
        return cls(tuple(tuple(range(d)) for _ in range(d)))

    def project(self, i: int, x: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(x[j]) for j in self.index_sets[i])

    def __call__(self, x: Sequence[int]) -> tuple[tuple[int, ...], ...]:
        return tuple(self.project(i, x) for i in range(self.d))

    @property
    def used_variables(self) -> tuple[int, ...]:
        return tuple(sorted(set().union(*map(set, self.index_sets))))

    def check_against(self, cdp: FactoredCdp) -> None:
        if self.d != cdp.d or any(j >= cdp.d for s in self.index_sets for j in s):
            raise InvalidInput(f"abstraction {self.index_sets} does not fit a CDP with d={cdp.d}")

    def component_labels(self, cdp: FactoredCdp, i: int) -> np.ndarray:
        """Integer label of phi_i(x) for every state index."""
        return _labels(cdp, self.index_sets[i])

    def joint_labels(self, cdp: FactoredCdp) -> np.ndarray:
        return _labels(cdp, self.used_variables)

    def to_json(self) -> list[list[int]]:
        return [list(s) for s in self.index_sets]

    @classmethod
    def from_json(cls, doc) -> "AbstractionPhi":
        return cls(tuple(tuple(s) for s in doc))


def save_phi(phi: AbstractionPhi, path) -> None:
    with open(path, "w") as fh:
        json.dump(phi.to_json(), fh)


def load_phi(path) -> AbstractionPhi:
    with open(path) as fh:
        return AbstractionPhi.from_json(json.load(fh))


def _labels(cdp: FactoredCdp, variables: Sequence[int]) -> np.ndarray:
    states = cdp.all_states()
    if not variables:
        return np.zeros(cdp.n_states, dtype=int)
    dims = tuple(cdp.domain_sizes[j] for j in variables)
    return np.ravel_multi_index(tuple(states[:, j] for j in variables), dims)


def parent_abstraction(cdp: FactoredCdp) -> AbstractionPhi:
    return AbstractionPhi(cdp.parents)


def project(phi: AbstractionPhi, i: int, x: Sequence[int]) -> tuple[int, ...]:
    return phi.project(i, x)


def _guard(cdp: FactoredCdp, phi: AbstractionPhi, max_pairs: int) -> None:
    phi.check_against(cdp)
    if cdp.n_states ** 2 > max_pairs:
        raise TooLarge(f"{cdp.n_states}^2 state pairs exceed the enumeration cap {max_pairs}")


@dataclass(frozen=True)
class Verdict:
    holds: bool
    counterexample: tuple | None = None  # (x1, x2, a, i)

    def __bool__(self):
        return self.holds


def check_model_invariance(cdp: FactoredCdp, phi: AbstractionPhi,
                           max_pairs: int = DEFAULT_MAX_PAIRS) -> Verdict:
    """Equal phi_i projections must give identical next-value distributions of variable i."""
    _guard(cdp, phi, max_pairs)
    for i in range(cdp.d):
        rows = cdp.factor_rows_all(i)
        labels = phi.component_labels(cdp, i)
        _, first = np.unique(labels, return_index=True)
        rep = first[np.searchsorted(np.unique(labels), labels)]
        mismatch = np.any(rows != rows[rep], axis=-1)  # (S, A)
        if mismatch.any():
            s, a = np.argwhere(mismatch)[0]
            return Verdict(False, (cdp.state_vector(rep[s]), cdp.state_vector(s), int(a), i))
    return Verdict(True)


def coarseness_violations(cdp: FactoredCdp, phi: AbstractionPhi,
                          max_pairs: int = DEFAULT_MAX_PAIRS) -> list[tuple]:
    """Diagnostic for the reverse direction: states whose variable-i dynamics
    agree for every action but whose phi_i projections differ."""
    _guard(cdp, phi, max_pairs)
    found = []
    for i in range(cdp.d):
        rows = cdp.factor_rows_all(i).reshape(cdp.n_states, -1)
        labels = phi.component_labels(cdp, i)
        _, groups = np.unique(rows, axis=0, return_inverse=True)
        groups = groups.reshape(-1)
        for g in np.unique(groups):
            members = np.flatnonzero(groups == g)
            distinct = np.unique(labels[members])
            if len(distinct) > 1:
                a = members[labels[members] == distinct[0]][0]
                b = members[labels[members] == distinct[1]][0]
                found.append((i, cdp.state_vector(a), cdp.state_vector(b)))
    return found


@dataclass(frozen=True)
class EpsilonProfile:
    eps_p: tuple[float, ...]
    eps_r: float

    @property
    def exact(self) -> bool:
        return self.eps_r == 0.0 and all(e == 0.0 for e in self.eps_p)


def _max_pairwise_l1(rows: np.ndarray) -> float:
    uniq = np.unique(rows, axis=0)
    if len(uniq) < 2:
        return 0.0
    return float(np.abs(uniq[:, None, :] - uniq[None, :, :]).sum(axis=-1).max())


def epsilon_model_invariance(cdp: FactoredCdp, phi: AbstractionPhi,
                             max_pairs: int = DEFAULT_MAX_PAIRS) -> tuple[float, ...]:
    """Per-variable sup of the L1 gap between next-value distributions over
    pairs that share phi_i, for any action."""
    _guard(cdp, phi, max_pairs)
    eps = []
    for i in range(cdp.d):
        rows = cdp.factor_rows_all(i)
        labels = phi.component_labels(cdp, i)
        worst = 0.0
        for lab in np.unique(labels):
            block = rows[labels == lab]
            for a in range(cdp.action_count):
                worst = max(worst, _max_pairwise_l1(block[:, a, :]))
        eps.append(worst)
    return tuple(eps)


def epsilon_reward(cdp: FactoredCdp, phi: AbstractionPhi, max_pairs: int = DEFAULT_MAX_PAIRS) -> float:
    _guard(cdp, phi, max_pairs)
    labels = phi.joint_labels(cdp)
    worst = 0.0
    for lab in np.unique(labels):
        block = cdp.reward[labels == lab]
        worst = max(worst, float((block.max(axis=0) - block.min(axis=0)).max()))
    return worst


def epsilon_profile(cdp: FactoredCdp, phi: AbstractionPhi, max_pairs: int = DEFAULT_MAX_PAIRS) -> EpsilonProfile:
    return EpsilonProfile(epsilon_model_invariance(cdp, phi, max_pairs), epsilon_reward(cdp, phi, max_pairs))


def block_membership(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (abstract index per state, one-hot membership matrix (S, m))."""
    _, inverse = np.unique(labels, return_inverse=True)
    inverse = inverse.reshape(-1)
    member = np.zeros((len(labels), inverse.max() + 1))
    member[np.arange(len(labels)), inverse] = 1.0
    return inverse, member


def check_bisimulation(cdp: FactoredCdp, phi: AbstractionPhi, atol: float = 1e-12,
                       max_pairs: int = DEFAULT_MAX_PAIRS) -> Verdict:
    """Model-irrelevance: merged states share rewards and lifted transitions."""
    _guard(cdp, phi, max_pairs)
    block, member = block_membership(phi.joint_labels(cdp))
    lifted = transition_matrix(cdp) @ member  # (S, A, m)
    _, first = np.unique(block, return_index=True)
    rep = first[block]
    bad_r = np.abs(cdp.reward - cdp.reward[rep]) > atol
    bad_p = np.any(np.abs(lifted - lifted[rep]) > atol, axis=-1)
    bad = bad_r | bad_p
    if bad.any():
        s, a = np.argwhere(bad)[0]
        return Verdict(False, (cdp.state_vector(rep[s]), cdp.state_vector(s), int(a), None))
    return Verdict(True)


def variable_marginal_grounding(cdp: FactoredCdp, phi: AbstractionPhi, atol: float = 1e-12,
                                max_pairs: int = DEFAULT_MAX_PAIRS) -> Verdict:
    """Reward-free grounding check.

    The next-state mass on each set {x' : x'_i = v}, summed from the full joint
    kernel, must depend on the current state only through phi_i(x).
    """
    _guard(cdp, phi, max_pairs)
    joint = transition_matrix(cdp).reshape((cdp.n_states, cdp.action_count) + cdp.domain_sizes)
    for i in range(cdp.d):
        other = tuple(2 + k for k in range(cdp.d) if k != i)
        mass = joint.sum(axis=other)  # (S, A, D_i)
        labels = phi.component_labels(cdp, i)
        _, first = np.unique(labels, return_index=True)
        rep = first[np.searchsorted(np.unique(labels), labels)]
        bad = np.any(np.abs(mass - mass[rep]) > atol, axis=-1)
        if bad.any():
            s, a = np.argwhere(bad)[0]
            return Verdict(False, (cdp.state_vector(rep[s]), cdp.state_vector(s), int(a), i))
    return Verdict(True)
