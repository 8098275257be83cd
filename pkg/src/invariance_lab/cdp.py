"""Finite factored contextual decision processes.

A :class:`FactoredCdp` stores one conditional table per state variable.
Factor ``i`` has shape ``(*[domain_sizes[j] for j in parents[i]], action_count,
domain_sizes[i])`` so that indexing it with the parent values and the action
yields the next-value distribution of variable ``i``.  Full states are
enumerated in C order over ``domain_sizes``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInput

ROW_TOL = 1e-12
APPENDIX_B_HORIZON = 10
# x = (0, 0, 0) -> x' = (0, 1, 1) in centred values, stored as domain indices
APPENDIX_B_QUERY = ((10, 10, 10), 0, (10, 11, 11))


@dataclass(frozen=True, eq=False)
class FactoredCdp:
    domain_sizes: tuple[int, ...]
    action_count: int
    parents: tuple[tuple[int, ...], ...]
    factors: tuple[np.ndarray, ...]
    reward: np.ndarray  # (n_states, action_count)
    r_max: float
    gamma: float
    mu0: np.ndarray  # (n_states,)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "domain_sizes", tuple(int(n) for n in self.domain_sizes))
        object.__setattr__(self, "parents", tuple(tuple(int(j) for j in p) for p in self.parents))
        factors = tuple(np.array(f, dtype=float) for f in self.factors)
        reward = np.array(self.reward, dtype=float)
        mu0 = np.array(self.mu0, dtype=float)
        for arr in (*factors, reward, mu0):
            arr.flags.writeable = False
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "r_max", float(self.r_max))
        object.__setattr__(self, "gamma", float(self.gamma))
        self.validate()

    @property
    def d(self) -> int:
        return len(self.domain_sizes)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.domain_sizes))

    def validate(self) -> None:
        d = self.d
        if d < 1 or any(n < 1 for n in self.domain_sizes):
            raise InvalidInput("need at least one variable with a nonempty domain")
        if self.action_count < 1:
            raise InvalidInput("action_count must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidInput(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if len(self.parents) != d or len(self.factors) != d:
            raise InvalidInput("parents and factors need one entry per variable")
        for i, (pa, f) in enumerate(zip(self.parents, self.factors)):
            if any(j < 0 or j >= d for j in pa):
                raise InvalidInput(f"parent set of variable {i} out of range: {pa}")
            if list(pa) != sorted(set(pa)):
                raise InvalidInput(f"parent set of variable {i} must be sorted and duplicate-free: {pa}")
            shape = tuple(self.domain_sizes[j] for j in pa) + (self.action_count, self.domain_sizes[i])
            if f.shape != shape:
                raise InvalidInput(f"factor {i} has shape {f.shape}, expected {shape}")
            if np.any(f < 0) or np.any(np.abs(f.sum(axis=-1) - 1.0) > ROW_TOL):
                raise InvalidInput(f"factor {i} has a row that is not a probability distribution")
        if self.reward.shape != (self.n_states, self.action_count):
            raise InvalidInput(f"reward has shape {self.reward.shape}, expected {(self.n_states, self.action_count)}")
        if np.any(self.reward < 0) or np.any(self.reward > self.r_max):
            raise InvalidInput("reward entries must lie in [0, r_max]")
        if self.mu0.shape != (self.n_states,):
            raise InvalidInput("mu0 must be a distribution over full states")
        if np.any(self.mu0 < 0) or abs(self.mu0.sum() - 1.0) > ROW_TOL:
            raise InvalidInput("mu0 must sum to 1")

    # -- state indexing -------------------------------------------------------

    def check_state(self, x: Sequence[int]) -> tuple[int, ...]:
        x = tuple(int(v) for v in x)
        if len(x) != self.d or any(v < 0 or v >= n for v, n in zip(x, self.domain_sizes)):
            raise InvalidInput(f"state {x} is not valid for domain sizes {self.domain_sizes}")
        return x

    def check_action(self, a: int) -> int:
        if not 0 <= int(a) < self.action_count:
            raise InvalidInput(f"action {a} out of range [0, {self.action_count})")
        return int(a)

    def state_index(self, x: Sequence[int]) -> int:
        return int(np.ravel_multi_index(self.check_state(x), self.domain_sizes))

    def state_vector(self, index: int) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unravel_index(index, self.domain_sizes))

    def all_states(self) -> np.ndarray:
        """(n_states, d) array of every full state, in index order."""
        grids = np.indices(self.domain_sizes).reshape(self.d, -1)
        return grids.T.copy()

    def factor_row(self, i: int, x: Sequence[int], a: int) -> np.ndarray:
        return self.factors[i][tuple(x[j] for j in self.parents[i]) + (a,)]

    def factor_rows_all(self, i: int) -> np.ndarray:
        """(n_states, action_count, D_i) next-value distributions of variable i."""
        if not self.parents[i]:
            return np.broadcast_to(self.factors[i], (self.n_states,) + self.factors[i].shape)
        states = self.all_states()
        return self.factors[i][tuple(states[:, j] for j in self.parents[i])]

    def __eq__(self, other):
        if not isinstance(other, FactoredCdp):
            return NotImplemented
        return (
            self.domain_sizes == other.domain_sizes
            and self.action_count == other.action_count
            and self.parents == other.parents
            and all(np.array_equal(f, g) for f, g in zip(self.factors, other.factors))
            and np.array_equal(self.reward, other.reward)
            and self.r_max == other.r_max
            and self.gamma == other.gamma
            and np.array_equal(self.mu0, other.mu0)
        )

    __hash__ = None

    # -- serialization --------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "domain_sizes": list(self.domain_sizes),
            "action_count": self.action_count,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "parents": [list(p) for p in self.parents],
            "factors": [f.tolist() for f in self.factors],
            "reward": self.reward.tolist(),
            "mu0": self.mu0.tolist(),
            "params": self.params,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FactoredCdp":
        try:
            cdp = cls(
                domain_sizes=tuple(doc["domain_sizes"]),
                action_count=int(doc["action_count"]),
                parents=tuple(tuple(p) for p in doc["parents"]),
                factors=tuple(np.array(f, dtype=float) for f in doc["factors"]),
                reward=np.array(doc["reward"], dtype=float),
                r_max=doc["r_max"],
                gamma=doc["gamma"],
                mu0=np.array(doc["mu0"], dtype=float),
                params=dict(doc.get("params", {})),
            )
        except KeyError as exc:
            raise InvalidInput(f"CDP document missing key {exc}") from None
        if "d" in doc and doc["d"] != cdp.d:
            raise InvalidInput("field d disagrees with domain_sizes")
        return cdp


def save_cdp(cdp: FactoredCdp, path) -> None:
    with open(path, "w") as fh:
        json.dump(cdp.to_json(), fh)


def load_cdp(path) -> FactoredCdp:
    with open(path) as fh:
        return FactoredCdp.from_json(json.load(fh))


# -- policies and data ----------------------------------------------------------


@dataclass(frozen=True)
class SoftIntervention:
    """Additive integer noise on the current value of one state variable.

    Applied before the agent acts, so the recorded state is the intervened one
    and the transition kernel itself is left untouched.
    """

    variable: int
    offsets: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.offsets) != len(self.probs) or abs(sum(self.probs) - 1.0) > ROW_TOL:
            raise InvalidInput("intervention offsets/probs must form a distribution")


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray  # (n_states, action_count)
    id: str = "env0"
    interventions: tuple[SoftIntervention, ...] = ()

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2 or np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_TOL):
            raise InvalidInput("policy rows must be probability distributions")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    def action_probs(self, state_index: int) -> np.ndarray:
        return self.probs[state_index]


def uniform_policy(cdp: FactoredCdp, id: str = "env0", interventions=()) -> Policy:
    probs = np.full((cdp.n_states, cdp.action_count), 1.0 / cdp.action_count)
    return Policy(probs, id, tuple(interventions))


def random_policy(cdp: FactoredCdp, rng: np.random.Generator, id: str = "env0") -> Policy:
    probs = rng.dirichlet(np.ones(cdp.action_count), size=cdp.n_states)
    return Policy(probs / probs.sum(axis=1, keepdims=True), id)


def deterministic_policy(cdp: FactoredCdp, actions: Sequence[int], id: str = "greedy") -> Policy:
    actions = np.asarray(actions, dtype=int)
    probs = np.zeros((cdp.n_states, cdp.action_count))
    probs[np.arange(cdp.n_states), actions] = 1.0
    return Policy(probs, id)


@dataclass(frozen=True)
class TransitionRecord:
    x: tuple[int, ...]
    a: int
    x_next: tuple[int, ...]
    r: float
    env_id: str
    t: int


@dataclass(frozen=True, eq=False)
class EnvironmentDataset:
    """Transitions collected under one fixed policy, stored column-wise."""

    env_id: str
    x: np.ndarray
    a: np.ndarray
    x_next: np.ndarray
    r: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.a)

    @property
    def records(self) -> list[TransitionRecord]:
        return [
            TransitionRecord(tuple(int(v) for v in self.x[k]), int(self.a[k]),
                             tuple(int(v) for v in self.x_next[k]), float(self.r[k]),
                             self.env_id, int(self.t[k]))
            for k in range(len(self))
        ]

    @classmethod
    def from_records(cls, env_id: str, records: Sequence[TransitionRecord], d: int) -> "EnvironmentDataset":
        if any(rec.env_id != env_id for rec in records):
            raise InvalidInput("all records of a dataset must carry the same env_id")
        n = len(records)
        return cls(
            env_id,
            np.array([rec.x for rec in records], dtype=int).reshape(n, d),
            np.array([rec.a for rec in records], dtype=int),
            np.array([rec.x_next for rec in records], dtype=int).reshape(n, d),
            np.array([rec.r for rec in records], dtype=float),
            np.array([rec.t for rec in records], dtype=int),
        )

    def head(self, n: int) -> "EnvironmentDataset":
        return EnvironmentDataset(self.env_id, self.x[:n], self.a[:n], self.x_next[:n], self.r[:n], self.t[:n])


def concat_datasets(datasets: Sequence[EnvironmentDataset] | EnvironmentDataset):
    """Pool several datasets into plain arrays ``(x, a, x_next)``."""
    if isinstance(datasets, EnvironmentDataset):
        datasets = [datasets]
    datasets = list(datasets)
    if not datasets:
        raise InvalidInput("no datasets given")
    d = datasets[0].x.shape[1]
    x = np.concatenate([ds.x for ds in datasets]).reshape(-1, d)
    a = np.concatenate([ds.a for ds in datasets])
    x_next = np.concatenate([ds.x_next for ds in datasets]).reshape(-1, d)
    return x, a, x_next


def write_jsonl(datasets: Iterable[EnvironmentDataset], path) -> None:
    with open(path, "w") as fh:
        for ds in datasets:
            for k in range(len(ds)):
                fh.write(json.dumps({
                    "env": ds.env_id,
                    "t": int(ds.t[k]),
                    "x": [int(v) for v in ds.x[k]],
                    "a": int(ds.a[k]),
                    "x_next": [int(v) for v in ds.x_next[k]],
                    "r": float(ds.r[k]),
                }) + "\n")


def read_jsonl(path) -> list[EnvironmentDataset]:
    grouped: dict[str, list[TransitionRecord]] = {}
    d = None
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            rec = TransitionRecord(tuple(row["x"]), row["a"], tuple(row["x_next"]), row["r"], row["env"], row["t"])
            d = len(rec.x)
            grouped.setdefault(rec.env_id, []).append(rec)
    return [EnvironmentDataset.from_records(env, recs, d) for env, recs in grouped.items()]


# -- transition semantics ---------------------------------------------------------


def compose_transition(cdp: FactoredCdp, x: Sequence[int], a: int) -> np.ndarray:
    """Full next-state distribution as the product of the per-variable factors.

    Returned as a flat array over state indices.
    """
    x = cdp.check_state(x)
    a = cdp.check_action(a)
    joint = np.ones(())
    for i in range(cdp.d):
        joint = np.multiply.outer(joint, cdp.factor_row(i, x, a))
    return joint.reshape(-1)


def transition_matrix(cdp: FactoredCdp, max_states: int = 5000) -> np.ndarray:
    """Dense (n_states, action_count, n_states) kernel, built with one einsum."""
    from .errors import TooLarge

    if cdp.n_states > max_states:
        raise TooLarge(f"{cdp.n_states} states exceed the dense-kernel cap {max_states}")
    rows = [cdp.factor_rows_all(i) for i in range(cdp.d)]  # each (S, A, D_i)
    joint = rows[0]
    for r in rows[1:]:
        joint = (joint[..., None] * r[:, :, None, :]).reshape(cdp.n_states, cdp.action_count, -1)
    return joint


def _categorical(rng: np.random.Generator, rows: np.ndarray) -> np.ndarray:
    u = rng.random(rows.shape[0])
    idx = (np.cumsum(rows, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(idx, rows.shape[1] - 1)


def _rollout(cdp: FactoredCdp, policy: Policy, episodes: int, horizon: int, rng: np.random.Generator):
    """Simulate ``episodes`` independent episodes in lock-step.

    Returns arrays shaped (episodes, horizon, ...).
    """
    d = cdp.d
    xs = np.empty((episodes, horizon, d), dtype=int)
    acts = np.empty((episodes, horizon), dtype=int)
    nxt = np.empty((episodes, horizon, d), dtype=int)
    rew = np.empty((episodes, horizon), dtype=float)
    if episodes == 0 or horizon == 0:
        return xs, acts, nxt, rew
    dims = np.array(cdp.domain_sizes)
    s0 = _categorical(rng, np.broadcast_to(cdp.mu0, (episodes, cdp.n_states)))
    x = np.stack(np.unravel_index(s0, cdp.domain_sizes), axis=1)
    for t in range(horizon):
        for iv in policy.interventions:
            k = _categorical(rng, np.broadcast_to(np.asarray(iv.probs), (episodes, len(iv.probs))))
            shifted = x[:, iv.variable] + np.asarray(iv.offsets)[k]
            x[:, iv.variable] = np.clip(shifted, 0, dims[iv.variable] - 1)
        s = np.ravel_multi_index(x.T, cdp.domain_sizes)
        a = _categorical(rng, policy.probs[s])
        x_next = np.empty_like(x)
        for i in range(d):
            rows = cdp.factors[i][tuple(x[:, j] for j in cdp.parents[i]) + (a,)]
            x_next[:, i] = _categorical(rng, rows)
        xs[:, t], acts[:, t], nxt[:, t], rew[:, t] = x, a, x_next, cdp.reward[s, a]
        x = x_next
    return xs, acts, nxt, rew


def sample_trajectory(cdp: FactoredCdp, policy: Policy, horizon: int, seed: int) -> list[TransitionRecord]:
    if horizon < 0:
        raise InvalidInput("horizon must be >= 0")
    rng = np.random.default_rng(seed)
    xs, acts, nxt, rew = _rollout(cdp, policy, 1, horizon, rng)
    return [
        TransitionRecord(tuple(int(v) for v in xs[0, t]), int(acts[0, t]),
                         tuple(int(v) for v in nxt[0, t]), float(rew[0, t]), policy.id, t)
        for t in range(horizon)
    ]


def sample_next(cdp: FactoredCdp, x: Sequence[int], a: int, size: int, seed: int) -> np.ndarray:
    """Draw ``size`` next-state indices from a fixed (x, a)."""
    x = cdp.check_state(x)
    a = cdp.check_action(a)
    rng = np.random.default_rng(seed)
    cols = [_categorical(rng, np.broadcast_to(cdp.factor_row(i, x, a), (size, cdp.domain_sizes[i])))
            for i in range(cdp.d)]
    return np.ravel_multi_index(tuple(cols), cdp.domain_sizes)


def collect_dataset(cdp: FactoredCdp, policy: Policy, episodes: int, horizon: int,
                    rng: np.random.Generator) -> EnvironmentDataset:
    xs, acts, nxt, rew = _rollout(cdp, policy, episodes, horizon, rng)
    n = episodes * horizon
    return EnvironmentDataset(
        policy.id,
        xs.reshape(n, cdp.d),
        acts.reshape(n),
        nxt.reshape(n, cdp.d),
        rew.reshape(n),
        np.tile(np.arange(horizon), episodes),
    )


def collect_environments(cdp: FactoredCdp, policies: Sequence[Policy], episodes: int, horizon: int,
                         seed: int) -> list[EnvironmentDataset]:
    """One dataset of ``episodes * horizon`` records per policy."""
    if not policies:
        raise InvalidInput("at least one policy is required")
    if episodes < 0 or horizon < 0:
        raise InvalidInput("episodes and horizon must be >= 0")
    streams = np.random.SeedSequence(seed).spawn(len(policies))
    return [collect_dataset(cdp, pol, episodes, horizon, np.random.default_rng(ss))
            for pol, ss in zip(policies, streams)]


def collect_samples(cdp: FactoredCdp, policy: Policy, n: int, horizon: int, seed) -> EnvironmentDataset:
    """Exactly ``n`` records: whole episodes, the last one truncated."""
    episodes = math.ceil(n / horizon) if horizon else 0
    rng = np.random.default_rng(seed)
    return collect_dataset(cdp, policy, episodes, horizon, rng).head(n)


# -- instance generators ----------------------------------------------------------


def synth_random_cdp(d: int, domain_size: int, action_count: int, max_parents: int,
                     gamma: float = 0.9, seed: int = 0, r_max: float = 1.0) -> FactoredCdp:
    if min(d, domain_size, action_count) < 1:
        raise InvalidInput("d, domain_size and action_count must be >= 1")
    if not 0 <= max_parents <= d:
        raise InvalidInput(f"max_parents={max_parents} must lie in [0, d={d}]")
    rng = np.random.default_rng(seed)
    candidates = [c for k in range(max_parents + 1) for c in itertools.combinations(range(d), k)]
    parents, factors = [], []
    for i in range(d):
        pa = candidates[rng.integers(len(candidates))]
        shape = (domain_size,) * len(pa) + (action_count,)
        f = rng.dirichlet(np.ones(domain_size), size=shape)
        parents.append(pa)
        factors.append(f / f.sum(axis=-1, keepdims=True))
    n_states = domain_size ** d
    reward = rng.uniform(0.0, r_max, size=(n_states, action_count))
    mu0 = rng.dirichlet(np.ones(n_states))
    return FactoredCdp(
        (domain_size,) * d, action_count, tuple(parents), tuple(factors), reward, r_max, gamma,
        mu0 / mu0.sum(),
        params={"generator": "synth_random_cdp", "seed": seed, "max_parents": max_parents},
    )


def _normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def _linear_kernel(half_width: int, rho: float, action_count: int, noise_scale: float) -> np.ndarray:
    size = 2 * half_width + 1
    edges = np.arange(-half_width, half_width) + 0.5  # cut points between neighbouring values
    table = np.empty((size, action_count, size))
    for v in range(size):
        for a in range(action_count):
            mean = rho * (v - half_width) + (a - (action_count - 1) // 2)
            cdf = np.array([_normal_cdf((c - mean) / noise_scale) for c in edges])
            table[v, a] = np.diff(np.concatenate([[0.0], cdf, [1.0]]))
    return table


def linear_factored_mdp(d: int = 3, half_width: int = 10, action_count: int = 1, rho: float = 0.9,
                        noise_scale: float = 1.0, gamma: float = 0.9, r_max: float = 1.0) -> FactoredCdp:
    """Integer-valued linear dynamics, one self-parent per variable.

    Variable i moves to ``round(rho * x_i + (a - (A-1)//2) + noise)`` with
    Gaussian noise, and mass leaving ``[-half_width, half_width]`` is piled on
    the boundary value.  Rounding a Gaussian of unit scale keeps the
    conditional mean and variance constant in ``x_i`` to about 1e-8, so the
    data look like a linear SEM to a regression.  Reward is ``r_max`` at the
    origin and falls linearly with the mean absolute coordinate.
    """
    size = 2 * half_width + 1
    kernel = _linear_kernel(half_width, rho, action_count, noise_scale)
    dims = (size,) * d
    states = np.indices(dims).reshape(d, -1).T - half_width
    closeness = 1.0 - np.abs(states).mean(axis=1) / half_width
    reward = np.repeat((r_max * closeness)[:, None], action_count, axis=1)
    mu0 = np.zeros(size ** d)
    mu0[np.ravel_multi_index((half_width,) * d, dims)] = 1.0
    return FactoredCdp(
        dims, action_count, tuple((i,) for i in range(d)), tuple(kernel for _ in range(d)),
        reward, r_max, gamma, mu0,
        params={
            "generator": "linear_factored_mdp", "half_width": half_width, "rho": rho,
            "noise_scale": noise_scale, "values": [-half_width, half_width],
        },
    )


def intervention_policies(cdp: FactoredCdp, offsets: Sequence[int] = (0, 1),
                          probs: Sequence[float] = (0.5, 0.5)) -> list[Policy]:
    """One environment per state variable, each softly intervening on that variable."""
    return [
        uniform_policy(cdp, f"env{e}", (SoftIntervention(e, tuple(offsets), tuple(probs)),))
        for e in range(cdp.d)
    ]


def appendix_b_mdp(action_count: int = 1) -> tuple[FactoredCdp, list[Policy]]:
    """Three-variable linear MDP on integers -10..10 with three intervention environments."""
    cdp = linear_factored_mdp(d=3, half_width=10, action_count=action_count)
    cdp = replace(cdp, params={
        **cdp.params,
        "horizon": APPENDIX_B_HORIZON,
        "environments": "env e adds noise in {0, +1} (p=1/2 each) to variable e before acting",
    })
    return cdp, intervention_policies(cdp)
