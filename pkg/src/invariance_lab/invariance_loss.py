"""Numeric kernel of the similarity-based invariance penalty.

Two batches of predicted next states ``z1`` and ``z2`` (shape ``(n, d)``) are
embedded by a fixed linear critic, compared by cosine similarity, turned into
row distributions by softmax, and scored with a KL divergence whose second
argument is held constant.  Gradients are analytic; a finite-difference
suite checks them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DivergentKL, InvalidInput

log = logging.getLogger(__name__)

PER_DIMENSION = "per_dimension"
PER_STATE = "per_state"
STOP_P2 = "p2"  # p2 is a constant, as with ``p2.detach()``
STOP_NONE = "none"  # differentiate through both softmax matrices


@dataclass(frozen=True)
class PredictionMatrix:
    entries: np.ndarray

    def __post_init__(self):
        m = np.array(self.entries, dtype=float)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise InvalidInput(f"prediction matrix must be 2-D and nonempty, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidInput("prediction matrix has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def k(self) -> int:
        return self.entries.shape[1]


def _matrix(m) -> np.ndarray:
    return m.entries if isinstance(m, PredictionMatrix) else PredictionMatrix(m).entries


@dataclass(frozen=True)
class LossConfig:
    mode: str = PER_DIMENSION
    selected_dim: int = 0
    stop_gradient_side: str = STOP_P2

    def __post_init__(self):
        if self.mode not in (PER_DIMENSION, PER_STATE):
            raise InvalidInput(f"unknown mode {self.mode!r}")
        if self.stop_gradient_side not in (STOP_P2, STOP_NONE):
            raise InvalidInput(f"unknown stop-gradient side {self.stop_gradient_side!r}")
        if self.mode == PER_DIMENSION and self.selected_dim < 0:
            raise InvalidInput("selected_dim must be nonnegative")


@dataclass(frozen=True)
class LinearCritic:
    """Fixed affine embedding ``g(u) = u @ W + b``."""

    W: np.ndarray  # (in_dim, k)
    b: np.ndarray  # (k,)

    def __post_init__(self):
        W, b = np.asarray(self.W, dtype=float), np.asarray(self.b, dtype=float)
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise InvalidInput(f"critic shapes W{W.shape}, b{b.shape} are incompatible")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    def __call__(self, u: np.ndarray) -> np.ndarray:
        if u.shape[1] != self.in_dim:
            raise InvalidInput(f"critic expects {self.in_dim} inputs, got {u.shape[1]}")
        return u @ self.W + self.b

    @classmethod
    def random(cls, in_dim: int, k: int, rng: np.random.Generator) -> "LinearCritic":
        return cls(rng.normal(size=(in_dim, k)) / np.sqrt(in_dim), 0.1 * rng.normal(size=k))


def critic_input_dim(d: int, mode: str) -> int:
    return d + 1 if mode == PER_DIMENSION else 2 * d


def _unit_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("%d zero-norm embedding rows; their similarities are set to 0", int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    return np.where(zero[:, None], 0.0, m / safe[:, None]), norms


def similarity_matrix(pred1, pred2) -> np.ndarray:
    """Cosine similarity between every row of ``pred1`` and every row of ``pred2``."""
    a, b = _matrix(pred1), _matrix(pred2)
    if a.shape != b.shape:
        raise InvalidInput(f"shape mismatch {a.shape} vs {b.shape}")
    return _unit_rows(a)[0] @ _unit_rows(b)[0].T


def row_softmax(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def kl_rows(p1: np.ndarray, p2: np.ndarray) -> float:
    """Mean over rows of KL(p1[a] || p2[a]), with 0 log(0/q) = 0."""
    p1, p2 = np.asarray(p1, dtype=float), np.asarray(p2, dtype=float)
    if p1.shape != p2.shape:
        raise InvalidInput(f"shape mismatch {p1.shape} vs {p2.shape}")
    support = p1 > 0
    if np.any(support & (p2 <= 0)):
        raise DivergentKL("p2 vanishes where p1 has mass")
    terms = np.zeros_like(p1)
    terms[support] = p1[support] * (np.log(p1[support]) - np.log(p2[support]))
    return float(terms.sum(axis=1).mean())


def _critic_input(z: np.ndarray, cfg: LossConfig) -> np.ndarray:
    n, d = z.shape
    if cfg.mode == PER_DIMENSION:
        if cfg.selected_dim >= d:
            raise InvalidInput(f"selected_dim {cfg.selected_dim} out of range for d={d}")
        onehot = np.zeros((n, d))
        onehot[:, cfg.selected_dim] = 1.0
        return np.hstack([z[:, [cfg.selected_dim]], onehot])
    # per-state: the whole prediction with an all-ones indicator, so d = 1 matches dimension 0
    return np.hstack([z, np.ones((n, d))])


def _loss_parts(z1: np.ndarray, z2: np.ndarray, cfg: LossConfig, critic: LinearCritic):
    e1 = critic(_critic_input(z1, cfg))
    e2 = critic(_critic_input(z2, cfg))
    u1, n1 = _unit_rows(e1)
    u2, _ = _unit_rows(e2)
    S = u1 @ u2.T  # sim(g z1, g z2); sim(g z2, g z1) is its transpose
    p1, p2 = row_softmax(S), row_softmax(S.T)
    return e1, u1, n1, u2, S, p1, p2


def invariance_loss(z1, z2, cfg: LossConfig, critic: LinearCritic) -> tuple[float, np.ndarray]:
    """KL between the row-softmaxed similarity matrix and its mirror image.

    Returns ``(loss, grad_z1)``.  With ``stop_gradient_side="p2"`` the second
    softmax matrix is a constant; with ``"none"`` the gradient also flows
    through it.
    """
    z1, z2 = _matrix(z1), _matrix(z2)
    if z1.shape != z2.shape:
        raise InvalidInput(f"shape mismatch {z1.shape} vs {z2.shape}")
    n, d = z1.shape
    e1, u1, n1, u2, S, p1, p2 = _loss_parts(z1, z2, cfg, critic)
    loss = kl_rows(p1, p2)

    log_ratio = np.log(p1) - np.log(p2)
    dS = p1 * (log_ratio - (p1 * log_ratio).sum(axis=1, keepdims=True)) / n
    if cfg.stop_gradient_side == STOP_NONE:
        dS += (-(p1 - p2) / n).T
    # back through the cosine: d u1_a = sum_b dS[a, b] u2_b, then project out the radial part
    G = dS @ u2
    radial = (G * u1).sum(axis=1, keepdims=True) * u1
    de1 = np.where(n1[:, None] > 0, (G - radial) / np.where(n1 > 0, n1, 1.0)[:, None], 0.0)
    d_in = de1 @ critic.W.T
    grad = np.zeros_like(z1)
    if cfg.mode == PER_DIMENSION:
        grad[:, cfg.selected_dim] = d_in[:, 0]
    else:
        grad = d_in[:, :d]
    return loss, grad


def total_model_loss(pred_next, true_next, inv: float, weight: float) -> float:
    """Mean squared prediction error over samples and variables plus ``weight * inv``."""
    pred_next, true_next = np.asarray(pred_next, dtype=float), np.asarray(true_next, dtype=float)
    if pred_next.shape != true_next.shape:
        raise InvalidInput(f"shape mismatch {pred_next.shape} vs {true_next.shape}")
    if weight < 0:
        raise InvalidInput("weight must be nonnegative")
    return float(np.mean((pred_next - true_next) ** 2) + weight * inv)


# -- gradient checking --------------------------------------------------------------


def finite_difference_grad(z1, z2, cfg: LossConfig, critic: LinearCritic, h: float = 1e-5) -> np.ndarray:
    """Central differences of the loss in z1, with p2 frozen at the base point
    when the config says so."""
    z1, z2 = np.array(_matrix(z1)), _matrix(z2)
    frozen_p2 = _loss_parts(z1, z2, cfg, critic)[6] if cfg.stop_gradient_side == STOP_P2 else None

    def f(z):
        *_, p1, p2 = _loss_parts(z, z2, cfg, critic)
        return kl_rows(p1, frozen_p2 if frozen_p2 is not None else p2)

    grad = np.zeros_like(z1)
    for idx in np.ndindex(z1.shape):
        zp, zm = z1.copy(), z1.copy()
        zp[idx] += h
        zm[idx] -= h
        grad[idx] = (f(zp) - f(zm)) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entrywise gap, relative to the largest numeric entry."""
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass
class GradCheck:
    seed: int
    mode: str
    stop_gradient_side: str
    shape: tuple[int, int]
    loss: float
    rel_error: float
    passed: bool


def gradient_check_suite(instances: int = 20, seed: int = 0, h: float = 1e-5, threshold: float = 1e-4,
                         k: int = 4) -> list[GradCheck]:
    """Analytic vs central-difference gradients on seeded random instances."""
    out = []
    for s in range(seed, seed + instances):
        rng = np.random.default_rng(s)
        n, d = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        mode = PER_DIMENSION if s % 2 == 0 else PER_STATE
        side = STOP_P2 if s % 4 < 2 else STOP_NONE
        cfg = LossConfig(mode, int(rng.integers(0, d)), side)
        critic = LinearCritic.random(critic_input_dim(d, mode), k, rng)
        z1, z2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        loss, grad = invariance_loss(z1, z2, cfg, critic)
        err = relative_error(grad, finite_difference_grad(z1, z2, cfg, critic, h))
        out.append(GradCheck(s, mode, side, (n, d), loss, err, err < threshold))
    return out
