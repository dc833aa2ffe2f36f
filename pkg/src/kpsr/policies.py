"""Policies over open-loop (W+1)-step action blocks.

The policy mean is a linear function of the bundle-predicted shifted
observation embedding: softmax over block logits for discrete action sets,
a Gaussian over stacked action vectors for continuous ones.
"""

from dataclasses import dataclass

import numpy as np

from .features import _encode_array, _decode_array


def _unrank_block(idx: int, n_actions: int, horizon: int) -> tuple:
    out = []
    for pos in range(horizon - 1, -1, -1):
        out.append((idx // n_actions ** pos) % n_actions)
    return tuple(out)


@dataclass
class SoftmaxBlockPolicy:
    """Distribution over all |A|^(W+1) action blocks via linear logits."""

    theta: np.ndarray            # (n_blocks, d_x)
    n_actions: int
    horizon: int

    is_discrete = True

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape[0] != self.n_actions ** self.horizon:
            raise ValueError("theta rows must equal |A|^(W+1)")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("policy parameters must be finite")

    @property
    def n_blocks(self) -> int:
        return self.theta.shape[0]

    def block_probs(self, x: np.ndarray) -> np.ndarray:
        logits = self.theta @ np.asarray(x, dtype=float)
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def sample_indices(self, x, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.block_probs(x)
        u = rng.random(n)
        return np.searchsorted(np.cumsum(p), u, side="right").clip(0, self.n_blocks - 1)

    def block_actions(self, idx: int) -> tuple:
        return _unrank_block(idx, self.n_actions, self.horizon)

    def grad_log_prob(self, x: np.ndarray, idx: int) -> np.ndarray:
        """Score function d log pi(idx | x) / d theta, same shape as theta."""
        p = self.block_probs(x)
        coeff = -p
        coeff[idx] += 1.0
        return np.outer(coeff, x)

    def to_dict(self) -> dict:
        return {"kind": "softmax", "theta": _encode_array(self.theta),
                "n_actions": self.n_actions, "horizon": self.horizon}


@dataclass
class GaussianBlockPolicy:
    """Gaussian over stacked (W+1)-step action vectors, fixed noise scale."""

    theta: np.ndarray            # (horizon * action_dim, d_x)
    sigma: float
    action_dim: int
    horizon: int

    is_discrete = False

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.sigma < 0:
            raise ValueError("noise scale must be nonnegative")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("policy parameters must be finite")

    def mean_block(self, x: np.ndarray) -> np.ndarray:
        return (self.theta @ np.asarray(x, dtype=float)).reshape(self.horizon, self.action_dim)

    def sample_blocks(self, x, rng: np.random.Generator, n: int) -> list:
        mu = self.mean_block(x)
        draws = []
        for _ in range(n):
            noise = rng.standard_normal(mu.shape)
            draws.append(mu + self.sigma * noise)
        return draws

    def grad_log_prob(self, x: np.ndarray, block: np.ndarray) -> np.ndarray:
        mu = self.theta @ np.asarray(x, dtype=float)
        diff = (np.asarray(block, dtype=float).reshape(-1) - mu) / max(self.sigma ** 2, 1e-300)
        return np.outer(diff, x)

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "theta": _encode_array(self.theta),
                "sigma": self.sigma, "action_dim": self.action_dim,
                "horizon": self.horizon}


def uniform_policy(n_actions: int, horizon: int, d_x: int) -> SoftmaxBlockPolicy:
    """Zero logits: the uniform distribution over action blocks."""
    return SoftmaxBlockPolicy(np.zeros((n_actions ** horizon, d_x)), n_actions, horizon)


@dataclass
class FixedBlockPolicy:
    """All probability mass on a single action block."""

    block: tuple
    n_actions: int

    is_discrete = True

    @property
    def horizon(self) -> int:
        return len(self.block)

    @property
    def n_blocks(self) -> int:
        return self.n_actions ** self.horizon

    @property
    def index(self) -> int:
        idx = 0
        for a in self.block:
            idx = idx * self.n_actions + int(a)
        return idx

    def block_probs(self, x) -> np.ndarray:
        p = np.zeros(self.n_blocks)
        p[self.index] = 1.0
        return p

    def sample_indices(self, x, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.full(n, self.index, dtype=int)

    def block_actions(self, idx: int) -> tuple:
        return _unrank_block(idx, self.n_actions, self.horizon)

    def to_dict(self) -> dict:
        return {"kind": "fixed", "block": [int(a) for a in self.block],
                "n_actions": self.n_actions}


def policy_from_dict(d: dict):
    if d["kind"] == "softmax":
        return SoftmaxBlockPolicy(_decode_array(d["theta"]), d["n_actions"], d["horizon"])
    if d["kind"] == "gaussian":
        return GaussianBlockPolicy(_decode_array(d["theta"]), d["sigma"],
                                   d["action_dim"], d["horizon"])
    if d["kind"] == "fixed":
        return FixedBlockPolicy(tuple(d["block"]), d["n_actions"])
    raise ValueError(f"unknown policy kind {d['kind']!r}")
