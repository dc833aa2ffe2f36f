"""Simulation environments with latent state, plus exact desk-scale oracles.

Tabular POMDPs carry rewards and risk channels on the latent state; the
agent only ever sees (observation, reward, risks) scalars.  The oracles
compute exact test-observation probabilities by forward filtering, exact
(W+1)-step values/risks by distribution propagation, and closed-form
conditional means for the linear-Gaussian system via a Kalman filter.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import StepRecord, Trajectory


class EnvConfigError(ValueError):
    """Inconsistent env matrices (non-stochastic rows, rank deficiency)."""


class OracleError(ValueError):
    """Bad oracle inputs or an oracle blowing its enumeration budget."""


def categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Single draw from a categorical distribution via inverse CDF."""
    u = rng.random()
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))


@dataclass
class EnvDescriptor:
    kind: str                # "discrete" or "box"
    num_actions: int | None
    num_obs: int | None
    action_dim: int | None
    obs_dim: int | None
    n_risks: int


class TabularPOMDP:
    """Finite POMDP: transition tensor T[a, s, s'], omission matrix O[s, o].

    Rewards and risks are functions of the latent state.  The omission
    matrix must have full column rank (|O| >= |S|), the undercompleteness
    condition that makes observation features sufficient for latent-state
    expectations.
    """

    def __init__(self, transitions, observation, rewards, risks, initial,
                 name: str = "tabular"):
        self.T = np.asarray(transitions, dtype=float)
        self.O = np.asarray(observation, dtype=float)
        self.r = np.asarray(rewards, dtype=float)
        self.c = np.asarray(risks, dtype=float).reshape(-1, self.r.shape[0]) \
            if np.asarray(risks).size else np.zeros((0, self.r.shape[0]))
        self.initial = np.asarray(initial, dtype=float)
        self.name = name
        self._validate()
        self._state = None
        self._rng = None

    def _validate(self):
        A, S, S2 = self.T.shape
        if S != S2 or self.O.shape[0] != S or self.initial.shape[0] != S:
            raise EnvConfigError("transition/omission/initial shapes disagree")
        if self.O.shape[1] < S:
            raise EnvConfigError("undercompleteness requires |O| >= |S|")
        for sl in (self.T.reshape(-1, S), self.O, self.initial.reshape(1, -1)):
            if not np.allclose(sl.sum(axis=1), 1.0, atol=1e-12):
                raise EnvConfigError("stochastic slices must sum to 1 within 1e-12")
            if np.any(sl < -1e-15):
                raise EnvConfigError("negative probability entry")
        smin = np.linalg.svd(self.O.T, compute_uv=False).min()
        if smin <= 1e-6:
            raise EnvConfigError(
                f"omission matrix is rank deficient (min singular value {smin:.2e})")

    @property
    def num_states(self) -> int:
        return self.T.shape[1]

    @property
    def num_actions(self) -> int:
        return self.T.shape[0]

    @property
    def num_obs(self) -> int:
        return self.O.shape[1]

    @property
    def n_risks(self) -> int:
        return self.c.shape[0]

    def descriptor(self) -> EnvDescriptor:
        return EnvDescriptor("discrete", self.num_actions, self.num_obs,
                             None, None, self.n_risks)

    def reset(self, seed: int):
        self._rng = np.random.default_rng(seed)
        self._state = categorical(self._rng, self.initial)

    def step(self, action: int):
        a = int(action)
        self._state = categorical(self._rng, self.T[a, self._state])
        obs = categorical(self._rng, self.O[self._state])
        reward = float(self.r[self._state])
        risks = tuple(float(x) for x in self.c[:, self._state])
        return obs, reward, risks

    def to_dict(self) -> dict:
        return {
            "type": "tabular", "name": self.name,
            "transitions": self.T.tolist(), "observation": self.O.tolist(),
            "rewards": self.r.tolist(), "risks": self.c.tolist(),
            "initial": self.initial.tolist(),
        }


class LinearGaussianSystem:
    """s' = A s + B a + process noise; o = C s' + observation noise."""

    def __init__(self, A, B, C, process_noise: float, obs_noise: float,
                 initial_mean=None, initial_noise: float = 0.0,
                 reward_weights=None, name: str = "lgs"):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        if process_noise < 0 or obs_noise < 0 or initial_noise < 0:
            raise EnvConfigError("noise scales must be nonnegative")
        self.process_noise = float(process_noise)
        self.obs_noise = float(obs_noise)
        self.initial_noise = float(initial_noise)
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.C.shape[1] != n:
            raise EnvConfigError("A/B/C dimensions are inconsistent")
        self.initial_mean = np.zeros(n) if initial_mean is None \
            else np.asarray(initial_mean, dtype=float).reshape(n)
        self.reward_weights = (np.ones(self.C.shape[0])
                               if reward_weights is None
                               else np.asarray(reward_weights, dtype=float))
        self.name = name
        self._state = None
        self._rng = None

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    @property
    def n_risks(self) -> int:
        return 0

    def descriptor(self) -> EnvDescriptor:
        return EnvDescriptor("box", None, None, self.action_dim, self.obs_dim, 0)

    def reset(self, seed: int):
        self._rng = np.random.default_rng(seed)
        self._state = self.initial_mean + self.initial_noise * self._rng.standard_normal(self.state_dim)

    def step(self, action):
        a = np.asarray(action, dtype=float).reshape(self.action_dim)
        noise = self.process_noise * self._rng.standard_normal(self.state_dim)
        self._state = self.A @ self._state + self.B @ a + noise
        obs = self.C @ self._state + self.obs_noise * self._rng.standard_normal(self.obs_dim)
        reward = float(self.reward_weights @ (self.C @ self._state))
        return obs, reward, ()

    def to_dict(self) -> dict:
        return {
            "type": "lgs", "name": self.name,
            "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
            "process_noise": self.process_noise, "obs_noise": self.obs_noise,
            "initial_mean": self.initial_mean.tolist(),
            "initial_noise": self.initial_noise,
            "reward_weights": self.reward_weights.tolist(),
        }


def env_from_dict(d: dict):
    kind = d.get("type")
    if kind == "tabular":
        return TabularPOMDP(d["transitions"], d["observation"], d["rewards"],
                            d.get("risks", []), d["initial"], name=d.get("name", "tabular"))
    if kind == "lgs":
        return LinearGaussianSystem(d["A"], d["B"], d["C"], d["process_noise"],
                                    d["obs_noise"], d.get("initial_mean"),
                                    d.get("initial_noise", 0.0), d.get("reward_weights"),
                                    name=d.get("name", "lgs"))
    raise EnvConfigError(f"unknown env type {kind!r}")


def uniform_actions(env, rng: np.random.Generator):
    """Default exploration: uniform symbols, or unit Gaussian action vectors."""
    if isinstance(env, TabularPOMDP):
        return int(rng.integers(env.num_actions))
    return rng.standard_normal(env.action_dim)


def rollout(env, episodes: int, T: int, seed: int, policy=None) -> list:
    """Roll seeded episodes; ``policy(env, rng, t, history)`` picks actions.

    The default behavior policy is uniform exploration, which keeps every
    test reachable with positive probability.
    """
    if T < 1:
        raise ValueError("episode length T must be >= 1")
    trajectories = []
    for ep in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence((seed, ep, 1)))
        env.reset(int(np.random.SeedSequence((seed, ep, 0)).generate_state(1)[0]))
        steps = []
        history = []
        for t in range(T):
            if policy is None:
                action = uniform_actions(env, rng)
            else:
                action = policy(env, rng, t, history)
            obs, reward, risks = env.step(action)
            rec = StepRecord(action, obs, reward, risks)
            steps.append(rec)
            history.append(rec)
        trajectories.append(Trajectory(episode_id=ep, steps=steps))
    return trajectories


# ---------------------------------------------------------------------------
# Exact oracles for tabular environments
# ---------------------------------------------------------------------------

def filter_belief(env: TabularPOMDP, belief: np.ndarray, action: int, obs: int):
    """One filtering update; returns (posterior, probability of obs)."""
    pred = env.T[int(action)].T @ belief
    joint = pred * env.O[:, int(obs)]
    p = float(joint.sum())
    if p <= 0:
        return np.full_like(belief, 1.0 / belief.shape[0]), 0.0
    return joint / p, p


def belief_from_prefix(env: TabularPOMDP, steps) -> np.ndarray:
    """Exact belief over the current latent state after an episode prefix."""
    b = env.initial.copy()
    for rec in steps:
        a, o = (rec.action, rec.observation) if isinstance(rec, StepRecord) else rec
        b, _ = filter_belief(env, b, a, o)
    return b


def exact_test_probability(env: TabularPOMDP, belief, action_block, obs_block) -> float:
    """P(obs_block | belief, do(action_block)) by forward filtering."""
    belief = np.asarray(belief, dtype=float)
    if belief.shape[0] != env.num_states or abs(belief.sum() - 1.0) > 1e-9 or np.any(belief < -1e-12):
        raise OracleError("belief is not a distribution over latent states")
    if len(action_block) != len(obs_block):
        raise OracleError("action and observation blocks must share length W")
    b = belief
    total = 1.0
    for a, o in zip(action_block, obs_block):
        b, p = filter_belief(env, b, a, o)
        total *= p
        if total == 0.0:
            return 0.0
    return total


def test_observation_distribution(env: TabularPOMDP, belief, action_block) -> np.ndarray:
    """Exact probabilities of all |O|^W observation blocks, mixed-radix order."""
    W = len(action_block)
    no = env.num_obs
    dist = np.zeros(no ** W)
    for idx in range(no ** W):
        block = _unrank(idx, no, W)
        dist[idx] = exact_test_probability(env, belief, action_block, block)
    return dist


def _unrank(idx: int, radix: int, width: int) -> tuple:
    out = []
    for pos in range(width - 1, -1, -1):
        out.append((idx // radix ** pos) % radix)
    return tuple(out)


def exact_value_risk(env: TabularPOMDP, belief, policy_or_block, W: int,
                     max_work: int = 10 ** 7):
    """Exact E[sum of rewards] and per-channel E[sum of risks] over W+1 steps.

    ``policy_or_block`` is either one action block of length W+1 or an array
    of probabilities over all |A|^(W+1) blocks (mixed-radix order).  The
    expectation propagates the latent distribution exactly, which sums over
    all latent paths without enumerating them.
    """
    belief = np.asarray(belief, dtype=float)
    horizon = W + 1
    na = env.num_actions
    if np.ndim(policy_or_block) == 1 and len(policy_or_block) == horizon \
            and all(isinstance(a, (int, np.integer)) for a in policy_or_block):
        blocks = [tuple(int(a) for a in policy_or_block)]
        weights = [1.0]
    else:
        probs = np.asarray(policy_or_block, dtype=float)
        if probs.shape[0] != na ** horizon:
            raise OracleError("block distribution length must be |A|^(W+1)")
        blocks = [_unrank(i, na, horizon) for i in range(na ** horizon)]
        weights = probs
    if len(blocks) * env.num_states * horizon > max_work:
        raise OracleError("enumeration budget exceeded; raise max_work explicitly")
    V = 0.0
    C = np.zeros(env.n_risks)
    for w, block in zip(weights, blocks):
        if w == 0.0:
            continue
        d = belief.copy()
        v = 0.0
        cc = np.zeros(env.n_risks)
        for a in block:
            d = env.T[int(a)].T @ d
            v += float(env.r @ d)
            if env.n_risks:
                cc += env.c @ d
        V += w * v
        C += w * cc
    return float(V), C


def enumerate_block_values(env: TabularPOMDP, belief, W: int):
    """(V, C) of every action block of length W+1, mixed-radix order."""
    na = env.num_actions
    horizon = W + 1
    vals = np.zeros(na ** horizon)
    risks = np.zeros((na ** horizon, env.n_risks))
    for idx in range(na ** horizon):
        v, c = exact_value_risk(env, belief, list(_unrank(idx, na, horizon)), W)
        vals[idx] = v
        risks[idx] = c
    return vals, risks


# ---------------------------------------------------------------------------
# Closed forms for the linear-Gaussian system
# ---------------------------------------------------------------------------

def kalman_filter(system: LinearGaussianSystem, history):
    """Exact posterior mean/covariance of the current state given a prefix.

    ``history`` is a sequence of (action, observation) pairs in execution
    order.  Returns the filtered mean, filtered covariance, and the last
    innovation covariance.
    """
    n = system.state_dim
    mean = system.initial_mean.copy()
    cov = (system.initial_noise ** 2) * np.eye(n)
    Q = (system.process_noise ** 2) * np.eye(n)
    R = (system.obs_noise ** 2) * np.eye(system.obs_dim)
    innov_cov = None
    for a, o in history:
        a = np.asarray(a, dtype=float).reshape(system.action_dim)
        o = np.asarray(o, dtype=float).reshape(system.obs_dim)
        mean = system.A @ mean + system.B @ a
        cov = system.A @ cov @ system.A.T + Q
        innov_cov = system.C @ cov @ system.C.T + R
        if np.linalg.det(innov_cov) <= 0:
            raise OracleError("singular innovation covariance in Kalman update")
        gain = cov @ system.C.T @ np.linalg.inv(innov_cov)
        mean = mean + gain @ (o - system.C @ mean)
        cov = cov - gain @ system.C @ cov
    return mean, cov, innov_cov


def forecast_matrices(system: LinearGaussianSystem, horizon: int):
    """Gamma (stacked C A^i) and the block-Toeplitz action response."""
    n, m, p = system.state_dim, system.action_dim, system.obs_dim
    gamma = np.zeros((horizon * p, n))
    U = np.zeros((horizon * p, horizon * m))
    Apow = [np.eye(n)]
    for _ in range(horizon):
        Apow.append(system.A @ Apow[-1])
    for i in range(horizon):
        gamma[i * p:(i + 1) * p] = system.C @ Apow[i + 1]
        for j in range(i + 1):
            U[i * p:(i + 1) * p, j * m:(j + 1) * m] = system.C @ Apow[i - j] @ system.B
    return gamma, U


def lgs_conditional_mean(system: LinearGaussianSystem, history, actions) -> np.ndarray:
    """E[o_{t:t+k-1} | history, future actions] via Kalman + forecast map."""
    actions = np.asarray(actions, dtype=float).reshape(-1, system.action_dim)
    horizon = actions.shape[0]
    mean, _, _ = kalman_filter(system, history)
    gamma, U = forecast_matrices(system, horizon)
    return gamma @ mean + U @ actions.reshape(-1)


def riccati_fixed_point(system: LinearGaussianSystem, iters: int = 10_000,
                        tol: float = 1e-14) -> np.ndarray:
    """Iterate the filtered-covariance Riccati recursion to its fixed point."""
    n = system.state_dim
    Q = (system.process_noise ** 2) * np.eye(n)
    R = (system.obs_noise ** 2) * np.eye(system.obs_dim)
    P = np.eye(n)
    for _ in range(iters):
        pred = system.A @ P @ system.A.T + Q
        S = system.C @ pred @ system.C.T + R
        gain = pred @ system.C.T @ np.linalg.inv(S)
        newP = pred - gain @ system.C @ pred
        if np.max(np.abs(newP - P)) < tol:
            return newP
        P = newP
    return P
