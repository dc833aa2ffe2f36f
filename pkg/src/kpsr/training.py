"""Constrained policy optimization over kernel PSR value estimates.

The loop follows the three-stage scheme: operators are pre-trained on an
exploration dataset, the policy ascends a Lagrangian relaxation of the
constrained objective with a score-function gradient and backtracking line
search, dual variables follow projected ascent, and the value/risk links
are refit on fresh on-policy episode batches.

Everything is deterministic given the config seeds: per-iteration random
streams are derived from (seed, stage, iteration) so a run resumed from a
checkpoint reproduces the uninterrupted run bit for bit.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .data import make_windows, featurize_windows
from .envs import TabularPOMDP, rollout, uniform_actions
from .features import _encode_array, _decode_array
from .links import LinkWeights, block_values, eval_value, fit_links
from .operators import OperatorBundle, predicted_shift_embedding
from .policies import (GaussianBlockPolicy, SoftmaxBlockPolicy, policy_from_dict,
                       uniform_policy)

CHECKPOINT_FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    """Non-finite gradient or objective encountered during training."""


@dataclass
class DualVars:
    """Nonnegative multipliers with their projected-ascent step schedule."""

    eta: np.ndarray
    beta0: float = 0.5

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        if np.any(self.eta < 0):
            raise ValueError("dual variables must be nonnegative")

    def beta(self, k: int) -> float:
        return self.beta0 / np.sqrt(max(k, 1))


def lagrangian(V: float, C, Cbar, eta) -> float:
    """J = V - sum_i eta_i (C_i - Cbar_i)^+ with the hinge applied."""
    C = np.asarray(C, dtype=float)
    Cbar = np.asarray(Cbar, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if not (C.shape == Cbar.shape == eta.shape):
        raise ValueError("C, Cbar, and eta must have equal lengths")
    return float(V - eta @ np.clip(C - Cbar, 0.0, None))


def dual_step(eta, C, Cbar, beta: float) -> np.ndarray:
    """eta <- [eta + beta (C - Cbar)]^+ componentwise."""
    if beta <= 0:
        raise ValueError("dual step size must be positive")
    eta = np.asarray(eta, dtype=float)
    return np.clip(eta + beta * (np.asarray(C) - np.asarray(Cbar)), 0.0, None)


def policy_sample(policy, bundle: OperatorBundle, hist_feature, seed: int):
    """Draw one (W+1)-step action block at the predicted shift embedding."""
    x = predicted_shift_embedding(bundle, hist_feature)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if policy.is_discrete:
        idx = int(policy.sample_indices(x, rng, 1)[0])
        return policy.block_actions(idx)
    return policy.sample_blocks(x, rng, 1)[0]


def q_tables(links: LinkWeights, bundle: OperatorBundle, hist_features) -> np.ndarray:
    """Predicted (value, risks) of every action block at every history."""
    maps = bundle.maps
    n_actions = maps.num_actions
    horizon = maps.act_block.arity + 1
    n_blocks = n_actions ** horizon
    out = np.zeros((len(hist_features), n_blocks, 1 + links.n_risks))
    for i, h in enumerate(hist_features):
        for b in range(n_blocks):
            block = _unrank(b, n_actions, horizon)
            out[i, b] = block_values(links, bundle, h, block)
    return out


def _unrank(idx: int, radix: int, width: int) -> tuple:
    out = []
    for pos in range(width - 1, -1, -1):
        out.append((idx // radix ** pos) % radix)
    return tuple(out)


def _draw_indices(policy, xs, uniforms) -> np.ndarray:
    """Inverse-CDF block draws from shared uniforms (common random numbers)."""
    H, M = uniforms.shape
    idx = np.empty((H, M), dtype=int)
    for i, x in enumerate(xs):
        cdf = np.cumsum(policy.block_probs(x))
        idx[i] = np.searchsorted(cdf, uniforms[i], side="right").clip(0, len(cdf) - 1)
    return idx


def mc_policy_values(policy, xs, tables, uniforms):
    """Monte Carlo (V, C) under the policy from precomputed block tables."""
    idx = _draw_indices(policy, xs, uniforms)
    H, M = idx.shape
    picked = np.stack([tables[i, idx[i]] for i in range(H)])   # (H, M, 1+Nc)
    means = picked.mean(axis=(0, 1))
    return float(means[0]), means[1:], idx


def expected_values_discrete(policy, xs, tables):
    """Exact policy expectation of (V, C) by summing over action blocks."""
    vals = np.zeros(tables.shape[2])
    for i, x in enumerate(xs):
        vals += policy.block_probs(x) @ tables[i]
    vals /= len(xs)
    return float(vals[0]), vals[1:]


def score_gradient(policy, xs, tables, eta, cbar, uniforms):
    """Score-function estimate of grad_theta J with a mean-value baseline.

    The hinge activity is decided from the Monte Carlo risk estimate, after
    which the gradient weights each draw by its scalarized advantage.
    """
    V, C, idx = mc_policy_values(policy, xs, tables, uniforms)
    active = (np.asarray(C) > np.asarray(cbar)).astype(float)
    w = np.asarray(eta) * active
    grad = np.zeros_like(policy.theta)
    H, M = idx.shape
    for i, x in enumerate(xs):
        q = tables[i, idx[i]]                      # (M, 1+Nc)
        scalar = q[:, 0] - q[:, 1:] @ w
        baseline = scalar.mean()
        for m in range(M):
            grad += (scalar[m] - baseline) * policy.grad_log_prob(x, int(idx[i, m]))
    grad /= H * M
    if not np.all(np.isfinite(grad)):
        bad = np.argwhere(~np.isfinite(grad))[0]
        raise NumericalError(f"non-finite policy gradient at component {tuple(bad)}")
    return grad, V, C


def policy_step(policy, xs, tables, eta, cbar, alpha0: float, seed: int,
                mc_samples: int, max_halvings: int = 8):
    """One ascent step on J with backtracking line search.

    The proposal direction is the score-function gradient; the step is
    halved until the batch objective does not decrease (at most
    ``max_halvings`` times), re-estimating J with common random numbers so
    the comparison is noise-coupled.  Returns the updated policy and a
    step report.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    uniforms = rng.random((len(xs), mc_samples))
    grad, V, C = score_gradient(policy, xs, tables, eta, cbar, uniforms)
    V0, C0, _ = mc_policy_values(policy, xs, tables, uniforms)
    J0 = lagrangian(V0, C0, cbar, eta)
    alpha = alpha0
    accepted = False
    new_policy = policy
    J1 = J0
    for _ in range(max_halvings + 1):
        cand = SoftmaxBlockPolicy(policy.theta + alpha * grad,
                                  policy.n_actions, policy.horizon) \
            if policy.is_discrete else \
            GaussianBlockPolicy(policy.theta + alpha * grad, policy.sigma,
                                policy.action_dim, policy.horizon)
        Vc, Cc, _ = mc_policy_values(cand, xs, tables, uniforms)
        Jc = lagrangian(Vc, Cc, cbar, eta)
        if Jc >= J0 - 1e-9:
            new_policy, J1, accepted = cand, Jc, True
            break
        alpha *= 0.5
    info = {"J_before": J0, "J_after": J1, "V": V, "C": np.asarray(C),
            "alpha": alpha if accepted else 0.0, "accepted": accepted,
            "grad_norm": float(np.linalg.norm(grad))}
    return new_policy, info


def detect_infeasible(tables, cbar) -> list:
    """Histories where every action block violates every constraint."""
    flags = []
    cbar = np.asarray(cbar, dtype=float)
    if cbar.size == 0:
        return flags
    for i in range(tables.shape[0]):
        risks = tables[i, :, 1:]
        if np.all(risks > cbar[None, :]):
            flags.append(i)
    return flags


# ---------------------------------------------------------------------------
# On-policy data collection and the outer training loop
# ---------------------------------------------------------------------------

def rollout_on_policy(env, policy, bundle: OperatorBundle, episodes: int, T: int,
                      seed: int):
    """Episodes driven by the block policy with chunked open-loop execution.

    The first L steps use uniform exploration (the policy needs a full
    history suffix), after which blocks of W+1 actions are drawn at each
    chunk boundary from the predicted shift embedding.
    """
    maps = bundle.maps
    L = maps.history.arity
    horizon = maps.act_block.arity + 1
    trajs = []
    from .data import StepRecord, Trajectory
    for ep in range(episodes):
        env.reset(int(np.random.SeedSequence((seed, ep, 0)).generate_state(1)[0]))
        rng = np.random.default_rng(np.random.SeedSequence((seed, ep, 1)))
        steps = []
        pending = []
        for t in range(T):
            if t < L:
                action = uniform_actions(env, rng)
            else:
                if not pending:
                    hist = tuple((s.action, s.observation) for s in steps[-L:])
                    h_feat = maps.history.embed(maps.history_input(hist)).values
                    x = predicted_shift_embedding(bundle, h_feat)
                    if policy.is_discrete:
                        idx = int(policy.sample_indices(x, rng, 1)[0])
                        pending = list(policy.block_actions(idx))
                    else:
                        pending = list(policy.sample_blocks(x, rng, 1)[0])
                action = pending.pop(0)
            obs, reward, risks = env.step(action)
            steps.append(StepRecord(action, obs, reward, risks))
        trajs.append(Trajectory(episode_id=ep, steps=steps))
    return trajs


def aligned_link_windows(trajs, W: int, L: int) -> list:
    """Windows whose anchors coincide with policy chunk boundaries."""
    return [s for s in make_windows(trajs, W, L) if (s.t - L) % (W + 1) == 0]


@dataclass
class TrainState:
    """Everything needed to resume training deterministically."""

    iteration: int
    policy: object
    eta: np.ndarray
    links: LinkWeights | None
    eval_histories: list                     # raw (action, obs) pair tuples
    log_rows: list = field(default_factory=list)
    infeasible: list = field(default_factory=list)
    refit_policies: dict = field(default_factory=dict)   # iteration -> policy dict
    seed: int = 0
    config_hash: str = "none"
    link_window_count: int = 0

    def to_dict(self) -> dict:
        return {
            "format": "kpsr-checkpoint",
            "version": CHECKPOINT_FORMAT_VERSION,
            "iteration": self.iteration,
            "policy": self.policy.to_dict(),
            "eta": _encode_array(self.eta),
            "links": self.links.to_dict() if self.links is not None else None,
            "eval_histories": [[[int(a), int(o)] for a, o in h] for h in self.eval_histories],
            "log_rows": self.log_rows,
            "infeasible": self.infeasible,
            "refit_policies": {str(k): v for k, v in self.refit_policies.items()},
            "seed": self.seed,
            "config_hash": self.config_hash,
            "link_window_count": self.link_window_count,
            "tool_version": __version__,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        if d.get("format") != "kpsr-checkpoint":
            raise ValueError("not a kpsr checkpoint file")
        if d.get("version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        return cls(
            iteration=d["iteration"],
            policy=policy_from_dict(d["policy"]),
            eta=_decode_array(d["eta"]),
            links=LinkWeights.from_dict(d["links"]) if d["links"] is not None else None,
            eval_histories=[tuple((a, o) for a, o in h) for h in d["eval_histories"]],
            log_rows=d["log_rows"],
            infeasible=d["infeasible"],
            refit_policies={int(k): v for k, v in d.get("refit_policies", {}).items()},
            seed=d["seed"],
            config_hash=d["config_hash"],
            link_window_count=d["link_window_count"],
        )


def save_checkpoint(state: TrainState, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(state.to_dict(), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> TrainState:
    with open(path, "r", encoding="utf-8") as fh:
        return TrainState.from_dict(json.load(fh))


def log_header(n_risks: int) -> str:
    cols = ["k", "J", "V"] + [f"C_{i + 1}" for i in range(n_risks)] \
        + [f"eta_{i + 1}" for i in range(n_risks)] + ["alpha", "accepted"]
    return ",".join(cols)


def format_log_row(row) -> str:
    return ",".join(repr(x) if isinstance(x, float) else str(x) for x in row)


@dataclass
class TrainSettings:
    """Knobs of the optimization loop (see ExperimentConfig for defaults)."""

    iterations: int = 150
    alpha0: float = 2.0
    beta0: float = 0.5
    mc_samples: int = 128
    n_eval_histories: int = 12
    link_refit_interval: int = 10
    link_episodes: int = 48
    link_episode_length: int = 24
    checkpoint_interval: int = 50
    cbar: tuple = ()
    max_link_windows: int = 200_000


def sample_start_histories(env, L: int, count: int, seed: int) -> list:
    """Length-L uniform-exploration prefixes used as start histories."""
    trajs = rollout(env, episodes=count, T=L, seed=seed)
    return [tuple((s.action, s.observation) for s in t.steps) for t in trajs]


def train(env, bundle: OperatorBundle, settings: TrainSettings, seed: int,
          out_dir=None, config_hash: str = "none",
          resume_state: TrainState | None = None) -> TrainState:
    """Run (or resume) the full constrained optimization loop.

    The operator bundle is treated as pre-trained and fixed.  Links are
    refit every ``link_refit_interval`` iterations on the accumulated
    on-policy window buffer, which makes the Bellman loss between
    consecutive refits decay.  Histories flagged infeasible (every block
    violating every constraint) are recorded; if all start histories are
    flagged, training stops early rather than looping.

    Resume replays past data-collection rollouts under the policies stored
    at each refit point, so the link buffer (and everything downstream) is
    bit-identical to the uninterrupted run.
    """
    maps = bundle.maps
    if not isinstance(env, TabularPOMDP):
        raise NotImplementedError("the training loop drives tabular environments")
    L = maps.history.arity
    W = maps.act_block.arity
    horizon = W + 1
    cbar = np.asarray(settings.cbar, dtype=float)
    n_risks = cbar.shape[0]

    if resume_state is None:
        histories = sample_start_histories(env, L, settings.n_eval_histories,
                                           seed=seed * 1000 + 17)
        d_x = bundle.forward.matrix.shape[0]
        policy = uniform_policy(env.num_actions, horizon, d_x)
        state = TrainState(iteration=0, policy=policy, eta=np.zeros(n_risks),
                           links=None, eval_histories=histories, seed=seed,
                           config_hash=config_hash)
    else:
        state = resume_state

    hist_feats = [maps.history.embed(maps.history_input(h)).values
                  for h in state.eval_histories]
    xs = [predicted_shift_embedding(bundle, h) for h in hist_feats]

    link_buffer = []
    tables = None
    for k in range(settings.iterations):
        if k % settings.link_refit_interval == 0:
            if k >= state.iteration:
                state.refit_policies[k] = state.policy.to_dict()
            rollout_policy = policy_from_dict(state.refit_policies[k])
            trajs = rollout_on_policy(env, rollout_policy, bundle,
                                      settings.link_episodes,
                                      settings.link_episode_length,
                                      seed=_stream(state.seed, 3, k))
            link_buffer.extend(aligned_link_windows(trajs, W, L))
            if len(link_buffer) > settings.max_link_windows:
                link_buffer = link_buffer[-settings.max_link_windows:]
            if k >= state.iteration:
                state.links = fit_links(link_buffer, maps, policy_tag=f"iter{k}")
                state.link_window_count = len(link_buffer)
            tables = None
        if k < state.iteration:
            continue
        if state.links is None:
            state.links = fit_links(link_buffer, maps, policy_tag=f"iter{k}")
        if tables is None:
            tables = q_tables(state.links, bundle, hist_feats)
            flags = detect_infeasible(tables, cbar) if n_risks else []
            for i in flags:
                if i not in state.infeasible:
                    state.infeasible.append(i)
            if n_risks and len(flags) == len(hist_feats):
                break
        new_policy, info = policy_step(state.policy, xs, tables, state.eta, cbar,
                                       settings.alpha0, _stream(state.seed, 5, k),
                                       settings.mc_samples)
        state.policy = new_policy
        rng = np.random.default_rng(np.random.SeedSequence((state.seed, 8, k)))
        uniforms = rng.random((len(xs), settings.mc_samples))
        V_new, C_new, _ = mc_policy_values(state.policy, xs, tables, uniforms)
        if n_risks:
            beta_k = settings.beta0 / np.sqrt(k + 1)
            state.eta = dual_step(state.eta, C_new, cbar, beta_k)
        J = lagrangian(V_new, C_new, cbar, state.eta) if n_risks else V_new
        if not np.isfinite(J):
            raise NumericalError(f"non-finite objective at iteration {k}")
        row = [k, float(J), float(V_new)] + [float(c) for c in C_new] \
            + [float(e) for e in state.eta] + [float(info["alpha"]), int(info["accepted"])]
        state.log_rows.append(row)
        state.iteration = k + 1
        if out_dir is not None and (k + 1) % settings.checkpoint_interval == 0:
            _write_outputs(state, out_dir, n_risks)
    if out_dir is not None:
        _write_outputs(state, out_dir, n_risks)
    return state


def _stream(seed: int, stage: int, k: int) -> int:
    return int(np.random.SeedSequence((seed, stage, k)).generate_state(1)[0])


def _write_outputs(state: TrainState, out_dir, n_risks: int):
    import os
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(state, os.path.join(out_dir, "checkpoint.json"))
    lines = [log_header(n_risks)] + [format_log_row(r) for r in state.log_rows]
    with open(os.path.join(out_dir, "training_log.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
