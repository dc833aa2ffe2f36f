"""Oracle-backed diagnostics: operator errors, convergence rates, value gaps.

Everything here compares fitted objects against the exact environment
oracles, so it only runs on oracle-capable (tabular or linear-Gaussian)
environments.  Predicted one-hot embeddings are projected onto the
probability simplex before total-variation distances are taken; that
projection lives on the evaluation side only.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import build_maps
from .data import featurize_windows, make_windows
from .envs import (LinearGaussianSystem, OracleError, TabularPOMDP,
                   belief_from_prefix, lgs_conditional_mean, rollout,
                   test_observation_distribution)
from .links import block_joint_embedding
from .operators import OperatorBundle, fit_forward, simplex_project


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def loglog_slope(ks, errors) -> float:
    """Least-squares slope of log(error) against log(K)."""
    x = np.log(np.asarray(ks, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    x = x - x.mean()
    return float((x @ (y - y.mean())) / (x @ x))


def sample_probe_pairs(env: TabularPOMDP, W: int, L: int, count: int, seed: int,
                       prefix_len: int | None = None):
    """Random (history prefix, action block) probes with exact beliefs.

    Prefixes default to several mixing times so probe histories resemble
    the anchors the operators were trained on; the oracle belief filters
    the whole prefix while the learner only sees the L-step suffix.
    """
    rng = np.random.default_rng(seed)
    T = prefix_len if prefix_len is not None else max(4 * L, 8)
    trajs = rollout(env, episodes=count, T=T, seed=seed + 99)
    probes = []
    for traj in trajs:
        prefix = [(s.action, s.observation) for s in traj.steps[-L:]]
        belief = belief_from_prefix(env, traj.steps)
        # blocks carry W+1 actions; oracles over W-step tests use the first W
        block = tuple(int(rng.integers(env.num_actions)) for _ in range(W + 1))
        probes.append((tuple(prefix), belief, block))
    return probes


def forward_operator_tv(bundle: OperatorBundle, env: TabularPOMDP, probes) -> float:
    """Mean TV between predicted and exact W-step observation distributions."""
    maps = bundle.maps
    W = maps.act_block.arity
    tvs = []
    for prefix, belief, block in probes:
        h = maps.history.embed(maps.history_input(prefix)).values
        a = maps.act_block.embed(maps.block_input(block[:W])).values
        pred = simplex_project(bundle.forward.matrix @ np.kron(h, a))
        exact = test_observation_distribution(env, belief, block[:W])
        tvs.append(total_variation(pred, exact))
    return float(np.mean(tvs))


def one_step_tv(bundle: OperatorBundle, env: TabularPOMDP, probes) -> float:
    """Mean TV of single-step observation predictions against the filter."""
    maps = bundle.maps
    tvs = []
    for prefix, belief, block in probes:
        h = maps.history.embed(maps.history_input(prefix)).values
        a = maps.act.embed(maps.step_input(block[0])).values
        pred = simplex_project(bundle.one_step.matrix @ np.kron(h, a))
        exact = env.O.T @ (env.T[block[0]].T @ belief)
        tvs.append(total_variation(pred, exact))
    return float(np.mean(tvs))


def extended_factorization_gap(bundle: OperatorBundle, probes) -> float:
    """Relative Frobenius gap between the extended operator's joint
    prediction and the product of one-step and lifted-forward parts."""
    maps = bundle.maps
    num, den = 0.0, 0.0
    for prefix, _belief, block in probes:
        h = maps.history.embed(maps.history_input(prefix)).values
        first = maps.act.embed(maps.step_input(block[0])).values
        rest = maps.act_block.embed(maps.block_input(list(block[1:]))).values
        dom = np.kron(np.kron(h, rest), first)
        d_block = bundle.forward.matrix.shape[0]
        d_obs = bundle.one_step.matrix.shape[0]
        joint = (bundle.extended.matrix @ dom).reshape(d_block, d_obs)
        factored = block_joint_embedding(bundle, h, first, rest)
        num += float(np.linalg.norm(joint - factored) ** 2)
        den += float(np.linalg.norm(joint) ** 2)
    return float(np.sqrt(num / den)) if den > 0 else 0.0


def lift_identity_deviation(bundle: OperatorBundle, blocks, test_inputs,
                            span_tol: float = 0.1) -> list:
    """Per-(o, a) deviation of the lift from identity on the realized span.

    The lift is only determined on the span of realized forward-prediction
    embeddings, so test embeddings are projected there first.  On an iid
    observation environment the span collapses and the lift acts as the
    identity on it.
    """
    from .operators import khatri_rao
    maps = bundle.maps
    n = min(blocks.count, 5000)
    Z = khatri_rao(blocks.hist[:, :n], blocks.test_act[:, :n])
    preds = bundle.forward.matrix @ Z
    U, S, _ = np.linalg.svd(preds, full_matrices=False)
    Uk = U[:, S >= span_tol * S[0]]
    devs = []
    for hist_input, block_input, o, a in test_inputs:
        h = maps.history.embed(hist_input).values
        ab = maps.act_block.embed(block_input).values
        v = Uk @ (Uk.T @ (bundle.forward.matrix @ np.kron(h, ab)))
        w = np.kron(maps.obs.embed(o).values, maps.act.embed(a).values)
        devs.append(float(np.linalg.norm(bundle.shifted.apply(w) @ v - v)
                          / np.linalg.norm(v)))
    return devs


def lgs_forward_relative_error(bundle: OperatorBundle, system: LinearGaussianSystem,
                               W: int, L: int, count: int, seed: int) -> float:
    """Relative error of linear-feature forward predictions vs Kalman closed form."""
    maps = bundle.maps
    rng = np.random.default_rng(seed)
    trajs = rollout(system, episodes=count, T=L, seed=seed + 7)
    num, den = 0.0, 0.0
    for traj in trajs:
        prefix = [(s.action, s.observation) for s in traj.steps]
        actions = rng.standard_normal((W, system.action_dim))
        h = maps.history.embed(maps.history_input(prefix)).values
        a = maps.act_block.embed(np.concatenate([x for x in actions])).values
        pred = bundle.forward.matrix @ np.kron(h, a)
        if maps.obs_block.spec.bias:
            pred = pred[1:]
        exact = lgs_conditional_mean(system, prefix, actions)
        num += float(np.linalg.norm(pred - exact) ** 2)
        den += float(np.linalg.norm(exact) ** 2)
    return float(np.sqrt(num / den))


@dataclass
class DiagnosticsReport:
    """Per-K oracle errors with the fitted convergence slope and value gaps."""

    ks: list
    forward_errors: list          # mean over seeds, aligned with ks
    per_seed_errors: dict         # seed -> list of errors
    slope: float
    value_gap: float | None
    risk_gap: float | None
    bellman_trace: list
    feasible: bool | None
    config_hash: str
    seed: int

    def rows(self):
        out = []
        for seed, errs in sorted(self.per_seed_errors.items()):
            for k, e in zip(self.ks, errs):
                out.append({"seed": seed, "K": k, "forward_tv": e})
        return out


def convergence_study(env: TabularPOMDP, W: int, L: int, features: dict,
                      ks, seeds, lam_schedule=None, probes_per_seed: int = 20,
                      episodes_cap: int = 400) -> dict:
    """Refit the forward operator on growing prefixes of per-seed datasets
    and measure the oracle TV error at each K."""
    if not isinstance(env, TabularPOMDP):
        raise OracleError("convergence diagnostics need a tabular oracle env")
    ks = sorted(int(k) for k in ks)
    per_seed = {}
    for seed in seeds:
        maps = build_maps(env, W, L, features, seed=seed)
        T = max(ks) // episodes_cap + W + L + 1
        trajs = rollout(env, episodes=episodes_cap, T=T, seed=seed)
        windows = make_windows(trajs, W, L)
        if len(windows) < max(ks):
            raise OracleError("not enough windows generated for the K grid")
        probes = sample_probe_pairs(env, W, L, probes_per_seed, seed=seed + 1)
        errs = []
        for k in ks:
            blocks = featurize_windows(windows[:k], maps)
            lam = lam_schedule(k) if lam_schedule is not None else None
            fwd = fit_forward(blocks, lam)
            tvs = []
            for prefix, belief, block in probes:
                h = maps.history.embed(maps.history_input(prefix)).values
                a = maps.act_block.embed(maps.block_input(block[:W])).values
                pred = simplex_project(fwd.matrix @ np.kron(h, a))
                exact = test_observation_distribution(env, belief, block[:W])
                tvs.append(total_variation(pred, exact))
            errs.append(float(np.mean(tvs)))
        per_seed[seed] = errs
    mean_errors = [float(np.mean([per_seed[s][i] for s in seeds])) for i in range(len(ks))]
    return {"ks": ks, "per_seed": per_seed, "mean_errors": mean_errors,
            "slope": loglog_slope(ks, mean_errors)}
