"""Oracle-vs-estimate comparisons for policies, and the diagnose assembly.

The oracle side conditions on the exact belief filtered from each start
history prefix; the estimate side only ever sees features.  Start
histories are length-L prefixes so both sides condition on the same
information.
"""

import numpy as np

from .config import ExperimentConfig, build_maps
from .data import load_trajectories, make_windows
from .diagnostics import convergence_study, extended_factorization_gap, sample_probe_pairs
from .envs import TabularPOMDP, belief_from_prefix, enumerate_block_values, rollout
from .links import bellman_loss, eval_value, fit_links
from .operators import load_bundle, predicted_shift_embedding
from .policies import SoftmaxBlockPolicy, uniform_policy
from .training import (aligned_link_windows, rollout_on_policy,
                       sample_start_histories)


def history_features(maps, histories):
    return [maps.history.embed(maps.history_input(h)).values for h in histories]


def oracle_policy_values(env: TabularPOMDP, policy, bundle, histories, W: int):
    """Exact (V, C) of a block policy averaged over start histories."""
    maps = bundle.maps
    V_total = 0.0
    C_total = np.zeros(env.n_risks)
    for h in histories:
        belief = belief_from_prefix(env, list(h))
        h_feat = maps.history.embed(maps.history_input(h)).values
        x = predicted_shift_embedding(bundle, h_feat)
        probs = policy.block_probs(x)
        vals, risks = enumerate_block_values(env, belief, W)
        V_total += float(probs @ vals)
        C_total += probs @ risks
    n = len(histories)
    return V_total / n, C_total / n


def fit_onpolicy_links(env, policy, bundle, episodes: int, T: int, seed: int,
                       lam=None, tag: str = ""):
    """Links fit on chunk-aligned windows from fresh rollouts under the policy."""
    maps = bundle.maps
    W = maps.act_block.arity
    L = maps.history.arity
    trajs = rollout_on_policy(env, policy, bundle, episodes, T, seed)
    windows = aligned_link_windows(trajs, W, L)
    return fit_links(windows, maps, lam=lam, policy_tag=tag)


def estimate_policy_values(links, bundle, hist_feats, policy, mc_samples: int,
                           seed: int):
    """Mean operator-driven (V, C) estimate over the history batch."""
    V = 0.0
    C = np.zeros(links.n_risks)
    for j, h in enumerate(hist_feats):
        est = eval_value(links, bundle, h, policy, mc_samples, seed + j)
        V += est.value
        C += np.asarray(est.risks)
    n = len(hist_feats)
    return V / n, C / n


def evaluate_policies(cfg: ExperimentConfig, bundle_path, checkpoint_path=None,
                      n_histories: int = 12, mc_samples: int | None = None):
    """Compare estimated against exact value/risk for a small policy zoo.

    Always evaluates the uniform policy; when a training checkpoint is
    available the learned policy and an adversarial (negated-logits)
    variant are evaluated too.  Links are refit on-policy for each policy.
    """
    env = cfg.make_env()
    if not isinstance(env, TabularPOMDP):
        raise ValueError("policy evaluation against the oracle needs a tabular env")
    bundle, _ = load_bundle(bundle_path)
    maps = bundle.maps
    W = maps.act_block.arity
    mc = mc_samples or cfg.mc_samples
    histories = sample_start_histories(env, cfg.L, n_histories, seed=cfg.seed + 4242)
    hist_feats = history_features(maps, histories)
    d_x = bundle.forward.matrix.shape[0]

    policies = {"uniform": uniform_policy(env.num_actions, W + 1, d_x)}
    if checkpoint_path is not None:
        from .training import load_checkpoint
        state = load_checkpoint(checkpoint_path)
        learned = state.policy
        policies["learned"] = learned
        policies["adversarial"] = SoftmaxBlockPolicy(-learned.theta,
                                                     learned.n_actions,
                                                     learned.horizon)
    rows = []
    for pos, (name, policy) in enumerate(policies.items()):
        links = fit_onpolicy_links(env, policy, bundle,
                                   episodes=cfg.train_settings.link_episodes * 4,
                                   T=cfg.train_settings.link_episode_length,
                                   seed=cfg.seed + 17 + pos,
                                   lam=cfg.lam_link, tag=name)
        V_est, C_est = estimate_policy_values(links, bundle, hist_feats, policy,
                                              mc, seed=cfg.seed + 31)
        V_ex, C_ex = oracle_policy_values(env, policy, bundle, histories, W)
        rows.append({
            "policy": name,
            "V_est": V_est, "V_exact": V_ex, "dV": V_est - V_ex,
            "C_est": list(C_est), "C_exact": list(C_ex),
            "dC": list(np.asarray(C_est) - np.asarray(C_ex)),
        })
    return rows


def bellman_refit_trace(env, bundle, cfg: ExperimentConfig, refits: int = 10,
                        n_histories: int = 12):
    """|BL| between consecutive link refits under a fixed uniform policy.

    Windows accumulate across refits, so consecutive fits average over
    growing data and the trace decays.
    """
    maps = bundle.maps
    W, L = maps.act_block.arity, maps.history.arity
    d_x = bundle.forward.matrix.shape[0]
    policy = uniform_policy(env.num_actions, W + 1, d_x)
    histories = sample_start_histories(env, L, n_histories, seed=cfg.seed + 777)
    hist_feats = history_features(maps, histories)
    buffer = []
    prev_links = None
    trace = []
    for n in range(refits):
        trajs = rollout_on_policy(env, policy, bundle,
                                  cfg.train_settings.link_episodes,
                                  cfg.train_settings.link_episode_length,
                                  seed=cfg.seed + 900 + n)
        buffer.extend(aligned_link_windows(trajs, W, L))
        links = fit_links(buffer, maps, lam=cfg.lam_link, policy_tag=f"refit{n}")
        if prev_links is not None:
            bl = bellman_loss(links, prev_links, hist_feats, (policy, policy),
                              bundle, seed=cfg.seed + 55, mc_samples=cfg.mc_samples)
            trace.append(bl)
        prev_links = links
    return trace, prev_links


def diagnose_bundle(cfg: ExperimentConfig, bundle_path,
                    ks=(2000, 8000, 32000), seeds=(0, 1, 2, 3, 4)):
    """Assemble the diagnostics report: convergence, gaps, Bellman decay.

    Convergence refits use fresh per-seed rollouts (data generation is part
    of what the probe measures), so no trajectory file is consumed here.
    """
    env = cfg.make_env()
    bundle, _ = load_bundle(bundle_path)
    study = convergence_study(env, cfg.W, cfg.L, cfg.features, ks, seeds)
    probes = sample_probe_pairs(env, cfg.W, cfg.L, 20, seed=cfg.seed + 5)
    fact_gap = extended_factorization_gap(bundle, probes)
    trace, links = bellman_refit_trace(env, bundle, cfg)
    maps = bundle.maps
    W = maps.act_block.arity
    d_x = bundle.forward.matrix.shape[0]
    policy = uniform_policy(env.num_actions, W + 1, d_x)
    histories = sample_start_histories(env, cfg.L, 12, seed=cfg.seed + 4242)
    hist_feats = history_features(maps, histories)
    V_est, C_est = estimate_policy_values(links, bundle, hist_feats, policy,
                                          cfg.mc_samples, seed=cfg.seed + 31)
    V_ex, C_ex = oracle_policy_values(env, policy, bundle, histories, W)
    cbar = np.asarray(cfg.train_settings.cbar, dtype=float)
    feasible = bool(np.all(C_ex <= cbar)) if cbar.size else None
    summary = {
        "slope": study["slope"],
        "value_gap": abs(V_est - V_ex),
        "risk_gap": float(np.max(np.abs(C_est - C_ex))) if C_est.size else 0.0,
        "factorization_gap": fact_gap,
        "bellman_final": abs(trace[-1]) if trace else None,
        "feasible": feasible,
        "seed": cfg.seed,
    }
    return {"study": study, "summary": summary, "bellman_trace": trace}
