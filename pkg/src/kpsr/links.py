"""Value and risk link functionals over history (x) observation features.

A link weight vector lives on the tensor space (history) (x) (shifted
W-step observation block) (x) (one-step observation), so the one-step and
shifted components of the value decomposition are slices of one fitted
vector.  Fitting is a ridge regression of observed (W+1)-step return and
risk sums onto those features; evaluation pairs the link with predicted
joint observation embeddings built from the one-step operator and the
lifted forward operator.

Risk evaluation shares every code path with value evaluation except the
weight vector itself.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import FeatureBlocks, FeatureMapSet, featurize_windows
from .features import _encode_array, _decode_array
from .operators import (EmbeddingOperator, OperatorBundle, SpaceMismatchError,
                        _ridge_multi, khatri_rao, predicted_shift_embedding)


@dataclass
class LinkWeights:
    """Fitted value link g and per-constraint risk links m_i."""

    g: np.ndarray
    m: np.ndarray                 # (n_risks, dim), possibly zero rows
    ridge: float
    sample_count: int
    history_space_id: str
    obs_block_space_id: str
    obs_space_id: str
    policy_tag: str = ""

    @property
    def n_risks(self) -> int:
        return self.m.shape[0]

    def to_dict(self) -> dict:
        return {
            "g": _encode_array(self.g),
            "m": _encode_array(self.m),
            "ridge": self.ridge,
            "sample_count": self.sample_count,
            "history_space_id": self.history_space_id,
            "obs_block_space_id": self.obs_block_space_id,
            "obs_space_id": self.obs_space_id,
            "policy_tag": self.policy_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinkWeights":
        return cls(g=_decode_array(d["g"]), m=_decode_array(d["m"]),
                   ridge=d["ridge"], sample_count=d["sample_count"],
                   history_space_id=d["history_space_id"],
                   obs_block_space_id=d["obs_block_space_id"],
                   obs_space_id=d["obs_space_id"], policy_tag=d["policy_tag"])


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    risks: tuple
    mc_samples: int
    seed: int


def fit_links(samples, maps: FeatureMapSet, lam: float | None = None,
              policy_tag: str = "") -> LinkWeights:
    """Exact ridge minimizer regressing (W+1)-step sums on link features.

    ``samples`` may be a list of WindowSamples or an already-featurized
    FeatureBlocks.  Value and risk targets are solved jointly since they
    share the design matrix.
    """
    blocks = samples if isinstance(samples, FeatureBlocks) else featurize_windows(samples, maps)
    if blocks.count == 0:
        raise ValueError("cannot fit link functions on an empty window set")
    n_risks = blocks.risks.shape[0]
    targets = np.vstack([blocks.returns.reshape(1, -1), blocks.risks])
    factors = [blocks.hist, blocks.shifted_obs, blocks.obs1]
    W, eff_lam, _ = _ridge_multi(targets, factors, lam)
    return LinkWeights(g=W[0], m=W[1:].reshape(n_risks, -1), ridge=eff_lam,
                       sample_count=blocks.count,
                       history_space_id=maps.history.space_id,
                       obs_block_space_id=maps.obs_block.space_id,
                       obs_space_id=maps.obs.space_id,
                       policy_tag=policy_tag)


def links_residual_gradient(links: LinkWeights, samples, maps: FeatureMapSet) -> float:
    """Norm of the normal-equations residual for the fitted value link."""
    blocks = samples if isinstance(samples, FeatureBlocks) else featurize_windows(samples, maps)
    factors = [blocks.hist, blocks.shifted_obs, blocks.obs1]
    from .operators import ridge_objective_gradient
    grad = ridge_objective_gradient(blocks.returns.reshape(1, -1), factors,
                                    links.g.reshape(1, -1), links.ridge)
    return float(np.linalg.norm(grad))


def _check_spaces(links: LinkWeights, bundle: OperatorBundle):
    m = bundle.maps
    if (links.history_space_id != m.history.space_id
            or links.obs_block_space_id != m.obs_block.space_id
            or links.obs_space_id != m.obs.space_id):
        raise SpaceMismatchError("link weights and bundle disagree on feature spaces")


def block_joint_embedding(bundle: OperatorBundle, hist_feature: np.ndarray,
                          first_act_feature: np.ndarray,
                          shifted_block_feature: np.ndarray) -> np.ndarray:
    """Predicted joint embedding of (shifted W-block, first observation).

    Built from the decomposed operator path: the one-step operator gives
    the first-observation embedding, and the lift applied to the forward
    prediction gives the shifted block conditioned on each first
    observation.  For one-hot observation features the conditioning is an
    exact enumeration over the alphabet; otherwise the mean embedding is
    substituted into the bilinear pairing.
    """
    h = np.asarray(hist_feature, dtype=float)
    o_hat = bundle.one_step.matrix @ np.kron(h, first_act_feature)
    u = bundle.forward.matrix @ np.kron(h, shifted_block_feature)
    d_block = bundle.forward.matrix.shape[0]
    d_obs = o_hat.shape[0]
    d_act = first_act_feature.shape[0]
    if bundle.maps.obs.spec.kind == "one-hot":
        T4 = bundle.shifted.tensor.reshape(d_block, d_block, d_obs, d_act)
        per_obs = np.einsum("ijoa,a,j->io", T4, first_act_feature, u)
        return per_obs * o_hat[None, :]
    lift = bundle.shifted.apply(np.kron(o_hat, first_act_feature))
    return np.outer(lift @ u, o_hat)


def block_values(links: LinkWeights, bundle: OperatorBundle,
                 hist_feature: np.ndarray, action_block) -> np.ndarray:
    """Predicted (value, risk_1..risk_N) of executing one (W+1)-action block.

    The first action feeds the one-step operator; the remaining W actions
    form the shifted test block fed through the lifted forward operator.
    """
    maps = bundle.maps
    first = maps.act.embed(maps.step_input(action_block[0])).values
    rest = maps.act_block.embed(maps.block_input(list(action_block[1:]))).values
    h = np.asarray(hist_feature, dtype=float)
    J = block_joint_embedding(bundle, h, first, rest)
    d_h = maps.history.output_dim
    flat = J.reshape(-1)
    out = np.empty(1 + links.n_risks)
    g_h = h @ links.g.reshape(d_h, -1)
    out[0] = g_h @ flat
    for i in range(links.n_risks):
        out[1 + i] = (h @ links.m[i].reshape(d_h, -1)) @ flat
    return out


def eval_value(links: LinkWeights, bundle: OperatorBundle, hist_feature: np.ndarray,
               policy, mc_samples: int, seed: int) -> ValueEstimate:
    """Monte Carlo policy expectation of the operator-driven value and risks.

    Action blocks are drawn from the policy at the bundle-predicted shifted
    observation embedding; each draw is scored through ``block_values``.
    Deterministic given the seed, and linear in the link weights.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    _check_spaces(links, bundle)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = predicted_shift_embedding(bundle, hist_feature)
    totals = np.zeros(1 + links.n_risks)
    if policy.is_discrete:
        idx = policy.sample_indices(x, rng, mc_samples)
        uniq, counts = np.unique(idx, return_counts=True)
        for b, cnt in zip(uniq, counts):
            q = block_values(links, bundle, hist_feature, policy.block_actions(int(b)))
            totals += cnt * q
    else:
        for blk in policy.sample_blocks(x, rng, mc_samples):
            totals += block_values(links, bundle, hist_feature, blk)
    totals /= mc_samples
    return ValueEstimate(value=float(totals[0]), risks=tuple(totals[1:]),
                         mc_samples=mc_samples, seed=seed)


def bellman_loss(links1: LinkWeights, links2: LinkWeights, eval_histories,
                 policies, bundle: OperatorBundle, seed: int,
                 mc_samples: int = 256) -> float:
    """Average difference of link evaluations under two (policy, links) pairs.

    Common random numbers are used across the two evaluations, so the loss
    of a pair against itself is exactly zero.
    """
    if len(eval_histories) == 0:
        raise ValueError("empty evaluation history set")
    pi1, pi2 = policies
    total = 0.0
    for j, h in enumerate(eval_histories):
        e1 = eval_value(links1, bundle, h, pi1, mc_samples, seed + j)
        e2 = eval_value(links2, bundle, h, pi2, mc_samples, seed + j)
        total += e1.value - e2.value
    return total / len(eval_histories)
