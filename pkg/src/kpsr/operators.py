"""Covariance and conditional embedding operators, and the five forward maps.

All feature matrices follow the column convention (one column per sample),
and empirical second moments are sample-normalized, so the ridge level is
independent of the sample count.  Every fitted operator is the exact
minimizer of a ridge objective

    (1/K) sum_k || W z_k - y_k ||^2  +  lambda ||W||_F^2,

solved through a symmetric positive definite factorization, never an
explicit inverse.  Conditioning on a point value goes through the kernel
Bayes rule reweighting; the weights may be negative and are used as-is.

Predicted embeddings are returned raw (for one-hot codomains they are
signed approximate probability vectors).  ``simplex_project`` is the
explicit, separate postprocessing step for evaluation code that needs a
distribution.
"""

import base64
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .data import FeatureBlocks, FeatureMapSet
from .features import FeatureMap, FeatureVector, FeatureError, _encode_array, _decode_array

BUNDLE_FORMAT_VERSION = 1
DEFAULT_DOMAIN_CAP = 200_000


class SolveError(RuntimeError):
    """A ridge solve failed; message carries conditioning diagnostics."""


class SpaceMismatchError(FeatureError):
    """An operator was applied to a feature from the wrong space."""


class BundleFormatError(ValueError):
    """Corrupt, version-mismatched, or internally inconsistent bundle file."""


@dataclass
class EmbeddingOperator:
    """Dense conditional-embedding matrix with feature-space metadata."""

    matrix: np.ndarray
    domain_space_id: str
    codomain_space_id: str
    ridge: float
    sample_count: int
    loss: float | None = None

    def __call__(self, feature: FeatureVector) -> FeatureVector:
        return predict(self, feature)


def predict(op: EmbeddingOperator, feature: FeatureVector) -> FeatureVector:
    """Apply the operator to a domain feature; checks the space id."""
    if feature.space_id != op.domain_space_id:
        raise SpaceMismatchError(
            f"operator domain is {op.domain_space_id!r}, got {feature.space_id!r}")
    return FeatureVector(op.matrix @ feature.values, op.codomain_space_id)


def simplex_project(vec: np.ndarray) -> np.ndarray:
    """Clip negatives and renormalize; evaluation-side postprocessing only."""
    v = np.clip(np.asarray(vec, dtype=float), 0.0, None)
    s = v.sum()
    return v / s if s > 0 else np.full_like(v, 1.0 / v.shape[0])


def covariance(phi_x: np.ndarray, phi_y: np.ndarray) -> np.ndarray:
    """Sample-normalized cross moment (1/N) Phi_X Phi_Y^T."""
    if phi_x.shape[1] != phi_y.shape[1]:
        raise ValueError("feature matrices must have equal column counts")
    return phi_x @ phi_y.T / phi_x.shape[1]


def _spd_solve(sym: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    """Solve (sym + lam I) x = rhs for symmetric PSD sym via Cholesky."""
    a = sym + lam * np.eye(sym.shape[0])
    try:
        cho = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(cho, rhs, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        cond = np.linalg.cond(a)
        raise SolveError(
            f"ridge solve failed (dim={a.shape[0]}, lambda={lam:.3e}, "
            f"cond={cond:.3e}): {exc}") from exc


def conditional_operator(phi_x: np.ndarray, phi_y: np.ndarray, lam: float) -> EmbeddingOperator:
    """Ridge estimate of the conditional embedding operator X given Y."""
    if lam <= 0:
        raise ValueError("ridge lambda must be positive")
    cov_xy = covariance(phi_x, phi_y)
    cov_yy = covariance(phi_y, phi_y)
    matrix = _spd_solve(cov_yy, cov_xy.T, lam).T
    return EmbeddingOperator(matrix, "Y", "X", lam, phi_x.shape[1])


def kbr_weights(phi_z: np.ndarray, z_feature: np.ndarray, lam: float) -> np.ndarray:
    """Conditioning weights Phi_Z^T (Phi_Z Phi_Z^T + lam I)^{-1} phi(z).

    This is the point-conditioning reweighting of the kernel Bayes rule in
    its finite-feature form.  Weights can be negative; no clipping.
    """
    sym = phi_z @ phi_z.T
    return phi_z.T @ _spd_solve(sym, np.asarray(z_feature, dtype=float), lam)


def kbr_conditional(phi_x: np.ndarray, phi_y: np.ndarray, phi_z: np.ndarray,
                    z_feature: np.ndarray, lam: float) -> EmbeddingOperator:
    """Conditional operator X given Y, conditioned at the point z.

    Computed as Sigma~_XY^z (Sigma~_YY^z + lam I)^{-1} with the z-weighted
    second moments Sigma~^z = Phi diag(w) Phi^T; degenerates to
    ``conditional_operator`` when Z is constant across the sample.
    """
    if lam <= 0:
        raise ValueError("ridge lambda must be positive")
    if phi_x.shape[1] != phi_y.shape[1] or phi_y.shape[1] != phi_z.shape[1]:
        raise ValueError("feature matrices must have equal column counts")
    w = kbr_weights(phi_z, z_feature, lam)
    wy = phi_y * w
    cov_xy = phi_x @ wy.T
    cov_yy = phi_y @ wy.T
    cov_yy = 0.5 * (cov_yy + cov_yy.T)
    matrix = _spd_solve(cov_yy, cov_xy.T, lam).T
    return EmbeddingOperator(matrix, "Y|z", "X", lam, phi_x.shape[1])


# ---------------------------------------------------------------------------
# Multi-factor ridge regression (Khatri-Rao design)
# ---------------------------------------------------------------------------

def khatri_rao(*factors) -> np.ndarray:
    """Column-wise Kronecker product of column-convention matrices."""
    out = factors[0]
    for f in factors[1:]:
        out = np.einsum("ik,jk->ijk", out, f).reshape(out.shape[0] * f.shape[0], -1)
    return out


def _is_one_hot(mat: np.ndarray) -> bool:
    if mat.shape[0] > 4096:
        return False
    nz_per_col = (mat != 0.0).sum(axis=0)
    return bool(np.all(nz_per_col == 1) and np.all(mat.max(axis=0) == 1.0)
                and np.all(mat.min(axis=0) >= 0.0))


def _accumulate_moments(target: np.ndarray, factors, chunk: int = 8192):
    """G = (1/K) Z Z^T and B = (1/K) Y Z^T with Z the Khatri-Rao design."""
    K = target.shape[1]
    d_in = int(np.prod([f.shape[0] for f in factors]))
    G = np.zeros((d_in, d_in))
    B = np.zeros((target.shape[0], d_in))
    for lo in range(0, K, chunk):
        hi = min(lo + chunk, K)
        Z = khatri_rao(*[f[:, lo:hi] for f in factors])
        G += Z @ Z.T
        B += target[:, lo:hi] @ Z.T
    return G / K, B / K


def default_ridge(mean_diag: float, sample_count: int, c: float = 0.1) -> float:
    """Schedule lambda = c * mean diag of the domain second moment / sqrt(K)."""
    return max(c * mean_diag / np.sqrt(max(sample_count, 1)), 1e-12)


def _ridge_multi(target: np.ndarray, factors, lam: float | None,
                 domain_cap: int = DEFAULT_DOMAIN_CAP):
    """Exact ridge minimizer of the operator regression, plus its loss.

    When the leading factor is one-hot the normal matrix is block diagonal
    over its cells and the solve is done per cell, which is what keeps the
    large history-tensor regressions cheap.
    """
    K = target.shape[1]
    if K < 1:
        raise ValueError("at least one sample is required")
    dims = [f.shape[0] for f in factors]
    d_in = int(np.prod(dims))
    if d_in > domain_cap:
        raise SolveError(f"domain dimension {d_in} exceeds cap {domain_cap}")
    d_out = target.shape[0]
    if len(factors) > 1 and _is_one_hot(factors[0]):
        cells = np.argmax(factors[0], axis=0)
        d0 = dims[0]
        d_rest = d_in // d0
        W = np.zeros((d_out, d_in))
        sq_sum = float((target ** 2).sum()) / K
        mean_diag_acc = 0.0
        # first pass per cell to know lambda needs global mean diag; compute
        # cell moments once and keep them
        cell_stats = []
        for c in range(d0):
            idx = np.nonzero(cells == c)[0]
            if idx.size == 0:
                cell_stats.append(None)
                continue
            G_c, B_c = _accumulate_moments(target[:, idx], [f[:, idx] for f in factors[1:]])
            G_c *= idx.size / K
            B_c *= idx.size / K
            cell_stats.append((G_c, B_c))
            mean_diag_acc += np.trace(G_c)
        eff_lam = default_ridge(mean_diag_acc / d_in, K) if lam is None else lam
        if eff_lam <= 0:
            raise ValueError("ridge lambda must be positive")
        fit_term = sq_sum
        for c, stats in enumerate(cell_stats):
            if stats is None:
                continue
            G_c, B_c = stats
            W_c = _spd_solve(G_c, B_c.T, eff_lam).T
            W[:, c * d_rest:(c + 1) * d_rest] = W_c
            fit_term += float(np.sum(W_c * (W_c @ G_c))) - 2.0 * float(np.sum(W_c * B_c))
        loss = fit_term + eff_lam * float((W ** 2).sum())
        return W, eff_lam, loss
    G, B = _accumulate_moments(target, list(factors))
    eff_lam = default_ridge(float(np.trace(G)) / d_in, K) if lam is None else lam
    if eff_lam <= 0:
        raise ValueError("ridge lambda must be positive")
    W = _spd_solve(G, B.T, eff_lam).T
    sq_sum = float((target ** 2).sum()) / K
    loss = sq_sum + float(np.sum(W * (W @ G))) - 2.0 * float(np.sum(W * B)) \
        + eff_lam * float((W ** 2).sum())
    return W, eff_lam, loss


def ridge_objective_gradient(target: np.ndarray, factors, W: np.ndarray,
                             lam: float) -> np.ndarray:
    """Gradient of the ridge objective at W; ~0 at the exact minimizer."""
    G, B = _accumulate_moments(target, list(factors))
    return 2.0 * (W @ G - B + lam * W)


# ---------------------------------------------------------------------------
# The five operators
# ---------------------------------------------------------------------------

def fit_one_step(blocks: FeatureBlocks, lam: float | None = None,
                 domain_cap: int = DEFAULT_DOMAIN_CAP) -> EmbeddingOperator:
    """Single-step observation prediction from (history, action) features."""
    W, eff_lam, loss = _ridge_multi(blocks.obs1, [blocks.hist, blocks.act1], lam, domain_cap)
    return EmbeddingOperator(W, "history(x)act", "obs", eff_lam, blocks.count, loss)


def fit_forward(blocks: FeatureBlocks, lam: float | None = None,
                domain_cap: int = DEFAULT_DOMAIN_CAP) -> EmbeddingOperator:
    """W-step test-observation prediction from (history, test-action) features."""
    W, eff_lam, loss = _ridge_multi(blocks.test_obs, [blocks.hist, blocks.test_act], lam, domain_cap)
    return EmbeddingOperator(W, "history(x)act_block", "obs_block", eff_lam, blocks.count, loss)


def fit_shifted_direct(blocks: FeatureBlocks, lam: float | None = None,
                       domain_cap: int = DEFAULT_DOMAIN_CAP) -> EmbeddingOperator:
    """Direct refit of the shifted forward operator on shifted windows."""
    W, eff_lam, loss = _ridge_multi(blocks.shifted_obs, [blocks.hist, blocks.shifted_act],
                                    lam, domain_cap)
    return EmbeddingOperator(W, "history(x)act_block", "obs_block", eff_lam, blocks.count, loss)


@dataclass
class ShiftedOperator:
    """The lift P taking (o, a) features to a codomain-square matrix.

    Stored as a 3-mode array contracted against phi_o(o) (x) phi_a(a); the
    per-pair matrices of the lifted-operator notation are recovered by
    ``apply``.
    """

    tensor: np.ndarray          # (d_obs_block, d_obs_block, d_obs * d_act)
    obs_space_id: str
    act_space_id: str
    block_space_id: str
    ridge: float
    sample_count: int
    loss: float | None = None

    def apply(self, pair_feature: np.ndarray) -> np.ndarray:
        """Contract against a phi_o (x) phi_a feature, yielding a matrix."""
        return self.tensor @ np.asarray(pair_feature, dtype=float)

    def apply_pair(self, obs_feature: FeatureVector, act_feature: FeatureVector) -> np.ndarray:
        if obs_feature.space_id != self.obs_space_id or act_feature.space_id != self.act_space_id:
            raise SpaceMismatchError("shifted operator applied to wrong (o, a) spaces")
        return self.apply(np.kron(obs_feature.values, act_feature.values))


def fit_shifted(blocks: FeatureBlocks, forward_op: EmbeddingOperator,
                lam: float | None = None,
                domain_cap: int = DEFAULT_DOMAIN_CAP) -> ShiftedOperator:
    """Fit the lift so P_(o,a) composed with the forward operator predicts
    the shifted test observations.

    The regression input is the forward prediction at the shifted action
    block; the target is the shifted observation block; the design is the
    Kronecker pairing of that input with the (o, a) step features, making
    the whole problem one linear ridge fit for the 3-mode array.
    """
    v = forward_op.matrix @ khatri_rao(blocks.hist, blocks.shifted_act)
    pair = khatri_rao(blocks.obs1, blocks.act1)
    W, eff_lam, loss = _ridge_multi(blocks.shifted_obs, [v, pair], lam, domain_cap)
    d_block = blocks.test_obs.shape[0]
    d_pair = pair.shape[0]
    tensor = W.reshape(d_block, d_block, d_pair)
    return ShiftedOperator(tensor, "obs", "act", "obs_block", eff_lam, blocks.count, loss)


def fit_extended(blocks: FeatureBlocks, lam: float | None = None,
                 domain_cap: int = DEFAULT_DOMAIN_CAP) -> EmbeddingOperator:
    """Joint (W+1)-step prediction with tensored domain and codomain."""
    target = khatri_rao(blocks.shifted_obs, blocks.obs1)
    W, eff_lam, loss = _ridge_multi(target, [blocks.hist, blocks.shifted_act, blocks.act1],
                                    lam, domain_cap)
    return EmbeddingOperator(W, "history(x)act_block(x)act", "obs_block(x)obs",
                             eff_lam, blocks.count, loss)


def compose_shifted_forward(shifted: ShiftedOperator, forward_op: EmbeddingOperator,
                            pair_op: EmbeddingOperator, d_hist: int) -> np.ndarray:
    """Matrix of P∘forward with the lift contracted per history basis vector.

    The direct shifted refit marginalizes the one-step pair (o, a) given the
    history, so the comparable composition contracts P at the conditional
    mean pair feature E[phi_o (x) phi_a | h], supplied by ``pair_op``.  By
    linearity this equals the conditional expectation of the lifted
    operator.
    """
    d_out, d_in = forward_op.matrix.shape
    d_act = d_in // d_hist
    out = np.empty_like(forward_op.matrix)
    for i in range(d_hist):
        lift = shifted.apply(pair_op.matrix[:, i])
        cols = slice(i * d_act, (i + 1) * d_act)
        out[:, cols] = lift @ forward_op.matrix[:, cols]
    return out


def composition_residual(shifted: ShiftedOperator, forward_op: EmbeddingOperator,
                         direct: EmbeddingOperator, pair_op: EmbeddingOperator,
                         blocks: FeatureBlocks) -> float:
    """Relative Frobenius gap between P∘forward and the direct shifted refit.

    Both operators are applied to the realized (history, shifted-action)
    inputs, so the Frobenius norm weights each operator column by its
    visitation frequency under the data distribution.
    """
    num = 0.0
    den = 0.0
    K = blocks.count
    chunk = 8192
    for lo in range(0, K, chunk):
        hi = min(lo + chunk, K)
        Z = khatri_rao(blocks.hist[:, lo:hi], blocks.shifted_act[:, lo:hi])
        direct_cols = direct.matrix @ Z
        fwd_cols = forward_op.matrix @ Z
        pair_cols = pair_op.matrix @ blocks.hist[:, lo:hi]
        # contract the lift per column: (d_out, d_out, d_pair) x (d_pair, n)
        lifted = np.einsum("ijp,pn,jn->in", shifted.tensor, pair_cols, fwd_cols)
        num += float(((lifted - direct_cols) ** 2).sum())
        den += float((direct_cols ** 2).sum())
    return float(np.sqrt(num / den)) if den > 0 else 0.0


@dataclass
class OperatorBundle:
    """The five fitted operators plus shared feature maps and fit metadata.

    ``pair_op`` predicts the one-step (observation, action) pair feature
    from the history feature; it is plumbing for compositions and policy
    state summaries, not one of the five operators.
    """

    maps: FeatureMapSet
    one_step: EmbeddingOperator
    forward: EmbeddingOperator
    shifted: ShiftedOperator
    extended: EmbeddingOperator
    pair_op: EmbeddingOperator
    sample_count: int
    seed: int
    losses: dict = field(default_factory=dict)

    def spaces_consistent(self) -> bool:
        return (self.one_step.codomain_space_id == "obs"
                and self.forward.codomain_space_id == "obs_block"
                and self.extended.codomain_space_id == "obs_block(x)obs")


def fit_bundle(blocks: FeatureBlocks, maps: FeatureMapSet, lam: float | None = None,
               seed: int = 0) -> OperatorBundle:
    """Fit all five operators on one featurized window set.

    The shifted forward operator has no loss of its own (it is the
    composition P∘forward); its entry in the loss report is the relative
    residual against a direct refit on shifted windows.
    """
    one_step = fit_one_step(blocks, lam)
    forward = fit_forward(blocks, lam)
    shifted = fit_shifted(blocks, forward, lam)
    extended = fit_extended(blocks, lam)
    direct = fit_shifted_direct(blocks, lam)
    pair = khatri_rao(blocks.obs1, blocks.act1)
    pair_matrix, pair_lam, _ = _ridge_multi(pair, [blocks.hist], lam)
    pair_op = EmbeddingOperator(pair_matrix, "history", "obs(x)act", pair_lam,
                                blocks.count)
    resid = composition_residual(shifted, forward, direct, pair_op, blocks)
    losses = {
        "one_step": one_step.loss,
        "forward": forward.loss,
        "shifted": shifted.loss,
        "extended": extended.loss,
        "shifted_forward_residual": resid,
    }
    return OperatorBundle(maps=maps, one_step=one_step, forward=forward,
                          shifted=shifted, extended=extended, pair_op=pair_op,
                          sample_count=blocks.count, seed=seed, losses=losses)


# ---------------------------------------------------------------------------
# Bundle-driven embeddings used by policies and evaluation
# ---------------------------------------------------------------------------

def uniform_mean_feature(fmap: FeatureMap) -> np.ndarray:
    """Mean feature vector under the exploration reference distribution.

    Uniform over the alphabet for one-hot maps; a zero-mean action vector
    for linear maps (the bias coordinate survives).  Random Fourier maps
    have no closed form here.
    """
    kind = fmap.spec.kind
    if kind == "one-hot":
        if fmap.mode == "tensor":
            return np.full(fmap.output_dim, 1.0 / fmap.output_dim)
        return np.full(fmap.output_dim, 1.0 / fmap.step_dim)
    if kind == "linear":
        step = np.zeros(fmap.step_dim)
        if fmap.spec.bias:
            step[0] = 1.0
        if fmap.mode == "tensor":
            out = step
            for _ in range(fmap.arity - 1):
                out = np.kron(out, step)
            return out
        return np.tile(step, fmap.arity)
    raise FeatureError("no closed-form mean feature for radial-basis maps")


def predicted_shift_embedding(bundle: OperatorBundle, hist_feature: np.ndarray) -> np.ndarray:
    """Predicted shifted W-step observation embedding for one history.

    The lift is contracted at the history-conditional mean (o, a) pair
    feature and applied to the forward prediction under uniform reference
    test actions.  This is the observation-side state summary that policy
    means are parameterized on.
    """
    mean_block = uniform_mean_feature(bundle.maps.act_block)
    h = np.asarray(hist_feature, dtype=float)
    u = bundle.forward.matrix @ np.kron(h, mean_block)
    lift = bundle.shifted.apply(bundle.pair_op.matrix @ h)
    return lift @ u


# ---------------------------------------------------------------------------
# Bundle serialization (versioned, bit-exact round trip)
# ---------------------------------------------------------------------------

def _operator_to_dict(op: EmbeddingOperator) -> dict:
    return {
        "matrix": _encode_array(op.matrix),
        "domain_space_id": op.domain_space_id,
        "codomain_space_id": op.codomain_space_id,
        "ridge": op.ridge,
        "sample_count": op.sample_count,
        "loss": op.loss,
    }


def _operator_from_dict(d: dict) -> EmbeddingOperator:
    return EmbeddingOperator(_decode_array(d["matrix"]), d["domain_space_id"],
                             d["codomain_space_id"], d["ridge"], d["sample_count"],
                             d["loss"])


def bundle_to_dict(bundle: OperatorBundle, links_section: dict | None = None) -> dict:
    d = {
        "format": "kpsr-bundle",
        "version": BUNDLE_FORMAT_VERSION,
        "maps": bundle.maps.to_dict(),
        "one_step": _operator_to_dict(bundle.one_step),
        "forward": _operator_to_dict(bundle.forward),
        "extended": _operator_to_dict(bundle.extended),
        "shifted": {
            "tensor": _encode_array(bundle.shifted.tensor.reshape(bundle.shifted.tensor.shape[0], -1)),
            "shape": list(bundle.shifted.tensor.shape),
            "obs_space_id": bundle.shifted.obs_space_id,
            "act_space_id": bundle.shifted.act_space_id,
            "block_space_id": bundle.shifted.block_space_id,
            "ridge": bundle.shifted.ridge,
            "sample_count": bundle.shifted.sample_count,
            "loss": bundle.shifted.loss,
        },
        "pair_op": _operator_to_dict(bundle.pair_op),
        "sample_count": bundle.sample_count,
        "seed": bundle.seed,
        "losses": bundle.losses,
    }
    if links_section is not None:
        d["links"] = links_section
    return d


def bundle_from_dict(d: dict) -> tuple:
    """Returns (bundle, links_section_or_None); validates format and spaces."""
    if d.get("format") != "kpsr-bundle":
        raise BundleFormatError("not a kpsr bundle file")
    if d.get("version") != BUNDLE_FORMAT_VERSION:
        raise BundleFormatError(f"unsupported bundle version {d.get('version')!r}")
    maps = FeatureMapSet.from_dict(d["maps"])
    one_step = _operator_from_dict(d["one_step"])
    forward = _operator_from_dict(d["forward"])
    extended = _operator_from_dict(d["extended"])
    sh = d["shifted"]
    shifted = ShiftedOperator(_decode_array(sh["tensor"]).reshape(sh["shape"]),
                              sh["obs_space_id"], sh["act_space_id"], sh["block_space_id"],
                              sh["ridge"], sh["sample_count"], sh["loss"])
    bundle = OperatorBundle(maps=maps, one_step=one_step, forward=forward,
                            shifted=shifted, extended=extended,
                            pair_op=_operator_from_dict(d["pair_op"]),
                            sample_count=d["sample_count"], seed=d["seed"],
                            losses=d.get("losses", {}))
    expected = {
        "one_step": (one_step, maps.obs.output_dim,
                     maps.history.output_dim * maps.act.output_dim),
        "forward": (forward, maps.obs_block.output_dim,
                    maps.history.output_dim * maps.act_block.output_dim),
    }
    for name, (op, d_out, d_in) in expected.items():
        if op.matrix.shape != (d_out, d_in):
            raise BundleFormatError(
                f"{name} operator shape {op.matrix.shape} does not match the "
                f"stored feature maps (expected {(d_out, d_in)})")
    return bundle, d.get("links")


def save_bundle(bundle: OperatorBundle, path, links_section: dict | None = None):
    payload = bundle_to_dict(bundle, links_section)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_bundle(path) -> tuple:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"corrupt bundle file: {exc}") from exc
    return bundle_from_dict(payload)
