"""Finite-dimensional feature maps over symbols, vectors, and step blocks.

Three families are provided: exact one-hot features for finite alphabets,
random trigonometric (Fourier) features approximating a Gaussian kernel on
vector inputs, and plain linear features (optionally with a bias entry) for
linear-Gaussian systems.  Multi-step blocks compose per-step features either
by Kronecker product (exact tensor semantics, the default) or by
concatenation (a dimension-controlled approximation).

All maps are deterministic: random feature weights are drawn once from the
spec seed and frozen, so the same input always embeds to the bit-identical
vector.
"""

import base64
from dataclasses import dataclass, field

import numpy as np

VALID_KINDS = ("one-hot", "radial-basis", "linear")


class FeatureError(ValueError):
    """Bad kernel spec, arity mismatch, or feature-space mismatch."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus the parameters needed to realize it as features.

    ``alphabet`` is required for one-hot features, ``input_dim`` for the
    continuous kinds.  ``bandwidth`` applies to radial-basis features only.
    ``bias`` appends a constant-1 entry to linear features, which lets a
    tensor product of linear maps represent additive (not just bilinear)
    functions.
    """

    kind: str
    bandwidth: float | None = None
    seed: int = 0
    alphabet: int | None = None
    input_dim: int | None = None
    output_dim: int | None = None
    bias: bool = False

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise FeatureError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "one-hot":
            if self.alphabet is None or self.alphabet <= 0:
                raise FeatureError("one-hot features require a positive finite alphabet")
        if self.kind == "radial-basis":
            if self.bandwidth is None or self.bandwidth <= 0:
                raise FeatureError("radial-basis features require bandwidth > 0")
            if self.input_dim is None or self.input_dim <= 0:
                raise FeatureError("radial-basis features require a positive input_dim")
            if self.output_dim is None or self.output_dim <= 0:
                raise FeatureError("radial-basis features require a positive output_dim")
            if self.output_dim % 2 != 0:
                raise FeatureError("radial-basis output_dim must be even (cos/sin pairs)")
        if self.kind == "linear":
            if self.input_dim is None or self.input_dim <= 0:
                raise FeatureError("linear features require a positive input_dim")


@dataclass(frozen=True)
class FeatureVector:
    """A feature vector tagged with the id of the space it lives in."""

    values: np.ndarray
    space_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def tensor_feature(a: FeatureVector, b: FeatureVector) -> FeatureVector:
    """Kronecker product of two feature vectors, bilinear in each argument."""
    return FeatureVector(np.kron(a.values, b.values), f"{a.space_id}(x){b.space_id}")


class FeatureMap:
    """Deterministic map from raw inputs to fixed-length feature vectors.

    ``arity`` is the number of steps an input block carries: 1 for single
    symbols/vectors, W for test windows, L for history suffixes.  Discrete
    inputs are integer symbols (or length-``arity`` sequences of them);
    continuous inputs are vectors of length ``input_dim`` (or ``arity`` of
    them).  In ``tensor`` mode per-step features are combined by Kronecker
    product; in ``concat`` mode they are stacked.
    """

    def __init__(self, spec: KernelSpec, arity: int = 1, mode: str = "tensor",
                 space_id: str | None = None):
        if arity < 1:
            raise FeatureError("arity must be >= 1")
        if mode not in ("tensor", "concat"):
            raise FeatureError(f"unknown block mode {mode!r}")
        self.spec = spec
        self.arity = int(arity)
        self.mode = mode
        self.space_id = space_id or f"{spec.kind}[{arity}]"
        self._weights = None
        self._offsets = None
        if spec.kind == "radial-basis":
            rng = np.random.default_rng(spec.seed)
            n_freq = spec.output_dim // 2
            self._weights = rng.normal(scale=1.0 / spec.bandwidth,
                                       size=(n_freq, spec.input_dim))
            # offsets kept for format compatibility; cos/sin pairing needs none
            self._offsets = np.zeros(n_freq)

    @property
    def step_dim(self) -> int:
        if self.spec.kind == "one-hot":
            return self.spec.alphabet
        if self.spec.kind == "radial-basis":
            return self.spec.output_dim
        return self.spec.input_dim + (1 if self.spec.bias else 0)

    @property
    def output_dim(self) -> int:
        if self.mode == "tensor":
            return self.step_dim ** self.arity
        return self.step_dim * self.arity

    def _embed_step(self, x) -> np.ndarray:
        kind = self.spec.kind
        if kind == "one-hot":
            sym = int(x)
            if not 0 <= sym < self.spec.alphabet:
                raise FeatureError(f"symbol {sym} outside alphabet of size {self.spec.alphabet}")
            out = np.zeros(self.spec.alphabet)
            out[sym] = 1.0
            return out
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.spec.input_dim:
            raise FeatureError(f"expected input of dim {self.spec.input_dim}, got {x.shape[0]}")
        if kind == "radial-basis":
            phase = self._weights @ x
            n_freq = self._weights.shape[0]
            out = np.empty(2 * n_freq)
            out[0::2] = np.cos(phase)
            out[1::2] = np.sin(phase)
            return out / np.sqrt(n_freq)
        if self.spec.bias:
            return np.concatenate(([1.0], x))
        return x.copy()

    def _steps_of(self, raw):
        if self.arity == 1:
            if self.spec.kind == "one-hot" and isinstance(raw, (list, tuple)):
                if len(raw) != 1:
                    raise FeatureError(f"expected a single symbol, got {len(raw)}")
                return [raw[0]]
            return [raw]
        if self.spec.kind == "one-hot":
            steps = list(raw)
        else:
            arr = np.asarray(raw, dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(self.arity, -1)
            steps = list(arr)
        if len(steps) != self.arity:
            raise FeatureError(f"expected a block of {self.arity} steps, got {len(steps)}")
        return steps

    def embed(self, raw) -> FeatureVector:
        """Embed one input (symbol, vector, or block thereof)."""
        steps = [self._embed_step(s) for s in self._steps_of(raw)]
        if self.mode == "tensor":
            out = steps[0]
            for s in steps[1:]:
                out = np.kron(out, s)
        else:
            out = np.concatenate(steps)
        return FeatureVector(out, self.space_id)

    def embed_many(self, inputs) -> np.ndarray:
        """Embed a sequence of inputs into a (output_dim, N) column matrix.

        One-hot maps take a vectorized path; other kinds fall back to
        per-input embedding.
        """
        n = len(inputs)
        if n == 0:
            return np.zeros((self.output_dim, 0))
        if self.spec.kind == "one-hot" and self.mode == "tensor":
            syms = np.asarray([self._steps_of(x) for x in inputs], dtype=np.int64)
            if np.any(syms < 0) or np.any(syms >= self.spec.alphabet):
                raise FeatureError("symbol outside alphabet")
            # mixed-radix (big-endian) index equals the Kronecker position
            radix = self.spec.alphabet ** np.arange(self.arity - 1, -1, -1, dtype=np.int64)
            idx = syms @ radix
            out = np.zeros((self.output_dim, n))
            out[idx, np.arange(n)] = 1.0
            return out
        cols = [self.embed(x).values for x in inputs]
        return np.stack(cols, axis=1)

    def gram(self, inputs) -> np.ndarray:
        """Pairwise feature inner products, an N x N symmetric PSD matrix."""
        if len(inputs) == 0:
            raise FeatureError("gram_matrix requires a nonempty input list")
        phi = self.embed_many(inputs)
        g = phi.T @ phi
        return 0.5 * (g + g.T)

    def to_dict(self) -> dict:
        d = {
            "kind": self.spec.kind,
            "bandwidth": self.spec.bandwidth,
            "seed": self.spec.seed,
            "alphabet": self.spec.alphabet,
            "input_dim": self.spec.input_dim,
            "output_dim_spec": self.spec.output_dim,
            "bias": self.spec.bias,
            "arity": self.arity,
            "mode": self.mode,
            "space_id": self.space_id,
            "output_dim": self.output_dim,
        }
        if self._weights is not None:
            d["weights"] = _encode_array(self._weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        spec = KernelSpec(kind=d["kind"], bandwidth=d["bandwidth"], seed=d["seed"],
                          alphabet=d["alphabet"], input_dim=d["input_dim"],
                          output_dim=d["output_dim_spec"], bias=d["bias"])
        fmap = cls(spec, arity=d["arity"], mode=d["mode"], space_id=d["space_id"])
        if "weights" in d:
            stored = _decode_array(d["weights"])
            if fmap._weights is None or stored.shape != fmap._weights.shape:
                raise FeatureError("stored random weights do not match the spec")
            fmap._weights = stored
        if fmap.output_dim != d["output_dim"]:
            raise FeatureError("serialized output_dim does not match the reconstructed map")
        return fmap


def make_feature_map(spec: KernelSpec, arity: int = 1, mode: str = "tensor",
                     space_id: str | None = None) -> FeatureMap:
    """Construct a FeatureMap, validating the spec for the requested arity."""
    return FeatureMap(spec, arity=arity, mode=mode, space_id=space_id)


def gram_matrix(fmap: FeatureMap, inputs) -> np.ndarray:
    return fmap.gram(inputs)


def embed(fmap: FeatureMap, raw) -> FeatureVector:
    return fmap.embed(raw)


def median_bandwidth(points, seed: int = 0, max_samples: int = 256) -> float:
    """Median pairwise distance of a subsample, the usual bandwidth default."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.shape[0] > max_samples:
        rng = np.random.default_rng(seed)
        pts = pts[rng.choice(pts.shape[0], size=max_samples, replace=False)]
    diff = pts[:, None, :] - pts[None, :, :]
    dists = np.sqrt((diff ** 2).sum(axis=2))
    upper = dists[np.triu_indices(pts.shape[0], k=1)]
    med = float(np.median(upper)) if upper.size else 1.0
    return med if med > 0 else 1.0


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "dtype": "float64-le",
        "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") != "float64-le":
        raise FeatureError(f"unsupported array dtype tag {d.get('dtype')!r}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()
