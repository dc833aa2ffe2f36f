"""Experiment configuration loading, validation, and hashing.

Configs are JSON.  The experiment config references an environment config
(builtin name, file path, or inline dict), fixes the window lengths, the
feature specs per space, ridge levels, and every seed, so any output is
reproducible from the config alone.  The config hash stamped into output
files is the SHA-256 of the canonical JSON serialization.
"""

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .data import FeatureMapSet
from .envs import LinearGaussianSystem, TabularPOMDP, env_from_dict
from .features import KernelSpec, FeatureMap, median_bandwidth
from .training import TrainSettings


class ConfigError(ValueError):
    """Invalid or unresolvable experiment configuration."""


BUILTIN_ENVS = ("tab3", "tab-det", "tab-iid", "lgs1")
BUILTIN_EXPERIMENTS = ("tab3", "tab3-constrained", "tab-det", "tab-iid", "lgs1")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def _read_builtin(kind: str, name: str) -> dict:
    ref = resources.files("kpsr").joinpath(f"configs/{kind}/{name}.json")
    try:
        return json.loads(ref.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"no builtin {kind[:-1]} config named {name!r}") from exc


def load_env_config(ref) -> dict:
    if isinstance(ref, dict):
        return ref
    if isinstance(ref, str) and ref in BUILTIN_ENVS:
        return _read_builtin("envs", ref)
    try:
        with open(ref, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read env config {ref!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"env config {ref!r} is not valid JSON: {exc}") from exc


@dataclass
class ExperimentConfig:
    """Validated experiment description plus its provenance hash."""

    raw: dict
    env_dict: dict
    W: int
    L: int
    features: dict
    lam: float | None
    lam_link: float | None
    datagen: dict
    mc_samples: int
    train_settings: TrainSettings
    seed: int
    name: str

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def make_env(self):
        return env_from_dict(self.env_dict)


def load_experiment_config(ref, seed_override: int | None = None) -> ExperimentConfig:
    """Resolve a builtin name, a path, or an inline dict into a config."""
    if isinstance(ref, dict):
        raw = ref
    elif isinstance(ref, str) and ref in BUILTIN_EXPERIMENTS:
        raw = _read_builtin("experiments", ref)
    else:
        try:
            with open(ref, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {ref!r}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {ref!r} is not valid JSON: {exc}") from exc
    return _validate(raw, seed_override)


def _validate(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    raw = dict(raw)
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    for key in ("env", "W", "L"):
        if key not in raw:
            raise ConfigError(f"config is missing required key {key!r}")
    W, L = int(raw["W"]), int(raw["L"])
    if W < 1 or L < 1:
        raise ConfigError("W and L must be >= 1")
    env_dict = load_env_config(raw["env"])
    try:
        env_from_dict(env_dict)
    except Exception as exc:
        raise ConfigError(f"environment config invalid: {exc}") from exc
    features = raw.get("features", {"kind": "one-hot", "block_mode": "tensor"})
    ridge = raw.get("ridge", {})
    datagen = raw.get("datagen", {"episodes": 100, "steps": 200})
    tr = raw.get("train", {})
    cbar = tuple(float(c) for c in raw.get("cbar", []))
    settings = TrainSettings(
        iterations=int(tr.get("iterations", 150)),
        alpha0=float(tr.get("alpha0", 2.0)),
        beta0=float(tr.get("beta0", 0.5)),
        mc_samples=int(raw.get("mc_samples", 128)),
        n_eval_histories=int(tr.get("n_eval_histories", 12)),
        link_refit_interval=int(tr.get("link_refit_interval", 10)),
        link_episodes=int(tr.get("link_episodes", 48)),
        link_episode_length=int(tr.get("link_episode_length", 24)),
        checkpoint_interval=int(tr.get("checkpoint_interval", 50)),
        cbar=cbar,
    )
    if "seed" not in raw:
        raise ConfigError("config must pin an explicit seed")
    return ExperimentConfig(
        raw=raw, env_dict=env_dict, W=W, L=L, features=features,
        lam=None if ridge.get("lam") is None else float(ridge["lam"]),
        lam_link=None if ridge.get("lam_link") is None else float(ridge["lam_link"]),
        datagen=datagen, mc_samples=int(raw.get("mc_samples", 128)),
        train_settings=settings, seed=int(raw["seed"]),
        name=str(raw.get("name", "experiment")),
    )


def build_maps(env, W: int, L: int, features: dict, seed: int,
               bandwidth_data=None) -> FeatureMapSet:
    """Construct the five feature maps an experiment uses.

    Discrete environments get one-hot maps (history pairs packed into a
    single alphabet with a padding sentinel).  Continuous environments get
    linear or random Fourier features over flattened blocks; a null
    radial-basis bandwidth falls back to the median heuristic computed on
    ``bandwidth_data``.
    """
    kind = features.get("kind", "one-hot" if isinstance(env, TabularPOMDP) else "linear")
    mode = features.get("block_mode", "tensor")
    if isinstance(env, TabularPOMDP):
        if kind != "one-hot":
            raise ConfigError("tabular environments use one-hot features")
        na, no = env.num_actions, env.num_obs
        pair_alphabet = na * no + 1
        return FeatureMapSet(
            history=FeatureMap(KernelSpec("one-hot", alphabet=pair_alphabet, seed=seed),
                               arity=L, mode=mode, space_id="history"),
            obs_block=FeatureMap(KernelSpec("one-hot", alphabet=no, seed=seed),
                                 arity=W, mode=mode, space_id="obs_block"),
            act_block=FeatureMap(KernelSpec("one-hot", alphabet=na, seed=seed),
                                 arity=W, mode=mode, space_id="act_block"),
            obs=FeatureMap(KernelSpec("one-hot", alphabet=no, seed=seed),
                           arity=1, space_id="obs"),
            act=FeatureMap(KernelSpec("one-hot", alphabet=na, seed=seed),
                           arity=1, space_id="act"),
            discrete=True, num_actions=na, num_obs=no,
        )
    if not isinstance(env, LinearGaussianSystem):
        raise ConfigError(f"unsupported environment type {type(env).__name__}")
    da, do = env.action_dim, env.obs_dim
    if kind == "linear":
        bias = bool(features.get("bias", True))

        def lin(dim, space):
            return FeatureMap(KernelSpec("linear", input_dim=dim, bias=bias, seed=seed),
                              arity=1, space_id=space)

        return FeatureMapSet(
            history=lin(L * (da + do), "history"),
            obs_block=lin(W * do, "obs_block"),
            act_block=lin(W * da, "act_block"),
            obs=lin(do, "obs"),
            act=lin(da, "act"),
            discrete=False,
        )
    if kind == "radial-basis":
        out_dim = int(features.get("output_dim", 256))
        bw = features.get("bandwidth")

        def rbf(dim, space, data):
            b = bw if bw is not None else median_bandwidth(data, seed=seed)
            spec = KernelSpec("radial-basis", bandwidth=float(b), seed=seed,
                              input_dim=dim, output_dim=out_dim)
            return FeatureMap(spec, arity=1, space_id=space)

        if bw is None and bandwidth_data is None:
            raise ConfigError("radial-basis maps need a bandwidth or sample data")
        bd = bandwidth_data or {}
        return FeatureMapSet(
            history=rbf(L * (da + do), "history", bd.get("history")),
            obs_block=rbf(W * do, "obs_block", bd.get("obs_block")),
            act_block=rbf(W * da, "act_block", bd.get("act_block")),
            obs=rbf(do, "obs", bd.get("obs")),
            act=rbf(da, "act", bd.get("act")),
            discrete=False,
        )
    raise ConfigError(f"unknown feature kind {kind!r}")
