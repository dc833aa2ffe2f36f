"""Trajectory storage, test/history windowing, and regression blocks.

The on-disk trajectory format is a comma-separated text file with a header
row ``episode,t,action,observation,reward,risk_1,...,risk_N``.  Lines
starting with ``#`` are metadata comments (config hash, tool version) and
are ignored by the parser.  Vector-valued actions or observations are
serialized as ``[v1;v2;...]`` with full-precision floats, so a write/load
round trip is bit-exact.
"""

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap


class DataFormatError(ValueError):
    """Malformed trajectory file or inconsistent record arity."""


@dataclass(frozen=True)
class StepRecord:
    """One interaction step: the action taken, then what the system emitted."""

    action: object
    observation: object
    reward: float
    risks: tuple = ()


@dataclass
class Trajectory:
    episode_id: int
    steps: list

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class WindowSample:
    """All index-aligned blocks around one anchor step t of an episode.

    ``history`` holds the last L (action, observation) pairs before t,
    left-padded with ``None`` entries when the episode prefix is shorter
    than L.  Test blocks follow the window convention: the W-step test
    pairs actions a_{t-1:t+W-2} (stored here as the W actions starting at
    the anchor) with observations o_{t:t+W-1}; the shifted test moves both
    one step forward.  Extended sums cover the (W+1)-step span used by the
    value and risk targets and exist only when the episode is long enough.
    """

    episode_id: int
    t: int
    history: tuple
    one_step: tuple
    test_actions: tuple
    test_observations: tuple
    shifted_actions: tuple
    shifted_observations: tuple
    extended_return: float
    extended_risks: tuple


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    heldout: tuple
    seed: int


def make_windows(trajectories, W: int, L: int) -> list:
    """Slice every episode into WindowSamples with stride-1 anchors.

    Anchors run over indices t with a full L-step history before them and a
    full (W+1)-step future after them, giving max(0, T - W - L) samples per
    episode of length T.
    """
    if W < 1:
        raise ValueError("window length W must be >= 1")
    if L < 1:
        raise ValueError("history length L must be >= 1")
    samples = []
    for traj in trajectories:
        steps = traj.steps
        T = len(steps)
        for t in range(L, T - W):
            hist = tuple((s.action, s.observation) for s in steps[t - L:t])
            rewards = [steps[i].reward for i in range(t, t + W + 1)]
            risks = np.array([steps[i].risks for i in range(t, t + W + 1)], dtype=float)
            samples.append(WindowSample(
                episode_id=traj.episode_id,
                t=t,
                history=hist,
                one_step=(steps[t].action, steps[t].observation),
                test_actions=tuple(steps[i].action for i in range(t, t + W)),
                test_observations=tuple(steps[i].observation for i in range(t, t + W)),
                shifted_actions=tuple(steps[i].action for i in range(t + 1, t + W + 1)),
                shifted_observations=tuple(steps[i].observation for i in range(t + 1, t + W + 1)),
                extended_return=float(sum(rewards)),
                extended_risks=tuple(risks.sum(axis=0)) if risks.size else (),
            ))
    return samples


@dataclass
class FeatureMapSet:
    """The five feature maps used for operator regression.

    ``history`` embeds L-step (action, observation) suffixes, ``obs_block``
    and ``act_block`` embed W-step test windows, ``obs`` and ``act`` embed
    single steps.  ``discrete`` selects symbol encoding (history pairs are
    packed to a single alphabet with a padding sentinel) versus flat vector
    encoding.
    """

    history: FeatureMap
    obs_block: FeatureMap
    act_block: FeatureMap
    obs: FeatureMap
    act: FeatureMap
    discrete: bool = True
    num_actions: int | None = None
    num_obs: int | None = None

    def history_input(self, history):
        if self.discrete:
            pad = self.num_actions * self.num_obs
            return tuple(
                pad if a is None else int(a) * self.num_obs + int(o)
                for a, o in history
            )
        parts = []
        for a, o in history:
            if a is None:
                a = np.zeros_like(np.atleast_1d(self._vec(history, 0)))
            parts.append(np.concatenate([np.atleast_1d(np.asarray(a, dtype=float)),
                                         np.atleast_1d(np.asarray(o, dtype=float))]))
        return np.concatenate(parts)

    @staticmethod
    def _vec(history, idx):
        for a, o in history:
            if a is not None:
                return np.asarray(a, dtype=float)
        raise DataFormatError("history contains only padding")

    def block_input(self, symbols):
        if self.discrete:
            return tuple(int(s) for s in symbols)
        return np.concatenate([np.atleast_1d(np.asarray(s, dtype=float)) for s in symbols])

    def step_input(self, symbol):
        if self.discrete:
            return int(symbol)
        return np.atleast_1d(np.asarray(symbol, dtype=float))

    def to_dict(self) -> dict:
        return {
            "history": self.history.to_dict(),
            "obs_block": self.obs_block.to_dict(),
            "act_block": self.act_block.to_dict(),
            "obs": self.obs.to_dict(),
            "act": self.act.to_dict(),
            "discrete": self.discrete,
            "num_actions": self.num_actions,
            "num_obs": self.num_obs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMapSet":
        return cls(
            history=FeatureMap.from_dict(d["history"]),
            obs_block=FeatureMap.from_dict(d["obs_block"]),
            act_block=FeatureMap.from_dict(d["act_block"]),
            obs=FeatureMap.from_dict(d["obs"]),
            act=FeatureMap.from_dict(d["act"]),
            discrete=d["discrete"],
            num_actions=d["num_actions"],
            num_obs=d["num_obs"],
        )


@dataclass
class FeatureBlocks:
    """Column-aligned feature matrices, one column per window sample."""

    hist: np.ndarray
    test_act: np.ndarray
    test_obs: np.ndarray
    shifted_act: np.ndarray
    shifted_obs: np.ndarray
    act1: np.ndarray
    obs1: np.ndarray
    returns: np.ndarray
    risks: np.ndarray

    @property
    def count(self) -> int:
        return self.hist.shape[1]


def featurize_windows(samples, maps: FeatureMapSet) -> FeatureBlocks:
    """Embed every block of every sample; matrices share column order."""
    hist_in = [maps.history_input(s.history) for s in samples]
    ta_in = [maps.block_input(s.test_actions) for s in samples]
    to_in = [maps.block_input(s.test_observations) for s in samples]
    sa_in = [maps.block_input(s.shifted_actions) for s in samples]
    so_in = [maps.block_input(s.shifted_observations) for s in samples]
    a1_in = [maps.step_input(s.one_step[0]) for s in samples]
    o1_in = [maps.step_input(s.one_step[1]) for s in samples]
    n_risk = len(samples[0].extended_risks) if samples else 0
    return FeatureBlocks(
        hist=maps.history.embed_many(hist_in),
        test_act=maps.act_block.embed_many(ta_in),
        test_obs=maps.obs_block.embed_many(to_in),
        shifted_act=maps.act_block.embed_many(sa_in),
        shifted_obs=maps.obs_block.embed_many(so_in),
        act1=maps.act.embed_many(a1_in),
        obs1=maps.obs.embed_many(o1_in),
        returns=np.array([s.extended_return for s in samples], dtype=float),
        risks=np.array([s.extended_risks for s in samples], dtype=float).reshape(len(samples), n_risk).T,
    )


def split_dataset(samples, holdout_fraction: float, seed: int) -> DatasetSplit:
    """Disjoint train/held-out partition, reproducible from the seed."""
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_hold = int(round(holdout_fraction * len(samples)))
    hold_idx = set(order[:n_hold].tolist())
    train = tuple(s for i, s in enumerate(samples) if i not in hold_idx)
    heldout = tuple(s for i, s in enumerate(samples) if i in hold_idx)
    return DatasetSplit(train=train, heldout=heldout, seed=seed)


def _format_value(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ";".join(repr(float(x)) for x in np.asarray(v).reshape(-1)) + "]"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse_value(s: str):
    s = s.strip()
    if s.startswith("[") and s.endswith("]"):
        body = s[1:-1]
        return np.array([float(x) for x in body.split(";")]) if body else np.array([])
    try:
        return int(s)
    except ValueError:
        return float(s)


def save_trajectories(path, trajectories, n_risks: int, config_hash: str = "none",
                      tool_version: str = "0"):
    """Write the line-record format with metadata comment lines up front."""
    risk_cols = [f"risk_{i + 1}" for i in range(n_risks)]
    header = ",".join(["episode", "t", "action", "observation", "reward"] + risk_cols)
    lines = [f"# kpsr-trajectories v1", f"# config_hash={config_hash}",
             f"# tool_version={tool_version}", header]
    for traj in trajectories:
        for t, s in enumerate(traj.steps):
            fields = [str(traj.episode_id), str(t), _format_value(s.action),
                      _format_value(s.observation), repr(float(s.reward))]
            fields += [repr(float(r)) for r in s.risks]
            lines.append(",".join(fields))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _split_csv_line(line: str) -> list:
    """Split on commas not inside a [...] vector literal."""
    out, buf, depth = [], [], 0
    for ch in line:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    out.append("".join(buf))
    return out


def load_trajectories(path) -> list:
    """Parse the line-record format into Trajectories grouped by episode."""
    episodes: dict = {}
    n_risks = None
    header_seen = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                cols = line.split(",")
                if cols[:5] != ["episode", "t", "action", "observation", "reward"]:
                    raise DataFormatError(f"line {lineno}: unexpected header {line!r}")
                n_risks = len(cols) - 5
                header_seen = True
                continue
            fields = _split_csv_line(line)
            if len(fields) != 5 + n_risks:
                raise DataFormatError(
                    f"line {lineno}: expected {5 + n_risks} fields, got {len(fields)}")
            try:
                ep = int(fields[0])
                t = int(fields[1])
                action = _parse_value(fields[2])
                obs = _parse_value(fields[3])
                reward = float(fields[4])
                risks = tuple(float(x) for x in fields[5:])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from exc
            episodes.setdefault(ep, []).append((t, StepRecord(action, obs, reward, risks)))
    if not header_seen:
        if n_risks is None and _file_is_empty(path):
            return []
        raise DataFormatError("missing header row")
    out = []
    for ep in sorted(episodes):
        rows = sorted(episodes[ep], key=lambda r: r[0])
        out.append(Trajectory(episode_id=ep, steps=[r[1] for r in rows]))
    return out


def load_trajectory_metadata(path) -> dict:
    """Read the leading comment lines (config hash, tool version)."""
    meta = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line.startswith("#"):
                break
            if "=" in line:
                key, _, val = line.lstrip("# ").partition("=")
                meta[key.strip()] = val.strip()
    return meta


def _file_is_empty(path) -> bool:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read().strip() == ""
