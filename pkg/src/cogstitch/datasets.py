"""
Transition storage for the prior and task datasets and the online buffer.

Two on-disk forms exist. JSON-lines is the interchange format: a header line
with the dataset meta, then one transition per line; the first line of a
trajectory may carry its origin (initial condition and reset seed) so the
episode can be replayed from a fresh reset. The binary mirror holds the
same content as fixed-stride little-endian float64 records behind a JSON header and
ends with a CRC32 of everything before it.
"""

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .envs import ACT_DIM, OBS_LAYOUT_VERSION, GridAction, GridState
from .errors import ContractError, DatasetError

logger = logging.getLogger("cogstitch.datasets")

FORMAT_VERSION = 1
BINARY_MAGIC = b"COGDS001"


@dataclass(frozen=True, eq=False)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray

    def __post_init__(self) -> None:
        if self.obs.shape != self.next_obs.shape or self.obs.ndim != 1:
            raise ContractError(f"obs {self.obs.shape} and next_obs {self.next_obs.shape} must be equal-length vectors")
        if self.action.shape != (ACT_DIM,):
            raise ContractError(f"action must have {ACT_DIM} entries, got {self.action.shape}")
        if self.reward not in (0.0, 1.0):
            raise ContractError(f"reward must be 0 or 1, got {self.reward}")


@dataclass
class DatasetMeta:
    env: str
    obs_dim: int
    act_dim: int = ACT_DIM
    reward_labeled: bool = True
    seed: int | None = None
    layout: int = OBS_LAYOUT_VERSION

    def header(self) -> dict[str, object]:
        return {"v": FORMAT_VERSION, **asdict(self)}

    @classmethod
    def from_header(cls, header: dict[str, object], where: str) -> "DatasetMeta":
        if header.get("v") != FORMAT_VERSION:
            raise DatasetError(f"{where}: unsupported dataset version {header.get('v')!r} (expected {FORMAT_VERSION})")
        try:
            return cls(
                env=str(header["env"]),
                obs_dim=int(header["obs_dim"]),  # type: ignore[call-overload]
                act_dim=int(header.get("act_dim", ACT_DIM)),  # type: ignore[call-overload]
                reward_labeled=bool(header["reward_labeled"]),
                seed=None if header.get("seed") is None else int(header["seed"]),  # type: ignore[call-overload]
                layout=int(header.get("layout", OBS_LAYOUT_VERSION)),  # type: ignore[call-overload]
            )
        except (KeyError, TypeError, ValueError) as ex:
            raise DatasetError(f"{where}: malformed header ({ex})") from ex

    def compatible(self, other: "DatasetMeta") -> bool:
        return (self.env, self.obs_dim, self.act_dim, self.layout) == (other.env, other.obs_dim, other.act_dim, other.layout)


class Batch(NamedTuple):
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class EpisodeOrigin(NamedTuple):
    "Where a stored trajectory came from: its initial condition and the seed its reset drew from."

    condition: str
    reset_seed: int

    def as_json(self) -> dict[str, object]:
        return {"cond": self.condition, "reset_seed": self.reset_seed}

    @classmethod
    def from_json(cls, values: object) -> "EpisodeOrigin | None":
        if values is None:
            return None
        if not isinstance(values, dict):
            raise TypeError(f"origin must be an object, got {values!r}")
        return cls(str(values["cond"]), int(values["reset_seed"]))


class Dataset:
    """
    Ordered transitions with trajectory boundaries.

    Storage is a set of preallocated arrays grown by doubling, so appending
    online episodes stays cheap.
    """

    def __init__(self, meta: DatasetMeta, capacity: int = 1024) -> None:
        self.meta = meta
        capacity = max(1, capacity)
        self._obs = np.zeros((capacity, meta.obs_dim))
        self._actions = np.zeros((capacity, meta.act_dim))
        self._rewards = np.zeros(capacity)
        self._next_obs = np.zeros((capacity, meta.obs_dim))
        self._size = 0
        self.trajectory_starts: list[int] = []
        self.origins: list[EpisodeOrigin | None] = []

    def __len__(self) -> int:
        return self._size

    def __repr__(self) -> str:
        return f"Dataset(env={self.meta.env!r}, transitions={self._size}, trajectories={self.num_trajectories})"

    @property
    def obs(self) -> np.ndarray:
        return self._obs[: self._size]

    @property
    def actions(self) -> np.ndarray:
        return self._actions[: self._size]

    @property
    def rewards(self) -> np.ndarray:
        return self._rewards[: self._size]

    @property
    def next_obs(self) -> np.ndarray:
        return self._next_obs[: self._size]

    @property
    def num_trajectories(self) -> int:
        return len(self.trajectory_starts)

    def transition(self, index: int) -> Transition:
        return Transition(self._obs[index].copy(), self._actions[index].copy(), float(self._rewards[index]), self._next_obs[index].copy())

    def __iter__(self) -> Iterator[Transition]:
        return (self.transition(i) for i in range(self._size))

    def trajectory_bounds(self) -> list[tuple[int, int]]:
        ends = self.trajectory_starts[1:] + [self._size]
        return list(zip(self.trajectory_starts, ends))

    def trajectory(self, index: int) -> list[Transition]:
        start, end = self.trajectory_bounds()[index]
        return [self.transition(i) for i in range(start, end)]

    def _reserve(self, extra: int) -> None:
        needed = self._size + extra
        if needed <= len(self._rewards):
            return
        capacity = max(needed, 2 * len(self._rewards))
        for name in ("_obs", "_actions", "_next_obs"):
            old = getattr(self, name)
            grown = np.zeros((capacity, old.shape[1]))
            grown[: self._size] = old[: self._size]
            setattr(self, name, grown)
        rewards = np.zeros(capacity)
        rewards[: self._size] = self._rewards[: self._size]
        self._rewards = rewards

    def append(self, trajectory: Sequence[Transition], origin: EpisodeOrigin | None = None) -> "Dataset":
        "Append one trajectory in place and record its boundary and, when known, its origin."
        if not trajectory:
            raise ContractError("cannot append an empty trajectory")
        for t in trajectory:
            if t.obs.shape != (self.meta.obs_dim,) or t.action.shape != (self.meta.act_dim,):
                raise ContractError(f"transition layout {t.obs.shape}/{t.action.shape} does not match dataset ({self.meta.obs_dim}, {self.meta.act_dim})")
            if not self.meta.reward_labeled and t.reward != 0.0:
                raise ContractError("reward-free dataset only accepts zero rewards")
        self._reserve(len(trajectory))
        start = self._size
        for offset, t in enumerate(trajectory):
            i = start + offset
            self._obs[i] = t.obs
            self._actions[i] = t.action
            self._rewards[i] = t.reward
            self._next_obs[i] = t.next_obs
        self._size += len(trajectory)
        self.trajectory_starts.append(start)
        self.origins.append(origin)
        return self

    def _append_arrays(
        self,
        obs: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        next_obs: np.ndarray,
        starts: Sequence[int],
        origins: Sequence[EpisodeOrigin | None] | None = None,
    ) -> None:
        if origins is not None and len(origins) != len(starts):
            raise ContractError(f"{len(origins)} origins for {len(starts)} trajectories")
        self._reserve(len(rewards))
        offset = self._size
        end = offset + len(rewards)
        self._obs[offset:end] = obs
        self._actions[offset:end] = actions
        self._rewards[offset:end] = rewards
        self._next_obs[offset:end] = next_obs
        self.trajectory_starts.extend(offset + s for s in starts)
        self.origins.extend(origins if origins is not None else [None] * len(starts))
        self._size = end

    def copy(self) -> "Dataset":
        twin = Dataset(DatasetMeta(**asdict(self.meta)), capacity=len(self))
        twin._append_arrays(self.obs, self.actions, self.rewards, self.next_obs, self.trajectory_starts, self.origins)
        return twin

    def relabeled(self, reward_labeled: bool) -> "Dataset":
        "Copy with the reward-labeled flag changed; dropping labels zeroes every reward."
        twin = self.copy()
        twin.meta.reward_labeled = reward_labeled
        if not reward_labeled:
            twin._rewards[:] = 0.0
        return twin

    def success_count(self) -> int:
        return sum(1 for start, end in self.trajectory_bounds() if np.any(self._rewards[start:end] > 0))


def from_trajectories(meta: DatasetMeta, trajectories: Sequence[Sequence[Transition]]) -> Dataset:
    ds = Dataset(meta, capacity=sum(len(t) for t in trajectories))
    for trajectory in trajectories:
        ds.append(trajectory)
    return ds


def filter_successful(ds: Dataset) -> Dataset:
    "Trajectories that contain at least one rewarded transition."
    if not ds.meta.reward_labeled:
        raise ContractError("filter_successful needs a reward-labeled dataset")
    kept = Dataset(DatasetMeta(**asdict(ds.meta)))
    for (start, end), origin in zip(ds.trajectory_bounds(), ds.origins):
        if np.any(ds.rewards[start:end] > 0):
            kept._append_arrays(ds.obs[start:end], ds.actions[start:end], ds.rewards[start:end], ds.next_obs[start:end], [0], [origin])
    logger.debug("kept %d of %d trajectories", kept.num_trajectories, ds.num_trajectories)
    return kept


def sample_batch(union: Sequence[Dataset], batch_size: int, rng: np.random.Generator) -> Batch:
    "Uniform draw with replacement over the concatenation of all datasets."
    sizes = np.array([len(ds) for ds in union], dtype=np.int64)
    total = int(sizes.sum()) if len(sizes) else 0
    if total == 0:
        raise ContractError("cannot sample from an empty dataset union")
    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    dims = {(ds.meta.obs_dim, ds.meta.act_dim) for ds in union if len(ds)}
    if len(dims) != 1:
        raise ContractError(f"datasets in a union must share their layout, got {sorted(dims)}")
    flat = rng.integers(0, total, size=batch_size)
    ends = np.cumsum(sizes)
    which = np.searchsorted(ends, flat, side="right")
    local = flat - (ends[which] - sizes[which])
    parts: list[list[np.ndarray]] = [[], [], [], []]
    order = np.empty(batch_size, dtype=np.int64)
    cursor = 0
    for d, ds in enumerate(union):
        mask = which == d
        if not mask.any():
            continue
        idx = local[mask]
        parts[0].append(ds.obs[idx])
        parts[1].append(ds.actions[idx])
        parts[2].append(ds.rewards[idx])
        parts[3].append(ds.next_obs[idx])
        positions = np.flatnonzero(mask)
        order[positions] = np.arange(cursor, cursor + len(positions))
        cursor += len(positions)
    obs, actions, rewards, next_obs = (np.concatenate(p)[order] for p in parts)
    return Batch(obs, actions, rewards, next_obs)


# JSON lines


def save_jsonl(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    traj_of = np.zeros(len(ds), dtype=np.int64)
    origin_at: dict[int, EpisodeOrigin] = {}
    for j, (start, end) in enumerate(ds.trajectory_bounds()):
        traj_of[start:end] = j
        if (origin := ds.origins[j]) is not None:
            origin_at[start] = origin
    with open(path, "w") as f:
        f.write(json.dumps(ds.meta.header()) + "\n")
        for k in range(len(ds)):
            line = {
                "t": k,
                "traj": int(traj_of[k]),
                "obs": ds.obs[k].tolist(),
                "act": ds.actions[k].tolist(),
                "r": float(ds.rewards[k]),
                "next_obs": ds.next_obs[k].tolist(),
            }
            if k in origin_at:
                line["origin"] = origin_at[k].as_json()
            f.write(json.dumps(line) + "\n")
    logger.info("wrote %d transitions (%d trajectories) to %s", len(ds), ds.num_trajectories, path)
    return path


def load_jsonl(path: str | Path) -> Dataset:
    path = Path(path)
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file, missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as ex:
        raise DatasetError(f"{path}:1: malformed header ({ex.msg})") from ex
    if not isinstance(header, dict):
        raise DatasetError(f"{path}:1: header must be a JSON object")
    meta = DatasetMeta.from_header(header, f"{path}:1")
    n = len(lines) - 1
    obs = np.zeros((n, meta.obs_dim))
    actions = np.zeros((n, meta.act_dim))
    rewards = np.zeros(n)
    next_obs = np.zeros((n, meta.obs_dim))
    starts: list[int] = []
    origins: list[EpisodeOrigin | None] = []
    last_traj = -1
    for k, raw in enumerate(lines[1:]):
        where = f"{path}:{k + 2}"
        try:
            rec = json.loads(raw)
            t, traj, r = int(rec["t"]), int(rec["traj"]), float(rec["r"])
            obs[k] = rec["obs"]
            actions[k] = rec["act"]
            next_obs[k] = rec["next_obs"]
            origin = EpisodeOrigin.from_json(rec.get("origin"))
        except json.JSONDecodeError as ex:
            raise DatasetError(f"{where}: malformed line ({ex.msg})") from ex
        except (KeyError, TypeError, ValueError) as ex:
            raise DatasetError(f"{where}: malformed transition ({ex})") from ex
        if t != k:
            raise DatasetError(f"{where}: expected transition index {k}, found {t}")
        if traj != last_traj:
            if traj != last_traj + 1:
                raise DatasetError(f"{where}: trajectory index jumps from {last_traj} to {traj}")
            starts.append(k)
            origins.append(origin)
            last_traj = traj
        if r not in (0.0, 1.0):
            raise DatasetError(f"{where}: reward must be 0 or 1, found {r}")
        if not meta.reward_labeled and r != 0.0:
            raise DatasetError(f"{where}: nonzero reward in a reward-free dataset")
        rewards[k] = r
    ds = Dataset(meta, capacity=n)
    ds._append_arrays(obs, actions, rewards, next_obs, starts, origins)
    return ds


# binary mirror


def _record_width(meta: DatasetMeta) -> int:
    return 2 * meta.obs_dim + meta.act_dim + 1


def save_binary(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({**ds.meta.header(), "size": len(ds), "trajectory_starts": ds.trajectory_starts, "origins": [None if o is None else o.as_json() for o in ds.origins]}).encode()
    records = np.concatenate([ds.obs, ds.actions, ds.rewards[:, None], ds.next_obs], axis=1) if len(ds) else np.zeros((0, _record_width(ds.meta)))
    payload = BINARY_MAGIC + struct.pack("<I", len(header)) + header + records.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))
    logger.info("wrote %d transitions to %s", len(ds), path)
    return path


def load_binary(path: str | Path) -> Dataset:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise DatasetError(f"{path}: bad magic at offset 0")
    if len(blob) < len(BINARY_MAGIC) + 8:
        raise DatasetError(f"{path}: truncated at offset {len(blob)}")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise DatasetError(f"{path}: checksum mismatch over bytes 0..{len(payload)}")
    offset = len(BINARY_MAGIC)
    (header_len,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    if offset + header_len > len(payload):
        raise DatasetError(f"{path}: truncated header at offset {offset}")
    try:
        header = json.loads(payload[offset : offset + header_len])
        size = int(header["size"])
        starts = [int(s) for s in header["trajectory_starts"]]
        origins = [EpisodeOrigin.from_json(o) for o in header.get("origins", [None] * len(starts))]
        if len(origins) != len(starts):
            raise ValueError(f"{len(origins)} origins for {len(starts)} trajectories")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as ex:
        raise DatasetError(f"{path}: malformed header at offset {offset}") from ex
    meta = DatasetMeta.from_header(header, str(path))
    offset += header_len
    width = _record_width(meta)
    expected = size * width * 8
    if len(payload) - offset != expected:
        raise DatasetError(f"{path}: expected {expected} record bytes at offset {offset}, found {len(payload) - offset}")
    if size:
        records = np.frombuffer(payload, dtype="<f8", count=size * width, offset=offset).reshape(size, width).astype(np.float64)
    else:
        records = np.zeros((0, width))
    d = meta.obs_dim
    rewards = records[:, d + meta.act_dim]
    if not meta.reward_labeled and np.any(rewards != 0.0):
        raise DatasetError(f"{path}: nonzero reward in a reward-free dataset")
    ds = Dataset(meta, capacity=size)
    ds._append_arrays(records[:, :d], records[:, d : d + meta.act_dim], rewards, records[:, d + meta.act_dim + 1 :], starts, origins)
    return ds


def save(ds: Dataset, path: str | Path) -> Path:
    return save_binary(ds, path) if Path(path).suffix == ".bin" else save_jsonl(ds, path)


def load(path: str | Path) -> Dataset:
    try:
        return load_binary(path) if Path(path).suffix == ".bin" else load_jsonl(path)
    except FileNotFoundError as ex:
        raise DatasetError(f"{path}: no such dataset") from ex


# gridworld transitions for the tabular solver


class GridTransition(NamedTuple):
    state: GridState
    action: GridAction
    reward: float
    next_state: GridState


@dataclass
class GridDataset:
    transitions: list[GridTransition] = field(default_factory=list)
    reward_labeled: bool = True

    def __len__(self) -> int:
        return len(self.transitions)

    def extend(self, episode: Sequence[GridTransition]) -> "GridDataset":
        if not self.reward_labeled:
            episode = [t._replace(reward=0.0) for t in episode]
        self.transitions.extend(episode)
        return self
