"""Task names, transitions, replay storage and dual-domain batch sampling."""
from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import EmptyBuffer, InvalidShiftLevel, UnknownFamily, UnknownShiftType

# ---------------------------------------------------------------------------
# task-name grammar: family-shifttype[-part]-level
# ---------------------------------------------------------------------------

DESK_FAMILIES = ("pointmass", "reacher", "pointmaze")
LOCOMOTION_FAMILIES = ("ant", "halfcheetah", "hopper", "walker2d")
ADROIT_FAMILIES = ("pen", "door", "relocate", "hammer")
MAZE_FAMILIES = ("antmaze",)
FAMILIES = DESK_FAMILIES + LOCOMOTION_FAMILIES + ADROIT_FAMILIES + MAZE_FAMILIES

SHIFT_TYPES = ("friction", "gravity", "kinematic", "morph", "layout", "broken-joint", "shrink-finger")

SCALE_LEVELS = ("0.1", "0.5", "2.0", "5.0")
IDENTITY_LEVEL = "1.0"
GRADED_LEVELS = ("easy", "medium", "hard")

SMALL_LAYOUTS = ("empty", "centerblock", "lshape", "zshape", "reversel", "reverseu")
NUMBERED_LAYOUTS = ("1", "2", "3", "4", "5", "6")
MAZE_SIZES = ("small", "medium", "large")
# the desk maze trains on a fixed base map and is evaluated on the small-maze layouts
BASE_LAYOUT = "umaze"
LAYOUT_LEVELS = (BASE_LAYOUT,) + SMALL_LAYOUTS + NUMBERED_LAYOUTS

_SCALED = ("friction", "gravity")
_GRADED = ("kinematic", "morph", "broken-joint", "shrink-finger")


@dataclass(frozen=True)
class TaskId:
    env_family: str
    shift_type: str
    shift_part: Optional[str]
    shift_level: Union[str, float]

    @property
    def name(self) -> str:
        return format_task_name(self)

    @property
    def is_identity(self) -> bool:
        return self.shift_level == 1.0


def _split_shift_type(tokens: list[str]) -> tuple[str, list[str]]:
    joined2 = "-".join(tokens[:2])
    if joined2 in SHIFT_TYPES:
        return joined2, tokens[2:]
    return tokens[0], tokens[1:]


def parse_task_name(name: str) -> TaskId:
    tokens = name.split("-")
    family = tokens[0]
    if family not in FAMILIES:
        raise UnknownFamily(f"unknown environment family {family!r} in {name!r}")
    rest = tokens[1:]
    if not rest:
        raise UnknownShiftType(f"missing shift type in {name!r}")

    if family == "antmaze":
        # antmaze-{size}-{layout}: the size plays the role of the shift part
        if rest[0] not in MAZE_SIZES:
            raise UnknownShiftType(f"unknown maze size {rest[0]!r} in {name!r}")
        if len(rest) != 2:
            raise InvalidShiftLevel(f"expected one layout token after {rest[0]!r} in {name!r}")
        size, layout = rest
        allowed = SMALL_LAYOUTS if size == "small" else NUMBERED_LAYOUTS
        if layout not in allowed:
            raise InvalidShiftLevel(f"invalid layout {layout!r} for {size} maze in {name!r}")
        return TaskId(family, "layout", size, layout)

    shift_type, rest = _split_shift_type(rest)
    if shift_type not in SHIFT_TYPES:
        raise UnknownShiftType(f"unknown shift type {shift_type!r} in {name!r}")
    if len(rest) == 1:
        part, level = None, rest[0]
    elif len(rest) == 2:
        part, level = rest
        if not part:
            raise InvalidShiftLevel(f"empty shift part in {name!r}")
    else:
        raise InvalidShiftLevel(f"cannot split level from {'-'.join(rest)!r} in {name!r}")

    if shift_type in _SCALED:
        if level not in SCALE_LEVELS + (IDENTITY_LEVEL,):
            raise InvalidShiftLevel(f"invalid {shift_type} level {level!r} in {name!r}")
        return TaskId(family, shift_type, part, float(level))
    if shift_type in _GRADED:
        if level not in GRADED_LEVELS:
            raise InvalidShiftLevel(f"invalid {shift_type} level {level!r} in {name!r}")
        return TaskId(family, shift_type, part, level)
    if level not in LAYOUT_LEVELS:
        raise InvalidShiftLevel(f"invalid layout level {level!r} in {name!r}")
    return TaskId(family, shift_type, part, level)


def format_task_name(task: TaskId) -> str:
    level = task.shift_level
    level_tok = repr(float(level)) if isinstance(level, (int, float)) else str(level)
    if task.env_family == "antmaze":
        return f"antmaze-{task.shift_part}-{level_tok}"
    parts = [task.env_family, task.shift_type]
    if task.shift_part:
        parts.append(task.shift_part)
    parts.append(level_tok)
    return "-".join(parts)


# parts each family exposes for kinematic / morphology shifts
KINEMATIC_PARTS = {
    "ant": ("hipjnt", "anklejnt"),
    "halfcheetah": ("footjnt", "thighjnt"),
    "hopper": ("footjnt", "legjnt"),
    "walker2d": ("footjnt", "thighjnt"),
    "pointmass": ("xaxis", "yaxis"),
    "reacher": ("shoulder", "elbow"),
}
MORPH_PARTS = {
    "ant": ("halflegs", "alllegs"),
    "halfcheetah": ("thigh", "torso"),
    "hopper": ("foot", "torso"),
    "walker2d": ("leg", "torso"),
    "reacher": ("upperarm", "forearm"),
}


def locomotion_task_names() -> list[str]:
    names = []
    for fam in LOCOMOTION_FAMILIES:
        for kind in _SCALED:
            names += [f"{fam}-{kind}-{lvl}" for lvl in SCALE_LEVELS]
        for part in KINEMATIC_PARTS[fam]:
            names += [f"{fam}-kinematic-{part}-{lvl}" for lvl in GRADED_LEVELS]
        for part in MORPH_PARTS[fam]:
            names += [f"{fam}-morph-{part}-{lvl}" for lvl in GRADED_LEVELS]
    return names


def antmaze_task_names() -> list[str]:
    names = [f"antmaze-small-{lay}" for lay in SMALL_LAYOUTS]
    for size in ("medium", "large"):
        names += [f"antmaze-{size}-{lay}" for lay in NUMBERED_LAYOUTS]
    return names


def adroit_task_names() -> list[str]:
    return [
        f"{fam}-{kind}-{lvl}"
        for fam in ADROIT_FAMILIES
        for kind in ("broken-joint", "shrink-finger")
        for lvl in GRADED_LEVELS
    ]


def desk_task_names() -> list[str]:
    names = []
    for kind in _SCALED:
        names += [f"pointmass-{kind}-{lvl}" for lvl in SCALE_LEVELS]
    for part in KINEMATIC_PARTS["pointmass"]:
        names += [f"pointmass-kinematic-{part}-{lvl}" for lvl in GRADED_LEVELS]
    names += [f"reacher-friction-{lvl}" for lvl in SCALE_LEVELS]
    for part in KINEMATIC_PARTS["reacher"]:
        names += [f"reacher-kinematic-{part}-{lvl}" for lvl in GRADED_LEVELS]
    for part in MORPH_PARTS["reacher"]:
        names += [f"reacher-morph-{part}-{lvl}" for lvl in GRADED_LEVELS]
    names += [f"pointmaze-layout-{lay}" for lay in SMALL_LAYOUTS]
    return names


def list_tasks() -> list[str]:
    """Every registered task name: the MuJoCo-family tables followed by the desk analogs."""
    return locomotion_task_names() + antmaze_task_names() + adroit_task_names() + desk_task_names()


# ---------------------------------------------------------------------------
# transitions and replay storage
# ---------------------------------------------------------------------------


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"

    @property
    def other(self) -> "Domain":
        return Domain.TARGET if self is Domain.SOURCE else Domain.SOURCE


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    domain: Domain


@dataclass
class TransitionBatch:
    """Column-major view of a set of transitions from one domain."""

    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    domain: Domain

    def __len__(self) -> int:
        return len(self.rew)

    def transitions(self) -> list[Transition]:
        return [
            Transition(self.obs[i], self.act[i], float(self.rew[i]), self.next_obs[i], bool(self.done[i]), self.domain)
            for i in range(len(self))
        ]


@dataclass
class DualBatch:
    src: TransitionBatch
    tar: TransitionBatch


class ReplayBuffer:
    """FIFO ring buffer of transitions for a single domain."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = 1_000_000, domain: Domain = Domain.SOURCE):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.capacity = int(capacity)
        self.domain = Domain(domain)
        self.obs = np.zeros((self.capacity, obs_dim), dtype=np.float32)
        self.act = np.zeros((self.capacity, act_dim), dtype=np.float32)
        self.rew = np.zeros(self.capacity, dtype=np.float32)
        self.next_obs = np.zeros((self.capacity, obs_dim), dtype=np.float32)
        self.done = np.zeros(self.capacity, dtype=bool)
        self._ptr = 0
        self.size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, act, rew: float, next_obs, done: bool) -> None:
        act = np.asarray(act, dtype=np.float32)
        if np.any(np.abs(act) > 1.0):
            raise ValueError("actions must lie in [-1, 1]")
        i = self._ptr
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.next_obs[i] = next_obs
        self.done[i] = done
        self._ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def add_transition(self, t: Transition) -> None:
        self.add(t.state, t.action, t.reward, t.next_state, t.done)

    def add_batch(self, obs, act, rew, next_obs, done) -> None:
        for row in zip(obs, act, rew, next_obs, done):
            self.add(*row)

    def _order(self) -> np.ndarray:
        # storage indices from oldest to newest
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._ptr) % self.capacity

    def contents(self) -> TransitionBatch:
        idx = self._order()
        return self.gather(idx)

    def gather(self, idx: np.ndarray) -> TransitionBatch:
        return TransitionBatch(
            self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx], self.domain
        )

    def sample(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        if self.size == 0:
            raise EmptyBuffer(self.domain.value)
        idx = rng.integers(0, self.size, size=n)
        return self.gather(idx)

    @classmethod
    def from_batch(cls, batch: TransitionBatch, capacity: Optional[int] = None) -> "ReplayBuffer":
        n = len(batch)
        buf = cls(batch.obs.shape[1], batch.act.shape[1], capacity or max(n, 1), batch.domain)
        buf.obs[:n] = batch.obs
        buf.act[:n] = batch.act
        buf.rew[:n] = batch.rew
        buf.next_obs[:n] = batch.next_obs
        buf.done[:n] = batch.done
        buf.size = n
        buf.total_added = n
        buf._ptr = n % buf.capacity
        return buf


def sample_symmetric(
    src: ReplayBuffer, tar: ReplayBuffer, n_src: int, n_tar: int, rng: np.random.Generator
) -> DualBatch:
    """Draw n_src source and n_tar target transitions uniformly with replacement."""
    if n_src > 0 and len(src) == 0:
        raise EmptyBuffer(Domain.SOURCE.value)
    if n_tar > 0 and len(tar) == 0:
        raise EmptyBuffer(Domain.TARGET.value)
    s = src.sample(n_src, rng) if n_src > 0 else src.gather(np.zeros(0, dtype=np.int64))
    t = tar.sample(n_tar, rng) if n_tar > 0 else tar.gather(np.zeros(0, dtype=np.int64))
    s.domain = Domain.SOURCE
    t.domain = Domain.TARGET
    return DualBatch(s, t)


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

STREAMS = ("init", "env_source", "env_target", "sampler", "eval", "noise", "data")


@dataclass
class RngStreams:
    seed: int
    streams: dict

    def __getitem__(self, key: str) -> np.random.Generator:
        return self.streams[key]

    def child_seed(self, key: str) -> int:
        """Stable 63-bit integer derived from the base seed and a stream name."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(_stream_key(key),))
        return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def _stream_key(name: str) -> int:
    # stable across processes, unlike hash()
    return zlib.crc32(name.encode())


def seed_everything(seed: int, deterministic: bool = True) -> RngStreams:
    """Create independent named RNG streams and pin torch to deterministic kernels."""
    import torch

    streams = {
        name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_stream_key(name),)))
        for name in STREAMS
    }
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return RngStreams(seed, streams)
