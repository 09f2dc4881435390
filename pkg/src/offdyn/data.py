"""Offline datasets: collection at fixed quality tiers, a checksummed binary file format, and a manifest."""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .core import Domain, TaskId, TransitionBatch, format_task_name, parse_task_name
from .envs.dynamics import EnvState, is_terminal, reset, step
from .envs.experts import random_policy
from .envs.params import EnvParams, base_params, make_env
from .envs.references import expert_policy, reference_entry, reference_returns
from .errors import CorruptFile, NoSuccess, OffDynError, SchemaMismatch

MAGIC = b"ODDS"
VERSION = 1
QUALITIES = ("random", "medium", "expert", "mixed", "medium-replay", "medium-expert", "full-replay")
DEFAULT_QUALITIES = ("random", "medium", "medium-replay", "expert")
TARGET_CAP = {"pointmass": 5000, "reacher": 5000, "pointmaze": 10000}
MEDIUM_BAND = (0.30, 0.60)
ARRAYS = ("observations", "actions", "rewards", "next_observations", "terminals", "timeouts")
_DTYPES = {"f4": np.dtype("<f4"), "b1": np.dtype("bool")}

Policy = Callable[[np.ndarray], np.ndarray]


class MediumBandMissed(OffDynError, RuntimeError):
    """Training never produced a policy inside the medium return band."""


@dataclass
class OfflineDataset:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    terminals: np.ndarray
    timeouts: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rewards)
        for name in ARRAYS:
            if len(getattr(self, name)) != n:
                raise SchemaMismatch(f"array {name!r} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def domain(self) -> Domain:
        return Domain(self.meta.get("domain", Domain.TARGET.value))

    def to_batch(self) -> TransitionBatch:
        """Transitions for a replay buffer; only true terminations stop bootstrapping."""
        return TransitionBatch(self.observations, self.actions, self.rewards, self.next_observations,
                               self.terminals.astype(np.float32), self.domain)

    def episode_returns(self) -> list:
        """Undiscounted returns of the complete episodes (a trailing partial episode is dropped)."""
        ends = np.flatnonzero(self.terminals | self.timeouts)
        out, start = [], 0
        for e in ends:
            out.append(float(np.sum(self.rewards[start:e + 1], dtype=np.float64)))
            start = e + 1
        return out

    def episode_successes(self) -> list:
        ends = np.flatnonzero(self.terminals | self.timeouts)
        return [bool(self.terminals[e]) for e in ends]


# -- collection -------------------------------------------------------------


def collect_dataset(params: EnvParams, policy: Policy, n: int, quality: str, rng: np.random.Generator,
                    meta: Optional[dict] = None) -> OfflineDataset:
    """Roll out ``policy`` for full episodes until exactly ``n`` transitions; the last episode is cut short."""
    if quality not in QUALITIES:
        raise ValueError(f"unknown quality {quality!r}")
    obs = np.empty((n, params.obs_dim), np.float32)
    act = np.empty((n, params.act_dim), np.float32)
    rew = np.empty(n, np.float32)
    nxt = np.empty((n, params.obs_dim), np.float32)
    term = np.zeros(n, bool)
    tout = np.zeros(n, bool)
    i = 0
    while i < n:
        s = reset(params, rng)
        done = False
        while not done and i < n:
            a = np.clip(np.asarray(policy(s.obs), dtype=np.float32), -1.0, 1.0)
            s2, r, done = step(params, s, a)
            obs[i], act[i], rew[i], nxt[i] = s.obs, a, r, s2.obs
            term[i] = is_terminal(params, s2)
            tout[i] = done and not term[i]
            s = s2
            i += 1
    info = {"quality": quality, "n": n}
    info.update(meta or {})
    return OfflineDataset(obs, act, rew, nxt, term, tout, info)


def _domain_params(task: Union[str, TaskId], domain: Domain) -> EnvParams:
    tid = parse_task_name(task) if isinstance(task, str) else task
    return make_env(tid) if domain == Domain.TARGET else base_params(tid.env_family)


def _reference_key(task: Union[str, TaskId], domain: Domain) -> str:
    """Registry entry whose environment is the requested domain: the identity shift stands in for the source."""
    tid = parse_task_name(task) if isinstance(task, str) else task
    if domain == Domain.TARGET:
        return format_task_name(tid)
    return {"pointmass": "pointmass-friction-1.0", "reacher": "reacher-friction-1.0",
            "pointmaze": "pointmaze-layout-umaze"}[tid.env_family]


def medium_band(j_r: float, j_e: float, band: tuple = MEDIUM_BAND) -> tuple[float, float]:
    return j_r + band[0] * (j_e - j_r), j_r + band[1] * (j_e - j_r)


def _stochastic(agent) -> Policy:
    return lambda o: agent.act(o, deterministic=False)


def train_medium_policy(params: EnvParams, j_r: float, j_e: float, seed: int, max_steps: int = 60_000,
                        eval_every: int = 200, eval_episodes: int = 5, hidden: tuple = (64, 64)):
    """Early-stopped SAC: train until the stochastic policy's mean return lies in the medium band.

    Returns (agent, replay contents up to the stopping point, environment steps used).
    """
    import torch

    from .agents import AgentConfig, SAC
    from .approx import TorchBatch
    from .core import ReplayBuffer

    lo, hi = medium_band(j_r, j_e)
    rng = np.random.default_rng(seed)
    eval_rng = np.random.default_rng(seed + 1)
    cfg = AgentConfig(hidden=hidden)
    agent = SAC(params.obs_dim, params.act_dim, cfg, seed=seed)
    buf = ReplayBuffer(params.obs_dim, params.act_dim, max_steps, Domain.TARGET)
    empty = TorchBatch(*(torch.zeros((0,) + shape) for shape in
                         ((params.obs_dim,), (params.act_dim,), (), (params.obs_dim,), ())))
    s = reset(params, rng)
    for t in range(1, max_steps + 1):
        if t <= cfg.warmup:
            a = rng.uniform(-1, 1, params.act_dim).astype(np.float32)
        else:
            a = agent.act(s.obs)
        s2, r, done = step(params, s, a)
        buf.add(s.obs, a, r, s2.obs, is_terminal(params, s2))
        s = reset(params, rng) if done else s2
        if t > cfg.warmup:
            agent.update({"src": empty, "tar": TorchBatch.from_numpy(buf.sample(cfg.batch_tar, rng))})
        if t % eval_every == 0 and t > cfg.warmup:
            score = float(np.mean([_episode_return(params, _stochastic(agent), eval_rng)
                                   for _ in range(eval_episodes)]))
            if lo <= score <= hi:
                return agent, buf, t
    raise MediumBandMissed(f"no policy in [{lo:.1f}, {hi:.1f}] within {max_steps} steps")


def _episode_return(params: EnvParams, policy: Policy, rng: np.random.Generator) -> float:
    s = reset(params, rng)
    total, done = 0.0, False
    while not done:
        s, r, done = step(params, s, np.clip(policy(s.obs), -1, 1))
        total += r
    return total


def _replay_dataset(buf, n: int, meta: dict) -> OfflineDataset:
    """The latest ``n`` replay transitions, in insertion order."""
    b = buf.contents()
    sl = slice(max(0, len(b) - n), len(b))
    term = np.asarray(b.done[sl], bool)
    tout = np.zeros_like(term)
    return OfflineDataset(b.obs[sl], b.act[sl], b.rew[sl], b.next_obs[sl], term, tout, meta)


def default_size(task: Union[str, TaskId], domain: Domain) -> int:
    tid = parse_task_name(task) if isinstance(task, str) else task
    if domain == Domain.TARGET:
        return TARGET_CAP[tid.env_family]
    return 4 * TARGET_CAP[tid.env_family]


def build_dataset(task: Union[str, TaskId], domain: Domain, quality: str, seed: int = 0,
                  n: Optional[int] = None, attempts: int = 5) -> OfflineDataset:
    """Collect a dataset of one quality tier for the source or target environment of ``task``."""
    tid = parse_task_name(task) if isinstance(task, str) else task
    params = _domain_params(tid, domain)
    n = default_size(tid, domain) if n is None else n
    ref = _reference_key(tid, domain)
    entry = reference_entry(ref)
    meta = {"task_name": format_task_name(tid), "domain": domain.value, "seed": seed}
    rng = np.random.default_rng(seed)
    if quality == "random":
        return collect_dataset(params, random_policy(params, rng), n, quality, rng,
                               dict(meta, collector="uniform-random"))
    if quality == "expert":
        return collect_dataset(params, expert_policy(ref), n, quality, rng,
                               dict(meta, collector=f"pd-expert(kp={entry['kp']},kd={entry['kd']})"))
    if quality == "mixed":
        if tid.env_family != "pointmaze":
            raise ValueError("mixed datasets are defined for the maze family only")
        return collect_mixed_maze(params, expert_policy(ref), n, rng, dict(meta, collector="pd-expert+random"))
    if quality in ("medium", "medium-replay"):
        j_r, j_e = reference_returns(ref)
        lo, hi = medium_band(j_r, j_e)
        for k in range(attempts):
            agent, buf, used = train_medium_policy(params, j_r, j_e, seed + 1000 * k)
            info = dict(meta, collector=f"early-stopped-sac(steps={used})", train_seed=seed + 1000 * k)
            if quality == "medium-replay":
                return _replay_dataset(buf, n, dict(info, quality=quality, n=min(n, len(buf))))
            ds = collect_dataset(params, _stochastic(agent), n, quality, rng, info)
            returns = ds.episode_returns()
            if returns and lo <= float(np.mean(returns)) <= hi:
                return ds
        raise MediumBandMissed(f"medium dataset outside [{lo:.1f}, {hi:.1f}] after {attempts} attempts")
    raise ValueError(f"quality {quality!r} is not generated by this pipeline")


def collect_mixed_maze(params: EnvParams, goal_policy: Policy, n: int, rng: np.random.Generator,
                       meta: Optional[dict] = None, noise: float = 0.5, budget: Optional[int] = None
                       ) -> OfflineDataset:
    """Alternate noisy goal-directed episodes and uniform-random ones until ``n`` transitions.

    Fails with ``NoSuccess`` if not a single episode reached the goal within
    ``budget`` environment steps (default 10n).
    """
    if params.family != "pointmaze":
        raise ValueError("collect_mixed_maze needs a maze environment")
    budget = 10 * n if budget is None else budget
    rand = random_policy(params, rng)
    episode = [0]

    def policy(obs):
        if episode[0] % 2 == 0:
            a = np.asarray(goal_policy(obs), np.float32) + rng.normal(0.0, noise, params.act_dim)
            return a.astype(np.float32)
        return rand(obs)

    steps = 0
    while steps < budget:
        ds = _collect_alternating(params, policy, n, rng, episode)
        steps += n
        ok = ds.episode_successes()
        if any(ok) and not all(ok):
            ds.meta.update({"quality": "mixed", "n": n, "success_fraction": float(np.mean(ok))})
            ds.meta.update(meta or {})
            return ds
    raise NoSuccess(f"no mixed success/failure dataset within {budget} steps")


def _collect_alternating(params, policy, n, rng, episode) -> OfflineDataset:
    ds = None
    obs = np.empty((n, params.obs_dim), np.float32)
    act = np.empty((n, params.act_dim), np.float32)
    rew = np.empty(n, np.float32)
    nxt = np.empty((n, params.obs_dim), np.float32)
    term = np.zeros(n, bool)
    tout = np.zeros(n, bool)
    i = 0
    while i < n:
        s = reset(params, rng)
        done = False
        while not done and i < n:
            a = np.clip(policy(s.obs), -1.0, 1.0).astype(np.float32)
            s2, r, done = step(params, s, a)
            obs[i], act[i], rew[i], nxt[i] = s.obs, a, r, s2.obs
            term[i] = is_terminal(params, s2)
            tout[i] = done and not term[i]
            s = s2
            i += 1
        episode[0] += 1
    ds = OfflineDataset(obs, act, rew, nxt, term, tout, {})
    return ds


def replay_mismatches(ds: OfflineDataset, params: EnvParams) -> int:
    """Re-step every stored (obs, action) through the simulator and count next observations that differ."""
    bad = 0
    for o, a, o2 in zip(ds.observations, ds.actions, ds.next_observations):
        s2, _, _ = step(params, EnvState(tuple(float(x) for x in o), 0), a)
        bad += int(not np.array_equal(s2.obs, o2))
    return bad


def quality_report(datasets: dict) -> dict:
    """Mean episode return per tier and whether random < medium < expert holds."""
    means = {q: float(np.mean(ds.episode_returns())) for q, ds in datasets.items()}
    order = [q for q in ("random", "medium", "expert") if q in means]
    ordered = all(means[a] < means[b] for a, b in zip(order, order[1:]))
    return {"mean_return": means, "monotone": ordered}


# -- file format ------------------------------------------------------------
#
# MAGIC | u32 version | u32 meta length | meta (UTF-8 JSON) | u32 array count |
# per array: u16 name length | name | 2-byte dtype code | u8 ndim | u64 dims... |
#            u64 byte length | u32 crc32 | raw little-endian bytes


def _encode(ds: OfflineDataset) -> bytes:
    out = io.BytesIO()
    meta = json.dumps(ds.meta, sort_keys=True).encode()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(meta)))
    out.write(meta)
    out.write(struct.pack("<I", len(ARRAYS)))
    for name in ARRAYS:
        arr = getattr(ds, name)
        code = "b1" if arr.dtype == bool else "f4"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nm = name.encode()
        out.write(struct.pack("<H", len(nm)) + nm + code.encode() + struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(struct.pack("<QI", len(data), zlib.crc32(data)))
        out.write(data)
    return out.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.raw):
            raise CorruptFile("file is truncated")
        chunk = self.raw[self.pos:self.pos + k]
        self.pos += k
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode(raw: bytes) -> OfflineDataset:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CorruptFile("not an offline dataset file")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise SchemaMismatch(f"unsupported format version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"metadata block unreadable: {e}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode(errors="replace")
        code = r.take(2).decode(errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size, crc = r.unpack("<QI")
        data = r.take(size)
        if zlib.crc32(data) != crc:
            raise CorruptFile(f"checksum mismatch in array {name!r}")
        if code not in _DTYPES:
            raise SchemaMismatch(f"unknown dtype code {code!r}")
        arrays[name] = np.frombuffer(data, dtype=_DTYPES[code]).reshape(shape).copy()
    if r.pos != len(raw):
        raise CorruptFile("trailing bytes after the last array")
    if set(arrays) != set(ARRAYS):
        raise SchemaMismatch(f"arrays {sorted(arrays)} do not match {list(ARRAYS)}")
    return OfflineDataset(**arrays, meta=meta)


def validate(ds: OfflineDataset) -> None:
    """Schema checks: dimensions, action range, and the target-domain size caps."""
    if ds.observations.ndim != 2 or ds.next_observations.shape != ds.observations.shape:
        raise SchemaMismatch("observation arrays must be [n, obs_dim] and match")
    if ds.actions.ndim != 2 or np.abs(ds.actions).max(initial=0.0) > 1.0:
        raise SchemaMismatch("actions must be [n, act_dim] inside [-1, 1]")
    if ds.meta.get("quality") not in QUALITIES:
        raise SchemaMismatch(f"unknown quality {ds.meta.get('quality')!r}")
    if ds.meta.get("domain") == Domain.TARGET.value and "task_name" in ds.meta:
        family = parse_task_name(ds.meta["task_name"]).env_family
        cap = TARGET_CAP.get(family)
        if cap is not None and ds.meta.get("quality") != "medium-replay" and len(ds) != cap:
            raise SchemaMismatch(f"target dataset for {family} must hold exactly {cap} transitions, has {len(ds)}")


def save_dataset(ds: OfflineDataset, path: Union[str, Path]) -> int:
    """Write the dataset; returns the CRC32 of the whole file for the manifest."""
    validate(ds)
    raw = _encode(ds)
    Path(path).write_bytes(raw)
    return zlib.crc32(raw)


def load_dataset(path: Union[str, Path]) -> OfflineDataset:
    ds = _decode(Path(path).read_bytes())
    validate(ds)
    return ds


# -- manifest ---------------------------------------------------------------


def manifest_key(task: str, domain: str, quality: str) -> str:
    return f"{task}|{domain}|{quality}"


def update_manifest(manifest_path: Union[str, Path], ds: OfflineDataset, data_path: Union[str, Path],
                    checksum: int) -> dict:
    mp = Path(manifest_path)
    entries = json.loads(mp.read_text()) if mp.exists() else {}
    key = manifest_key(ds.meta["task_name"], ds.meta["domain"], ds.meta["quality"])
    entries[key] = {"path": str(Path(data_path).resolve()), "crc32": checksum, "n": len(ds)}
    mp.write_text(json.dumps(entries, indent=1, sort_keys=True))
    return entries


def lookup(manifest_path: Union[str, Path], task: str, domain: str, quality: str) -> Path:
    from .errors import MissingDataset

    mp = Path(manifest_path)
    entries = json.loads(mp.read_text()) if mp.exists() else {}
    e = entries.get(manifest_key(task, domain, quality))
    if e is None or not Path(e["path"]).exists():
        raise MissingDataset(f"no {quality} {domain} dataset for {task} in {mp}")
    if zlib.crc32(Path(e["path"]).read_bytes()) != e["crc32"]:
        raise CorruptFile(f"{e['path']} does not match its manifest checksum")
    return Path(e["path"])
