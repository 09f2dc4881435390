import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from offdyn.core import Domain, ReplayBuffer
from offdyn.data import (
    MAGIC,
    OfflineDataset,
    build_dataset,
    collect_dataset,
    collect_mixed_maze,
    load_dataset,
    lookup,
    medium_band,
    quality_report,
    replay_mismatches,
    save_dataset,
    update_manifest,
)
from offdyn.envs.experts import random_policy
from offdyn.envs.params import base_params, make_env
from offdyn.envs.references import reference_returns
from offdyn.errors import CorruptFile, MissingDataset, NoSuccess, SchemaMismatch


@pytest.fixture(scope="module")
def pm_random():
    return build_dataset("pointmass-friction-0.5", Domain.TARGET, "random", seed=0)


def test_target_sizes_are_capped(pm_random):
    assert len(pm_random) == 5000
    maze = build_dataset("pointmaze-layout-lshape", Domain.TARGET, "random", seed=0)
    assert len(maze) == 10000


def test_random_tier_is_uniform(pm_random):
    a = pm_random.actions
    assert a.min() >= -1 and a.max() <= 1
    # mean 0, variance 1/3 for U(-1, 1)
    assert np.abs(a.mean(0)).max() < 0.03
    assert np.abs(a.var(0) - 1 / 3).max() < 0.02


def test_episodes_are_full_rollouts(pm_random):
    ends = np.flatnonzero(pm_random.timeouts)
    assert np.all(np.diff(np.concatenate([[-1], ends])) == 200)
    assert not pm_random.terminals.any()


def test_round_trip_is_byte_identical(tmp_path, pm_random):
    a, b = tmp_path / "a.odds", tmp_path / "b.odds"
    crc = save_dataset(pm_random, a)
    back = load_dataset(a)
    assert save_dataset(back, b) == crc
    assert a.read_bytes() == b.read_bytes()
    assert back.meta == pm_random.meta
    assert a.read_bytes()[:4] == MAGIC


def test_truncated_file_is_corrupt(tmp_path, pm_random):
    p = tmp_path / "a.odds"
    save_dataset(pm_random, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(CorruptFile):
        load_dataset(p)
    flipped = bytearray(raw)
    flipped[-5] ^= 0xFF
    p.write_bytes(bytes(flipped))
    with pytest.raises(CorruptFile):
        load_dataset(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptFile):
        load_dataset(p)


def test_target_cap_enforced(tmp_path):
    ds = build_dataset("pointmass-friction-0.5", Domain.TARGET, "random", n=5001)
    with pytest.raises(SchemaMismatch):
        save_dataset(ds, tmp_path / "x.odds")
    # source datasets are not capped
    src = build_dataset("pointmass-friction-0.5", Domain.SOURCE, "random", n=5001)
    save_dataset(src, tmp_path / "s.odds")


def test_cap_enforced_on_load(tmp_path, pm_random):
    # rewrite the header of a valid file so its metadata claims a maze target
    p = tmp_path / "a.odds"
    save_dataset(pm_random, p)
    raw = p.read_bytes()
    meta_len = int.from_bytes(raw[8:12], "little")
    meta = json.loads(raw[12:12 + meta_len])
    meta["task_name"] = "pointmaze-layout-lshape"
    new = json.dumps(meta, sort_keys=True).encode()
    p.write_bytes(raw[:8] + len(new).to_bytes(4, "little") + new + raw[12 + meta_len:])
    with pytest.raises(SchemaMismatch):
        load_dataset(p)


def test_mismatched_lengths_rejected(pm_random):
    with pytest.raises(SchemaMismatch):
        OfflineDataset(pm_random.observations[:3], pm_random.actions, pm_random.rewards,
                       pm_random.next_observations, pm_random.terminals, pm_random.timeouts)


@pytest.mark.parametrize("task", ["pointmass-friction-0.5", "reacher-kinematic-elbow-hard", "pointmaze-layout-lshape"])
def test_replay_reproduces_next_obs(task):
    ds = build_dataset(task, Domain.TARGET, "expert", n=600)
    assert replay_mismatches(ds, make_env(task)) == 0
    src = build_dataset(task, Domain.SOURCE, "random", n=600)
    assert replay_mismatches(src, base_params(task.split("-")[0])) == 0


def test_source_and_target_dynamics_differ():
    task = "pointmass-friction-5.0"
    ds = build_dataset(task, Domain.SOURCE, "random", n=400)
    assert replay_mismatches(ds, make_env(task)) > 0


def test_mixed_maze_has_both_outcomes():
    ds = build_dataset("pointmaze-layout-lshape", Domain.TARGET, "mixed", seed=3)
    ok = ds.episode_successes()
    assert 0 < np.mean(ok) < 1
    assert len(ds) == 10000


def test_mixed_maze_without_success_raises():
    p = make_env("pointmaze-layout-lshape")
    stay = lambda obs: np.zeros(2, np.float32)
    with pytest.raises(NoSuccess):
        collect_mixed_maze(p, stay, 400, np.random.default_rng(0), noise=0.0, budget=400)


def test_to_batch_uses_true_terminations_only():
    ds = build_dataset("pointmaze-layout-lshape", Domain.TARGET, "expert", n=2000)
    b = ds.to_batch()
    assert b.done.sum() == ds.terminals.sum() > 0
    assert len(ReplayBuffer.from_batch(b)) == 2000


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 700), st.integers(0, 1000))
def test_collect_returns_exactly_n(n, seed):
    p = make_env("pointmass-friction-2.0")
    rng = np.random.default_rng(seed)
    ds = collect_dataset(p, random_policy(p, rng), n, "random", rng)
    assert len(ds) == n
    assert ds.timeouts.sum() == n // 200


def test_manifest(tmp_path, pm_random):
    data = tmp_path / "pm.odds"
    crc = save_dataset(pm_random, data)
    man = tmp_path / "manifest.json"
    update_manifest(man, pm_random, data, crc)
    assert lookup(man, "pointmass-friction-0.5", "target", "random") == data.resolve()
    with pytest.raises(MissingDataset):
        lookup(man, "pointmass-friction-0.5", "target", "expert")
    data.write_bytes(data.read_bytes()[:-1] + b"\x00")
    with pytest.raises(CorruptFile):
        lookup(man, "pointmass-friction-0.5", "target", "random")


def test_medium_band_and_ordering(pm_random):
    task = "pointmass-friction-0.5"
    medium = build_dataset(task, Domain.TARGET, "medium", seed=0)
    lo, hi = medium_band(*reference_returns(task))
    assert lo <= np.mean(medium.episode_returns()) <= hi
    expert = build_dataset(task, Domain.TARGET, "expert", seed=0)
    rep = quality_report({"random": pm_random, "medium": medium, "expert": expert})
    assert rep["monotone"]
