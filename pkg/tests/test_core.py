import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from offdyn.core import (
    Domain,
    ReplayBuffer,
    TaskId,
    Transition,
    adroit_task_names,
    antmaze_task_names,
    desk_task_names,
    format_task_name,
    list_tasks,
    locomotion_task_names,
    parse_task_name,
    sample_symmetric,
    seed_everything,
)
from offdyn.errors import (
    EmptyBuffer,
    InvalidShiftLevel,
    TaskNameError,
    UnknownFamily,
    UnknownShiftType,
)


def test_registry_sizes():
    assert len(locomotion_task_names()) == 80
    assert len(antmaze_task_names()) == 18
    assert len(adroit_task_names()) == 24
    assert len(list_tasks()) == len(set(list_tasks()))
    assert set(desk_task_names()) <= set(list_tasks())


@pytest.mark.parametrize("name", list_tasks())
def test_round_trip(name):
    assert format_task_name(parse_task_name(name)) == name


def test_parse_examples():
    assert parse_task_name("ant-friction-0.5") == TaskId("ant", "friction", None, 0.5)
    assert parse_task_name("walker2d-morph-torso-hard") == TaskId("walker2d", "morph", "torso", "hard")
    assert parse_task_name("pen-broken-joint-easy") == TaskId("pen", "broken-joint", None, "easy")
    assert parse_task_name("antmaze-large-3") == TaskId("antmaze", "layout", "large", "3")
    assert parse_task_name("hopper-friction-1.0").is_identity


@pytest.mark.parametrize(
    "name, err",
    [
        ("spider-friction-0.5", UnknownFamily),
        ("ant-wind-0.5", UnknownShiftType),
        ("ant-friction-3.0", InvalidShiftLevel),
        ("ant-friction-0.50", InvalidShiftLevel),
        ("hopper-morph-torso-extreme", InvalidShiftLevel),
        ("antmaze-small-1", InvalidShiftLevel),
        ("antmaze-huge-1", UnknownShiftType),
        ("ant", UnknownShiftType),
        ("ant-kinematic-a-b-easy", InvalidShiftLevel),
    ],
)
def test_parse_errors(name, err):
    with pytest.raises(err):
        parse_task_name(name)
    with pytest.raises(TaskNameError):
        parse_task_name(name)


def _fill(buf, n, offset=0):
    for i in range(n):
        v = float(i + offset)
        buf.add([v] * buf.obs_dim, [0.0] * buf.act_dim, v, [v + 1] * buf.obs_dim, False)


def test_fifo_eviction():
    buf = ReplayBuffer(2, 1, capacity=5)
    _fill(buf, 8)
    assert len(buf) == 5
    assert buf.contents().rew.tolist() == [3.0, 4.0, 5.0, 6.0, 7.0]
    assert buf.total_added == 8


@given(cap=st.integers(1, 20), n=st.integers(0, 60))
def test_fifo_keeps_newest(cap, n):
    buf = ReplayBuffer(1, 1, capacity=cap)
    _fill(buf, n)
    expect = list(range(max(0, n - cap), n))
    assert buf.contents().rew.tolist() == [float(v) for v in expect]


def test_rejects_out_of_range_action():
    buf = ReplayBuffer(1, 1, capacity=3)
    with pytest.raises(ValueError):
        buf.add([0.0], [1.5], 0.0, [0.0], False)


def test_transition_round_trip():
    buf = ReplayBuffer(2, 2, capacity=4, domain=Domain.TARGET)
    t = Transition(np.array([1, 2], np.float32), np.array([0.5, -0.5], np.float32), 3.0,
                   np.array([4, 5], np.float32), True, Domain.TARGET)
    buf.add_transition(t)
    (back,) = buf.contents().transitions()
    assert back.reward == 3.0 and back.done and back.domain is Domain.TARGET
    np.testing.assert_array_equal(back.action, t.action)


def test_empty_buffers_raise():
    rng = np.random.default_rng(0)
    src = ReplayBuffer(1, 1, capacity=4, domain=Domain.SOURCE)
    tar = ReplayBuffer(1, 1, capacity=4, domain=Domain.TARGET)
    with pytest.raises(EmptyBuffer, match="source"):
        sample_symmetric(src, tar, 2, 2, rng)
    _fill(src, 2)
    with pytest.raises(EmptyBuffer, match="target"):
        sample_symmetric(src, tar, 2, 2, rng)
    _fill(tar, 1)
    batch = sample_symmetric(src, tar, 3, 5, rng)
    assert len(batch.src) == 3 and len(batch.tar) == 5
    assert batch.src.domain is Domain.SOURCE and batch.tar.domain is Domain.TARGET


@settings(max_examples=10, deadline=None)
@given(n=st.integers(2, 10), seed=st.integers(0, 2**31))
def test_sampling_uniform(n, seed):
    # every stored index drawn within 5% of its expected share over 200k draws
    buf = ReplayBuffer(1, 1, capacity=n)
    _fill(buf, n)
    draws = buf.sample(200_000, np.random.default_rng(seed)).rew.astype(int)
    freq = np.bincount(draws, minlength=n) / len(draws)
    assert np.all(np.abs(freq * n - 1.0) < 0.05)


def test_seed_streams():
    a = seed_everything(3)
    b = seed_everything(3)
    assert a["init"].random() == b["init"].random()
    x = a["env_source"].standard_normal(10_000)
    y = a["env_target"].standard_normal(10_000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.05
    assert a.child_seed("noise") == b.child_seed("noise")
    assert a.child_seed("noise") != a.child_seed("init")
