"""Step/reset for the desk environments, dispatching to the compiled kernels when available.

Set ``OFFDYN_PURE_PYTHON=1`` to force the pure-Python kernels.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .params import EnvParams

if os.environ.get("OFFDYN_PURE_PYTHON"):
    from . import _pykernels as kernels
else:
    try:
        from . import _ckernels as kernels
    except ImportError:
        from . import _pykernels as kernels

BACKEND = kernels.BACKEND

WALL_MARGIN = 1e-3


@dataclass(frozen=True)
class EnvState:
    """(x, y, vx, vy) for the point families, (theta1, theta2, omega1, omega2) for reacher."""

    q: tuple
    step_count: int = 0

    @property
    def obs(self) -> np.ndarray:
        return np.asarray(self.q, dtype=np.float32)


@lru_cache(maxsize=64)
def _grid_for(layout: tuple):
    from .mazes import to_grid

    grid = to_grid(layout)
    return grid, tuple(tuple(int(v) for v in row) for row in grid)


def _grid_arg(layout, k=kernels):
    arr, nested = _grid_for(layout)
    return arr if k.BACKEND == "cython" else nested


def effector(p: EnvParams, q) -> tuple[float, float]:
    if p.family == "reacher":
        l1, l2 = p.link_lengths
        t1, t2 = q[0], q[1]
        return (l1 * math.cos(t1) + l2 * math.cos(t1 + t2), l1 * math.sin(t1) + l2 * math.sin(t1 + t2))
    return q[0], q[1]


def in_goal_cell(p: EnvParams, x: float, y: float) -> bool:
    h = len(p.layout)
    return math.floor(x) == math.floor(p.goal[0]) and math.floor(y) == math.floor(p.goal[1]) and 0 <= y < h


def dense_reward(p: EnvParams, q) -> float:
    ex, ey = effector(p, q)
    dx = ex - p.goal[0]
    dy = ey - p.goal[1]
    return -math.sqrt(dx * dx + dy * dy)


def raw_step(p: EnvParams, q, a, k=kernels) -> tuple:
    """Advance the physical state one step (no reward / termination bookkeeping)."""
    a0, a1 = float(a[0]), float(a[1])
    (lox, hix), (loy, hiy) = p.action_clamp
    if p.family == "pointmass":
        return k.point_step(q[0], q[1], q[2], q[3], a0, a1, p.dt, p.force_scale / p.mass, p.friction_mu,
                            p.gravity_g, p.v_max, lox, hix, loy, hiy, p.half_width)
    if p.family == "pointmaze":
        return k.maze_step(q[0], q[1], q[2], q[3], a0, a1, p.dt, p.force_scale / p.mass, p.friction_mu,
                           p.v_max, lox, hix, loy, hiy, _grid_arg(p.layout, k), WALL_MARGIN)
    l1, l2 = p.link_lengths
    (jlo1, jhi1), (jlo2, jhi2) = p.joint_ranges
    return k.reacher_step(q[0], q[1], q[2], q[3], a0, a1, p.dt, p.force_scale, p.friction_mu,
                          p.mass * l1 * l1, p.mass * l2 * l2, p.v_max, lox, hix, loy, hiy,
                          jlo1, jhi1, jlo2, jhi2)


def step(p: EnvParams, s: EnvState, a, rng=None, k=kernels) -> tuple[EnvState, float, bool]:
    """One environment step. ``done`` is set at the episode limit or, in the maze, on the goal cell."""
    q = raw_step(p, s.q, a, k)
    t = s.step_count + 1
    if p.family == "pointmaze":
        success = in_goal_cell(p, q[0], q[1])
        reward = 1.0 if success else 0.0
        done = success or t >= p.episode_len
    else:
        reward = dense_reward(p, q)
        done = t >= p.episode_len
    return EnvState(q, t), reward, done


def is_terminal(p: EnvParams, s: EnvState) -> bool:
    """True environment termination, excluding the time limit."""
    return p.family == "pointmaze" and in_goal_cell(p, s.q[0], s.q[1])


def reset(p: EnvParams, rng: np.random.Generator) -> EnvState:
    f32 = kernels.f32
    if p.start_noise > 0:
        noise = rng.uniform(-p.start_noise, p.start_noise, size=2)
    else:
        noise = np.zeros(2)
    pos = (f32(p.start[0] + float(noise[0])), f32(p.start[1] + float(noise[1])))
    if p.family == "reacher":
        (jlo1, jhi1), (jlo2, jhi2) = p.joint_ranges
        pos = (min(max(pos[0], jlo1), jhi1), min(max(pos[1], jlo2), jhi2))
    return EnvState((pos[0], pos[1], 0.0, 0.0), 0)


class Env:
    """Minimal gym-style wrapper: ``reset() -> obs`` and ``step(a) -> (obs, r, terminated, truncated)``."""

    def __init__(self, params: EnvParams, rng: np.random.Generator):
        self.params = params
        self.rng = rng
        self.state: EnvState | None = None

    @property
    def obs_dim(self) -> int:
        return self.params.obs_dim

    @property
    def act_dim(self) -> int:
        return self.params.act_dim

    def reset(self) -> np.ndarray:
        self.state = reset(self.params, self.rng)
        return self.state.obs

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state, reward, done = step(self.params, self.state, action, self.rng)
        terminated = is_terminal(self.params, self.state)
        truncated = done and not terminated
        return self.state.obs, reward, terminated, truncated
