"""Model-based controllers used as expert policies for the desk environments.

Each controller knows the target-domain parameters, so its gains are tuned per
task by a small rollout search. These controllers provide the expert reference
return and the expert-tier datasets.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mazes
from .dynamics import reset, step
from .params import EnvParams

Policy = Callable[[np.ndarray], np.ndarray]

KP_GRID = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
KD_GRID = (1.0, 2.0, 4.0, 8.0, 16.0)


def _clamp_action(p: EnvParams, a) -> np.ndarray:
    lo = np.array([c[0] for c in p.action_clamp])
    hi = np.array([c[1] for c in p.action_clamp])
    return np.clip(np.asarray(a, dtype=np.float64), lo, hi).astype(np.float32)


@dataclass
class PointController:
    params: EnvParams
    kp: float
    kd: float

    def target(self, pos: np.ndarray) -> np.ndarray:
        return np.asarray(self.params.goal, dtype=np.float64)

    def __call__(self, obs) -> np.ndarray:
        p = self.params
        pos = np.asarray(obs[:2], dtype=np.float64)
        vel = np.asarray(obs[2:4], dtype=np.float64)
        acc = self.kp * (self.target(pos) - pos) - self.kd * vel
        # cancel drag and gravity so the closed loop is a plain PD system
        acc = acc + p.friction_mu * vel + np.array([0.0, p.gravity_g])
        return _clamp_action(p, acc * p.mass / p.force_scale)


class MazeController(PointController):
    """PD tracking of the next cell on the BFS path to the goal."""

    def __init__(self, params: EnvParams, kp: float, kd: float, lookahead: int = 1):
        super().__init__(params, kp, kd)
        self.lookahead = lookahead
        self._h = len(params.layout)
        self._goal_cell = mazes.goal_cell(params.layout)
        self._paths: dict = {}

    def _cell(self, pos) -> tuple[int, int]:
        return self._h - 1 - int(math.floor(pos[1])), int(math.floor(pos[0]))

    def target(self, pos: np.ndarray) -> np.ndarray:
        cell = self._cell(pos)
        if cell not in self._paths:
            self._paths[cell] = mazes.shortest_path(self.params.layout, cell, self._goal_cell)
        path = self._paths[cell]
        if not path or len(path) == 1:
            return np.asarray(self.params.goal, dtype=np.float64)
        r, c = path[min(self.lookahead, len(path) - 1)]
        return np.array([c + 0.5, self._h - 1 - r + 0.5])


class ReacherController:
    """Joint-space PD toward the closest reachable configuration within the joint limits."""

    def __init__(self, params: EnvParams, kp: float, kd: float, grid: int = 241):
        self.params = params
        self.kp = kp
        self.kd = kd
        (lo1, hi1), (lo2, hi2) = params.joint_ranges
        t1, t2 = np.meshgrid(np.linspace(lo1, hi1, grid), np.linspace(lo2, hi2, grid), indexing="ij")
        l1, l2 = params.link_lengths
        ex = l1 * np.cos(t1) + l2 * np.cos(t1 + t2)
        ey = l1 * np.sin(t1) + l2 * np.sin(t1 + t2)
        d = np.hypot(ex - params.goal[0], ey - params.goal[1])
        i = np.unravel_index(np.argmin(d), d.shape)
        self.theta_star = np.array([t1[i], t2[i]])

    def __call__(self, obs) -> np.ndarray:
        p = self.params
        th = np.asarray(obs[:2], dtype=np.float64)
        om = np.asarray(obs[2:4], dtype=np.float64)
        inertia = p.mass * np.asarray(p.link_lengths) ** 2
        acc = self.kp * (self.theta_star - th) - self.kd * om
        return _clamp_action(p, (acc * inertia + p.friction_mu * om) / p.force_scale)


def make_controller(p: EnvParams, kp: float, kd: float):
    if p.family == "pointmass":
        return PointController(p, kp, kd)
    if p.family == "pointmaze":
        return MazeController(p, kp, kd)
    return ReacherController(p, kp, kd)


def rollout_return(p: EnvParams, policy: Policy, rng: np.random.Generator) -> float:
    s = reset(p, rng)
    total = 0.0
    done = False
    while not done:
        s, r, done = step(p, s, policy(s.obs))
        total += r
    return total


def random_policy(p: EnvParams, rng: np.random.Generator) -> Policy:
    return lambda obs: rng.uniform(-1.0, 1.0, size=p.act_dim).astype(np.float32)


def fit_expert(p: EnvParams, seed: int = 0, episodes: int = 5):
    """Grid-search PD gains by average rollout return; returns (controller, score)."""
    best = None
    for kp, kd in itertools.product(KP_GRID, KD_GRID):
        ctrl = make_controller(p, kp, kd)
        rng = np.random.default_rng(seed)
        score = float(np.mean([rollout_return(p, ctrl, rng) for _ in range(episodes)]))
        if best is None or score > best[1]:
            best = (ctrl, score)
    return best
