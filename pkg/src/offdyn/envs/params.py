"""Desk-scale environment parameters and the shift factory."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Optional, Union

import numpy as np

from ..core import DESK_FAMILIES, KINEMATIC_PARTS, MORPH_PARTS, TaskId, parse_task_name
from ..errors import ShiftNotSupportedForFamily, UnknownLayout
from . import mazes

HALF_WIDTH = 5.0
DT = 0.05
MASS = 1.0
FORCE_SCALE = 10.0
FRICTION_MU = 0.5
GRAVITY_G = 9.8
V_MAX = 10.0
EPISODE_LEN = 200
REACHER_LINK = 1.0
REACHER_JOINT_DEG = 150.0

GRADED_RATIO = {"easy": 0.8, "medium": 0.5, "hard": 0.2}

OBS_DIM = 4
ACT_DIM = 2


@dataclass(frozen=True)
class EnvParams:
    family: str
    dt: float = DT
    mass: float = MASS
    force_scale: float = FORCE_SCALE
    friction_mu: float = FRICTION_MU
    gravity_g: float = GRAVITY_G
    action_clamp: tuple = ((-1.0, 1.0), (-1.0, 1.0))
    link_lengths: Optional[tuple] = None
    joint_ranges: Optional[tuple] = None
    layout: Optional[tuple] = None
    episode_len: int = EPISODE_LEN
    goal: tuple = (0.0, 0.0)
    start: tuple = (0.0, 0.0)
    start_noise: float = 0.0
    half_width: float = HALF_WIDTH
    v_max: float = V_MAX

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.gravity_g < 0:
            raise ValueError("gravity must be non-negative")
        for lo, hi in self.action_clamp:
            if not -1.0 <= lo < hi <= 1.0:
                raise ValueError(f"degenerate action clamp [{lo}, {hi}]")
        if self.layout is not None:
            grid = mazes.to_grid(self.layout)
            for r, c in (mazes.start_cell(self.layout), mazes.goal_cell(self.layout)):
                if grid[r, c]:
                    raise UnknownLayout("start and goal cells must be free")

    @property
    def obs_dim(self) -> int:
        return OBS_DIM

    @property
    def act_dim(self) -> int:
        return ACT_DIM


def _f32_inward(lo: float, hi: float) -> tuple[float, float]:
    """Round an interval to float32-representable bounds without widening it."""
    flo = float(np.float32(lo))
    fhi = float(np.float32(hi))
    if flo < lo:
        flo = float(np.nextafter(np.float32(flo), np.float32(np.inf)))
    if fhi > hi:
        fhi = float(np.nextafter(np.float32(fhi), np.float32(-np.inf)))
    return flo, fhi


def _cell_center(layout, cell) -> tuple[float, float]:
    r, c = cell
    h = len(layout)
    return c + 0.5, (h - 1 - r) + 0.5


def base_params(family: str) -> EnvParams:
    """Source-domain parameters of a desk family."""
    if family == "pointmass":
        return EnvParams(family, goal=(3.0, 0.0), start=(-3.0, 0.0), start_noise=0.1)
    if family == "reacher":
        lim = math.radians(REACHER_JOINT_DEG)
        rng = _f32_inward(-lim, lim)
        return EnvParams(
            family,
            gravity_g=0.0,
            link_lengths=(REACHER_LINK, REACHER_LINK),
            joint_ranges=(rng, rng),
            goal=(-0.6, 1.2),
            start=(0.0, 0.0),
            start_noise=0.1,
        )
    if family == "pointmaze":
        layout = mazes.SMALL_MAPS["umaze"]
        return EnvParams(
            family,
            gravity_g=0.0,
            layout=layout,
            goal=_cell_center(layout, mazes.goal_cell(layout)),
            start=_cell_center(layout, mazes.start_cell(layout)),
            start_noise=0.0,
        )
    raise ShiftNotSupportedForFamily(f"{family!r} is not a desk-scale family")


def _scaled_interval(lo: float, hi: float, ratio: float) -> tuple[float, float]:
    # shrink toward the bound nearest zero (zero itself when the interval straddles it)
    anchor = min(max(0.0, lo), hi)
    return anchor + (lo - anchor) * ratio, anchor + (hi - anchor) * ratio


def make_env(task: Union[str, TaskId]) -> EnvParams:
    """Target-domain parameters: the family's base with the named shift applied."""
    if isinstance(task, str):
        task = parse_task_name(task)
    fam, kind, part, level = task.env_family, task.shift_type, task.shift_part, task.shift_level
    if fam not in DESK_FAMILIES:
        raise ShiftNotSupportedForFamily(f"{fam!r} has no desk-scale simulator; use emit_mujoco_xml")
    p = base_params(fam)

    if kind in ("friction", "gravity"):
        if fam == "pointmaze" or (kind == "gravity" and fam != "pointmass"):
            raise ShiftNotSupportedForFamily(f"{kind} shift is not defined for {fam}")
        if part is not None:
            raise ShiftNotSupportedForFamily(f"{kind} shift takes no part, got {part!r}")
        if kind == "friction":
            return replace(p, friction_mu=p.friction_mu * level)
        return replace(p, gravity_g=p.gravity_g * level)

    if kind == "kinematic":
        parts = KINEMATIC_PARTS.get(fam, ()) if fam in ("pointmass", "reacher") else ()
        if part not in parts:
            raise ShiftNotSupportedForFamily(f"kinematic part {part!r} not defined for {fam}")
        ratio = GRADED_RATIO[level]
        axis = parts.index(part)
        if fam == "pointmass":
            clamp = list(p.action_clamp)
            clamp[axis] = _scaled_interval(*clamp[axis], ratio)
            return replace(p, action_clamp=tuple(clamp))
        ranges = list(p.joint_ranges)
        lim = math.radians(REACHER_JOINT_DEG)
        ranges[axis] = _f32_inward(*_scaled_interval(-lim, lim, ratio))
        return replace(p, joint_ranges=tuple(ranges))

    if kind == "morph":
        if fam != "reacher" or part not in MORPH_PARTS["reacher"]:
            raise ShiftNotSupportedForFamily(f"morphology part {part!r} not defined for {fam}")
        links = list(p.link_lengths)
        links[MORPH_PARTS["reacher"].index(part)] *= GRADED_RATIO[level]
        return replace(p, link_lengths=tuple(links))

    if kind == "layout":
        if fam != "pointmaze":
            raise ShiftNotSupportedForFamily(f"layout shift is only defined for pointmaze, not {fam}")
        if level not in mazes.SMALL_MAPS:
            raise UnknownLayout(f"unknown pointmaze layout {level!r}")
        return replace(p, layout=mazes.SMALL_MAPS[level])

    raise ShiftNotSupportedForFamily(f"{kind} shift is not defined for {fam}")


def make_env_pair(task: Union[str, TaskId]) -> tuple[EnvParams, EnvParams]:
    """(source, target) parameters for a task."""
    if isinstance(task, str):
        task = parse_task_name(task)
    return base_params(task.env_family), make_env(task)


SHIFT_FIELDS = {
    "friction": {"friction_mu"},
    "gravity": {"gravity_g"},
    "kinematic": {"action_clamp", "joint_ranges"},
    "morph": {"link_lengths"},
    "layout": {"layout"},
}


def changed_fields(a: EnvParams, b: EnvParams) -> set[str]:
    return {f.name for f in fields(EnvParams) if getattr(a, f.name) != getattr(b, f.name)}
