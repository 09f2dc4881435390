"""MuJoCo XML generation for the locomotion, dexterous-hand and ant-maze task variants.

Values are computed with decimal arithmetic from the base models and printed in
the number style of the attribute they replace, so ``"-.4 .785"`` scaled by 0.8
prints as ``"-.32 .628"`` and ``"2.0"`` scaled by 5 prints as ``"10.0"``.
"""
from __future__ import annotations

import json
import re
from decimal import Decimal
from importlib import resources
from typing import Callable, Union

from ..core import (
    ADROIT_FAMILIES,
    LOCOMOTION_FAMILIES,
    TaskId,
    adroit_task_names,
    antmaze_task_names,
    locomotion_task_names,
    parse_task_name,
)
from ..errors import UnknownTask
from . import mazes
from .xml_templates import ADROIT_JOINTS, ROBOTS

GRADED = {"easy": Decimal("0.8"), "medium": Decimal("0.5"), "hard": Decimal("0.2")}
HOPPER_FOOT = {"easy": Decimal("0.8"), "medium": Decimal("0.6"), "hard": Decimal("0.4")}
TORSO_SIZE = {"easy": Decimal("1.5"), "medium": Decimal("2.0"), "hard": Decimal("2.5")}
TORSO_LENGTH = {"easy": Decimal("0.48"), "medium": Decimal("0.64"), "hard": Decimal("0.8")}
HAND_RATIO = {"easy": Decimal("0.5"), "medium": Decimal("0.25"), "hard": Decimal("0.125")}

MAZE_SCALE = Decimal("4")
MAZE_HEIGHT = Decimal("0.5")

# the back/front thigh morphology edits do not follow a single ratio; kept as a table
CHEETAH_THIGH = {
    "easy": ("0.11 0 -0.11", "-0.09 0 -0.1"),
    "medium": ("0.08 0 -0.08", "-0.07 0 -0.08"),
    "hard": ("0.02 0 -0.02", "-0.04 0 -0.05"),
}

_ELEMENT = re.compile(r"^(\s*)<(\w+)\s[^>]*?\bname=\"([^\"]+)\"")


# ---------------------------------------------------------------------------
# number formatting
# ---------------------------------------------------------------------------


def _dot_style(attr: str) -> bool:
    return any(re.match(r"^-?\.\d", tok) for tok in attr.split())


def format_number(value: Decimal, like: str, dot_style: bool = False) -> str:
    """Print ``value`` in the style of the token ``like`` it replaces."""
    if value == 0:
        return like if Decimal(like) == 0 else "0"
    text = format(value.normalize(), "f")
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    if "." not in text and "." in like:
        text += ".0"
    if dot_style and "." in text:
        if text.startswith("0."):
            text = text[1:]
        elif text.startswith("-0."):
            text = "-" + text[2:]
    return text


def scale_tokens(attr: str, ratio: Decimal, which: Union[None, tuple] = None) -> str:
    dot = _dot_style(attr)
    toks = attr.split()
    out = []
    for i, tok in enumerate(toks):
        if which is None or i in which:
            out.append(format_number(Decimal(tok) * ratio, tok, dot))
        else:
            out.append(tok)
    return " ".join(out)


def shrink_range(attr: str, ratio: Decimal) -> str:
    """Shrink a joint range toward its bound nearest zero."""
    dot = _dot_style(attr)
    lo_s, hi_s = attr.split()
    lo, hi = Decimal(lo_s), Decimal(hi_s)
    anchor = min(max(Decimal(0), lo), hi)
    new_lo = anchor + (lo - anchor) * ratio
    new_hi = anchor + (hi - anchor) * ratio
    return f"{format_number(new_lo, lo_s, dot)} {format_number(new_hi, hi_s, dot)}"


# ---------------------------------------------------------------------------
# line-level editing of a template
# ---------------------------------------------------------------------------


class Model:
    def __init__(self, text: str):
        self.lines = text.splitlines()

    def _find(self, tag: str, name: str) -> int:
        for i, line in enumerate(self.lines):
            m = _ELEMENT.match(line)
            if m and m.group(2) == tag and m.group(3) == name:
                return i
        raise KeyError(f"<{tag} name={name!r}> not in model")

    def get(self, tag: str, name: str, attr: str) -> str:
        line = self.lines[self._find(tag, name)]
        return re.search(rf'\b{attr}="([^"]*)"', line).group(1)

    def set(self, tag: str, name: str, attr: str, value: str) -> None:
        i = self._find(tag, name)
        self.lines[i] = re.sub(rf'\b{attr}="[^"]*"', f'{attr}="{value}"', self.lines[i], count=1)

    def update(self, tag: str, name: str, attr: str, fn: Callable[[str], str]) -> None:
        self.set(tag, name, attr, fn(self.get(tag, name, attr)))

    def replace_line(self, tag: str, name: str, new: str) -> None:
        i = self._find(tag, name)
        indent = _ELEMENT.match(self.lines[i]).group(1)
        self.lines[i] = indent + new.strip()

    def map_attr(self, attr: str, fn: Callable[[str], str], tag: str = None) -> None:
        pat = re.compile(rf'\b{attr}="([^"]*)"')
        for i, line in enumerate(self.lines):
            if tag is not None and not line.lstrip().startswith(f"<{tag}"):
                continue
            self.lines[i] = pat.sub(lambda m: f'{attr}="{fn(m.group(1))}"', line)

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


# ---------------------------------------------------------------------------
# locomotion edits
# ---------------------------------------------------------------------------

KINEMATIC_JOINTS = {
    ("ant", "hipjnt"): ("hip_1", "hip_2", "hip_3", "hip_4"),
    ("ant", "anklejnt"): ("ankle_1", "ankle_2", "ankle_3", "ankle_4"),
    ("halfcheetah", "footjnt"): ("bfoot", "ffoot"),
    ("halfcheetah", "thighjnt"): ("bthigh", "fthigh"),
    ("hopper", "footjnt"): ("foot_joint",),
    ("hopper", "legjnt"): ("leg_joint",),
    ("walker2d", "footjnt"): ("foot_joint", "foot_left_joint"),
    ("walker2d", "thighjnt"): ("thigh_joint", "thigh_left_joint"),
}


def _morph(m: Model, fam: str, part: str, level: str) -> None:
    if fam == "ant":
        legs = ["left_ankle_geom", "right_ankle_geom"]
        if part == "alllegs":
            legs += ["third_ankle_geom", "fourth_ankle_geom"]
        for g in legs:
            m.update("geom", g, "fromto", lambda v: scale_tokens(v, GRADED[level], which=(3, 4, 5)))
    elif (fam, part) == ("halfcheetah", "torso"):
        r = GRADED[level]
        half = Decimal(".5") * r
        m.update("geom", "torso", "fromto", lambda v: scale_tokens(v, r))

        def head(v: str) -> str:
            toks = v.split()
            toks[0] = format_number(half + Decimal(".1"), toks[0], True)
            return " ".join(toks)

        m.update("geom", "head", "pos", head)
        m.update("body", "bthigh", "pos", lambda v: scale_tokens(v, r))
        m.update("body", "fthigh", "pos", lambda v: scale_tokens(v, r))
    elif (fam, part) == ("halfcheetah", "thigh"):
        back, front = CHEETAH_THIGH[level]
        m.replace_line("geom", "bthigh", f'<geom fromto="0 0 0 {back}" name="bthigh" size="0.046" type="capsule"/>')
        m.set("body", "bshin", "pos", back)
        m.replace_line("geom", "bshin",
                       '<geom fromto="0 0 0 -.13 0 -.15" name="bshin" rgba="0.9 0.6 0.6 1" size="0.046" type="capsule"/>')
        m.set("body", "bfoot", "pos", "-.13 0 -.15")
        m.replace_line("geom", "fthigh", f'<geom fromto="0 0 0 {front}" name="fthigh" size="0.046" type="capsule"/>')
        m.set("body", "fshin", "pos", front)
        m.replace_line("geom", "fshin",
                       '<geom fromto="0 0 0 .11 0 -.13" name="fshin" rgba="0.9 0.6 0.6 1" size="0.046" type="capsule"/>')
        m.set("body", "ffoot", "pos", ".11 0 -.13")
    elif (fam, part) == ("hopper", "foot"):
        r = HOPPER_FOOT[level]
        m.update("geom", "foot_geom", "fromto", lambda v: scale_tokens(v, r, which=(0, 3)))
        m.update("geom", "foot_geom", "size", lambda v: scale_tokens(v, r))
    elif part == "torso" and fam in ("hopper", "walker2d"):
        m.update("geom", "torso_geom", "size", lambda v: scale_tokens(v, TORSO_SIZE[level]))

        def lengthen(v: str) -> str:
            toks = v.split()
            toks[2] = format_number(Decimal(toks[5]) + TORSO_LENGTH[level], toks[2])
            return " ".join(toks)

        m.update("geom", "torso_geom", "fromto", lengthen)
    elif (fam, part) == ("walker2d", "leg"):
        foot_z = Decimal("0.1")
        knee_z = Decimal(m.get("joint", "leg_joint", "pos").split()[2])
        knee = format_number(foot_z + (knee_z - foot_z) * GRADED[level], "0.6")

        def put(v: str, idx: int) -> str:
            toks = v.split()
            toks[idx] = knee
            return " ".join(toks)

        for side in ("", "_left"):
            m.update("geom", f"thigh{side}_geom", "fromto", lambda v: put(v, 5))
            m.update("joint", f"leg{side}_joint", "pos", lambda v: put(v, 2))
            m.update("geom", f"leg{side}_geom", "fromto", lambda v: put(v, 2))
    else:
        raise UnknownTask(f"no morphology edit for {fam}-{part}")


def _locomotion(task: TaskId) -> str:
    fam, kind, part, level = task.env_family, task.shift_type, task.shift_part, task.shift_level
    m = Model(ROBOTS[fam])
    if kind == "friction":
        ratio = Decimal(repr(level))
        m.map_attr("friction", lambda v: scale_tokens(v, ratio), tag="geom")
    elif kind == "gravity":
        ratio = Decimal(repr(level))
        m.map_attr("gravity", lambda v: scale_tokens(v, ratio), tag="option")
    elif kind == "kinematic":
        joints = KINEMATIC_JOINTS.get((fam, part))
        if joints is None:
            raise UnknownTask(f"no kinematic part {part!r} for {fam}")
        for j in joints:
            m.update("joint", j, "range", lambda v: shrink_range(v, GRADED[level]))
    elif kind == "morph":
        _morph(m, fam, part, level)
    else:
        raise UnknownTask(f"{kind} shift is not defined for {fam}")
    return m.text()


# ---------------------------------------------------------------------------
# dexterous hand edits
# ---------------------------------------------------------------------------


def _shrink_finger_table() -> dict:
    with resources.files("offdyn.envs").joinpath("data/shrink_finger.json").open() as fh:
        return json.load(fh)


def _close_bodies(lines: list[str]) -> list[str]:
    opened = sum(1 for ln in lines if ln.startswith("<body") and not ln.endswith("/>"))
    return lines + ["</body>"] * opened


def _adroit(task: TaskId) -> str:
    level = task.shift_level
    out = ["<mujocoinclude>"]
    if task.shift_type == "broken-joint":
        ratio = HAND_RATIO[level]
        finger = None
        for group, name, axis, lo, hi, user in ADROIT_JOINTS:
            if group != finger:
                finger = group
                out.append(f"  <!-- {'index finger' if group == 'index' else 'thumb'} -->")
            rng = shrink_range(f"{lo} {hi}", ratio)
            out.append(f'  <joint name="{name}" pos="0 0 0" axis="{axis}" range="{rng}" user="{user}" />')
    elif task.shift_type == "shrink-finger":
        for finger, lines in _shrink_finger_table()[level].items():
            out.append(f"  <!-- {finger} finger -->")
            out += ["  " + ln for ln in _close_bodies(lines)]
    else:
        raise UnknownTask(f"{task.shift_type} shift is not defined for {task.env_family}")
    out.append("</mujocoinclude>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# ant maze
# ---------------------------------------------------------------------------


def _antmaze(task: TaskId) -> str:
    layout = mazes.layout_for(task.shift_part, task.shift_level)
    sr, sc = mazes.start_cell(layout)
    gr, gc = mazes.goal_cell(layout)

    def world(r: int, c: int) -> tuple[Decimal, Decimal]:
        # robot starts at the origin, rows grow downward in the layout
        return (c - sc) * MAZE_SCALE, (sr - r) * MAZE_SCALE

    half = MAZE_SCALE / 2
    extra = ["    <!-- layout (# = wall)"]
    extra += [f"         {row}" for row in layout]
    extra.append("    -->")
    for r, row in enumerate(layout):
        for c, cell in enumerate(row):
            if cell == "#":
                x, y = world(r, c)
                extra.append(
                    f'    <geom conaffinity="1" contype="1" material="" name="block_{r}_{c}" '
                    f'pos="{x} {y} {MAZE_HEIGHT / 2}" rgba="0.7 0.5 0.3 1.0" '
                    f'size="{half} {half} {MAZE_HEIGHT / 2}" type="box"/>'
                )
    gx, gy = world(gr, gc)
    extra.append(f'    <site name="goal" pos="{gx} {gy} 0.5" rgba="1 0 0 0.5" size="0.5" type="sphere"/>')
    lines = ROBOTS["ant"].replace('<mujoco model="ant">', '<mujoco model="antmaze">').splitlines()
    at = next(i for i, ln in enumerate(lines) if 'name="floor"' in ln) + 1
    return "\n".join(lines[:at] + extra + lines[at:]) + "\n"


# ---------------------------------------------------------------------------


_EMITTABLE = None


def emittable_tasks() -> list[str]:
    global _EMITTABLE
    if _EMITTABLE is None:
        _EMITTABLE = locomotion_task_names() + antmaze_task_names() + adroit_task_names()
    return _EMITTABLE


def emit_mujoco_xml(task: Union[str, TaskId]) -> list[tuple[str, str]]:
    """Return ``[(filename, xml_text)]`` for a locomotion, hand or ant-maze task."""
    if isinstance(task, str):
        try:
            task = parse_task_name(task)
        except ValueError as exc:
            raise UnknownTask(str(exc)) from exc
    name = task.name
    fam = task.env_family
    identity = task.shift_type in ("friction", "gravity") and task.shift_level == 1.0
    if name not in emittable_tasks() and not (identity and fam in LOCOMOTION_FAMILIES):
        raise UnknownTask(f"{name!r} is not a MuJoCo-family task")
    if fam in LOCOMOTION_FAMILIES:
        return [(f"{name}.xml", _locomotion(task))]
    if fam in ADROIT_FAMILIES:
        return [(f"{name}.xml", _adroit(task))]
    return [(f"{name}.xml", _antmaze(task))]
