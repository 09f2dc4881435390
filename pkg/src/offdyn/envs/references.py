"""Reference returns J_r (uniform random policy) and J_e (expert controller) per desk task."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..core import TaskId, desk_task_names, format_task_name, parse_task_name
from ..errors import DegenerateReference, MissingReference
from .experts import fit_expert, make_controller, random_policy, rollout_return
from .params import make_env

REGISTRY_FILE = "data/references.json"

# source-domain entries, keyed by the identity variant of each family
BASE_TASKS = ("pointmass-friction-1.0", "reacher-friction-1.0", "pointmaze-layout-umaze")


def reference_tasks() -> list[str]:
    return list(BASE_TASKS) + desk_task_names()


def compute_reference(task: str, episodes: int = 100, seed: int = 0) -> dict:
    p = make_env(task)
    ctrl, _ = fit_expert(p, seed=seed)
    rng = np.random.default_rng(seed + 1)
    j_r = float(np.mean([rollout_return(p, random_policy(p, rng), rng) for _ in range(episodes)]))
    rng = np.random.default_rng(seed + 2)
    j_e = float(np.mean([rollout_return(p, ctrl, rng) for _ in range(episodes)]))
    return {"J_r": j_r, "J_e": j_e, "kp": ctrl.kp, "kd": ctrl.kd, "episodes": episodes}


def build_registry(tasks: Optional[list[str]] = None, episodes: int = 100, seed: int = 0) -> dict:
    return {t: compute_reference(t, episodes, seed) for t in (tasks or reference_tasks())}


def validate_registry(reg: dict) -> dict:
    for name, entry in reg.items():
        if not entry["J_e"] > entry["J_r"]:
            raise DegenerateReference(f"{name}: J_e={entry['J_e']} does not exceed J_r={entry['J_r']}")
    return reg


def save_registry(reg: dict, path: Union[str, Path]) -> None:
    validate_registry(reg)
    Path(path).write_text(json.dumps(reg, indent=1, sort_keys=True) + "\n")


def load_registry(path: Union[str, Path, None] = None) -> dict:
    if path is None:
        text = resources.files("offdyn.envs").joinpath(REGISTRY_FILE).read_text()
    else:
        text = Path(path).read_text()
    return validate_registry(json.loads(text))


@lru_cache(maxsize=1)
def _default_registry() -> dict:
    return load_registry()


def _key(task: Union[str, TaskId]) -> str:
    return format_task_name(parse_task_name(task) if isinstance(task, str) else task)


def reference_entry(task: Union[str, TaskId], registry: Optional[dict] = None) -> dict:
    reg = _default_registry() if registry is None else registry
    key = _key(task)
    if key not in reg:
        raise MissingReference(key)
    return reg[key]


def reference_returns(task: Union[str, TaskId], registry: Optional[dict] = None) -> tuple[float, float]:
    e = reference_entry(task, registry)
    return e["J_r"], e["J_e"]


def expert_policy(task: Union[str, TaskId], registry: Optional[dict] = None):
    """Expert controller for the target domain of ``task`` using the registered gains."""
    e = reference_entry(task, registry)
    return make_controller(make_env(task), e["kp"], e["kd"])
