"""Target-domain evaluation, normalized scores, seed aggregation and result export."""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import numpy as np

from .core import parse_task_name
from .envs.dynamics import Env
from .envs.params import EnvParams
from .errors import DegenerateReference, UnwritablePath

DEFAULT_EPISODES = 10
DEFAULT_SEEDS = 5
CSV_COLUMNS = ("task", "setting", "algo", "seed", "step", "return", "ns")
STD_KIND = "population"


def _as_policy(policy) -> Callable:
    if hasattr(policy, "act"):
        return lambda obs: policy.act(obs, deterministic=True)
    return policy


def evaluate_policy(policy, env, episodes: int = DEFAULT_EPISODES, rng: Optional[np.random.Generator] = None) -> float:
    """Mean undiscounted return over ``episodes`` episodes using the deterministic action.

    ``env`` is either environment parameters or any object with gym-style
    ``reset() -> obs`` and ``step(a) -> (obs, r, terminated, truncated)``.
    Agents are queried with ``deterministic=True``; plain callables are used as given.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    if isinstance(env, EnvParams):
        env = Env(env, rng if rng is not None else np.random.default_rng(0))
    act = _as_policy(policy)
    returns = []
    for _ in range(episodes):
        obs = env.reset()
        total, done = 0.0, False
        while not done:
            obs, r, terminated, truncated = env.step(act(obs))
            total += float(r)
            done = terminated or truncated
        returns.append(total)
    return math.fsum(returns) / episodes


def normalized_score(j_pi, j_r, j_e):
    """100 (J_pi - J_r) / (J_e - J_r); exact when given Fractions."""
    if not j_e > j_r:
        raise DegenerateReference(f"expert return {j_e} must exceed random return {j_r}")
    return (j_pi - j_r) * 100 / (j_e - j_r)


@dataclass
class EvalReport:
    task_name: str
    setting: str
    algo: str
    seeds: list = field(default_factory=list)
    per_seed_returns: list = field(default_factory=list)
    per_seed_ns: list = field(default_factory=list)
    mean_ns: float = float("nan")
    std_ns: float = float("nan")
    timestamps: list = field(default_factory=list)
    config_hash: str = ""
    final_step: int = 0
    # rows of {seed, step, domain, return, ns}
    curves: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    std_kind: str = STD_KIND

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if hasattr(x, "numerator") and not isinstance(x, (int, float)):
        return float(x)
    return x


def mean_std(values: list) -> tuple:
    """Mean and population std; both are independent of the order of ``values``."""
    if not values:
        raise ValueError("need at least one value")
    if all(isinstance(v, float) for v in values):
        return statistics.fmean(values), statistics.pstdev(values)
    return statistics.mean(values), statistics.pstdev(values)


def aggregate(reports: list) -> EvalReport:
    """Merge single-seed reports of one (task, setting, algo) into a multi-seed report."""
    if not reports:
        raise ValueError("aggregate needs at least one report")
    first = reports[0]
    for r in reports:
        if (r.task_name, r.setting, r.algo) != (first.task_name, first.setting, first.algo):
            raise ValueError("reports describe different experiments")
    out = EvalReport(first.task_name, first.setting, first.algo, config_hash=first.config_hash,
                     final_step=first.final_step)
    for r in reports:
        out.seeds += r.seeds
        out.per_seed_returns += r.per_seed_returns
        out.per_seed_ns += r.per_seed_ns
        out.timestamps += r.timestamps
        out.curves += r.curves
    out.mean_ns, out.std_ns = mean_std(out.per_seed_ns)
    return out


def single_seed_report(task: str, setting: str, algo: str, seed: int, final_return: float, j_r: float,
                       j_e: float, **kw) -> EvalReport:
    ns = normalized_score(final_return, j_r, j_e)
    return EvalReport(task, setting, algo, [seed], [final_return], [ns], ns, 0.0, [time.time()], **kw)


# -- export -----------------------------------------------------------------


def shift_category(task_name: str) -> tuple:
    """(environment family, shift type): the grouping used for radar charts."""
    tid = parse_task_name(task_name)
    return tid.env_family, tid.shift_type


def csv_rows(reports: Iterable[EvalReport]) -> list:
    rows = []
    for rep in reports:
        for seed, ret, ns in zip(rep.seeds, rep.per_seed_returns, rep.per_seed_ns):
            curve = [c for c in rep.curves if c["seed"] == seed and c["domain"] == "target"]
            if curve:
                rows += [(rep.task_name, rep.setting, rep.algo, seed, c["step"], c["return"], c["ns"]) for c in curve]
            else:
                rows.append((rep.task_name, rep.setting, rep.algo, seed, rep.final_step, ret, ns))
    return rows


def plotdata(reports: list) -> dict:
    """Radar data (mean NS per shift category of each family) and learning curves for both domains."""
    groups: dict = {}
    for rep in reports:
        fam, cat = shift_category(rep.task_name)
        groups.setdefault((rep.setting, rep.algo, fam, cat), []).append(float(rep.mean_ns))
    radar = [{"setting": s, "algo": a, "family": f, "category": c, "ns": math.fsum(v) / len(v), "tasks": len(v)}
             for (s, a, f, c), v in sorted(groups.items())]
    curves = [dict(task=rep.task_name, setting=rep.setting, algo=rep.algo, **c) for rep in reports for c in rep.curves]
    return _jsonable({"radar": radar, "curves": curves, "std": STD_KIND})


def render(reports: list, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in csv_rows(reports):
            w.writerow(row)
        return buf.getvalue()
    if fmt == "json":
        return json.dumps({"std": STD_KIND, "reports": [r.to_dict() for r in reports]}, indent=1, sort_keys=True)
    if fmt == "plotdata":
        return json.dumps(plotdata(reports), indent=1, sort_keys=True)
    raise ValueError(f"unknown format {fmt!r}; expected csv, json or plotdata")


def export_results(reports: list, fmt: str, path: Union[str, Path]) -> Path:
    text = render(reports, fmt)
    p = Path(path)
    try:
        p.write_text(text)
    except OSError as e:
        raise UnwritablePath(f"cannot write {p}: {e.strerror or e}") from None
    return p


def load_reports(path: Union[str, Path]) -> list:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "reports" in data:
        data = data["reports"]
    if isinstance(data, dict):
        data = [data]
    return [EvalReport.from_dict(d) for d in data]
