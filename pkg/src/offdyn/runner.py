"""Experiment orchestration for the four source/target settings."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .agents import SETTINGS, AgentConfig, check_pairing, make_agent
from .approx import save_checkpoint
from .core import Domain, DualBatch, ReplayBuffer, TransitionBatch, parse_task_name, seed_everything
from .data import OfflineDataset, build_dataset, load_dataset, save_dataset
from .envs.dynamics import Env
from .envs.params import make_env_pair
from .envs.references import reference_returns
from .errors import MissingDataset, SchemaMismatch
from .evaluation import DEFAULT_EPISODES, EvalReport, evaluate_policy, normalized_score

log = logging.getLogger(__name__)

# 1/20 of the full-scale budgets; the ratios between them are what matters
DESK_BUDGETS = {
    "online-online": {"src_steps": 50_000, "tar_steps": 5_000, "grad_steps": 0, "interact_every": 10},
    "offline-online": {"src_steps": 0, "tar_steps": 5_000, "grad_steps": 50_000, "interact_every": 10},
    "online-offline": {"src_steps": 25_000, "tar_steps": 0, "grad_steps": 25_000, "interact_every": 1},
    "offline-offline": {"src_steps": 0, "tar_steps": 0, "grad_steps": 25_000, "interact_every": 0},
}
EVAL_POINTS = 100
OFFLINE_ROLES = {
    "online-online": (),
    "offline-online": ("source",),
    "online-offline": ("target",),
    "offline-offline": ("source", "target"),
}


@dataclass
class ExperimentConfig:
    task_name: str
    setting: str
    algo: str
    seed: int = 0
    src_steps: Optional[int] = None
    tar_steps: Optional[int] = None
    grad_steps: Optional[int] = None
    interact_every: Optional[int] = None
    src_dataset: Optional[str] = None
    tar_dataset: Optional[str] = None
    output_dir: Optional[str] = None
    deterministic: bool = True
    eval_episodes: int = DEFAULT_EPISODES
    eval_points: int = EVAL_POINTS
    eval_source: bool = True
    pretrain_steps: Optional[int] = None
    profile: str = "desk"
    # stop after the first evaluation whose target NS reaches this value
    stop_ns: Optional[float] = None
    agent: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        self.algo = check_pairing(self.algo, self.setting)
        parse_task_name(self.task_name)
        for k, v in DESK_BUDGETS[self.setting].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        roles = OFFLINE_ROLES[self.setting]
        for role, path in (("source", self.src_dataset), ("target", self.tar_dataset)):
            if role in roles and path is None:
                raise MissingDataset(f"{self.setting} needs a {role} dataset")
            if role not in roles and path is not None:
                raise ValueError(f"{self.setting} collects {role} data online; drop the {role} dataset path")
        self._check_budgets()

    def _check_budgets(self):
        s, t, g, k = self.src_steps, self.tar_steps, self.grad_steps, self.interact_every
        if min(s, t, g, k) < 0:
            raise ValueError("budgets must be non-negative")
        if self.setting == "online-online" and self.algo != "SAC_tune" and (k < 1 or s != k * t):
            raise ValueError(f"online-online needs src_steps = interact_every * tar_steps, got {s} vs {k}*{t}")
        if self.setting == "offline-online" and (k < 1 or g != k * t or s):
            raise ValueError(f"offline-online needs grad_steps = interact_every * tar_steps, got {g} vs {k}*{t}")
        if self.setting == "online-offline" and (s != g or t):
            raise ValueError("online-offline takes exactly one source step per gradient step")
        if self.setting == "offline-offline" and (s or t):
            raise ValueError("offline-offline performs no environment steps")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Stable hash of everything that affects the run (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- configuration files --------------------------------------------------------


def algo_config_file(algo: str) -> Path:
    return Path(str(resources.files("offdyn") / "configs" / f"{algo.lower()}.yaml"))


def agent_config_for(algo: str, task_name: str, profile: str = "desk", overrides: Optional[dict] = None) -> AgentConfig:
    """Merge file defaults, the named profile, family/task sections and explicit overrides, in that order."""
    path = algo_config_file(algo)
    raw = yaml.safe_load(path.read_text()) if path.exists() else {}
    raw = raw or {}
    merged = dict(raw.get("agent") or {})
    merged.update((raw.get("profiles") or {}).get(profile) or {})
    family = parse_task_name(task_name).env_family
    merged.update((raw.get("families") or {}).get(family) or {})
    merged.update((raw.get("tasks") or {}).get(task_name) or {})
    merged.update(overrides or {})
    return AgentConfig.from_dict(merged)


def load_experiment_file(path: str) -> dict:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return data


# -- datasets -----------------------------------------------------------------


def _load_role(path: str, role: Domain, task: str) -> OfflineDataset:
    p = Path(path)
    if not p.exists():
        raise MissingDataset(f"{role.value} dataset {p} does not exist")
    ds = load_dataset(p)
    if ds.meta.get("domain") != role.value:
        raise SchemaMismatch(f"{p} holds {ds.meta.get('domain')} data, expected {role.value}")
    if ds.meta.get("task_name") != task:
        raise SchemaMismatch(f"{p} was collected for {ds.meta.get('task_name')}, not {task}")
    return ds


def prepare_datasets(task: str, setting: str, out_dir: str, quality: str = "medium", seed: int = 0) -> dict:
    """Collect (or reuse) the offline datasets a setting needs; returns config path fields."""
    out = {}
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    for role in OFFLINE_ROLES[setting]:
        dom = Domain(role)
        path = Path(out_dir) / f"{task}-{role}-{quality}-s{seed}.odds"
        if not path.exists():
            save_dataset(build_dataset(task, dom, quality, seed=seed), path)
        out["src_dataset" if role == "source" else "tar_dataset"] = str(path)
    return out


# -- the run --------------------------------------------------------------------


class Experiment:
    """One seed of one (task, setting, algorithm) triple."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.rngs = seed_everything(cfg.seed, cfg.deterministic)
        src_params, tar_params = make_env_pair(cfg.task_name)
        self.params = {Domain.SOURCE: src_params, Domain.TARGET: tar_params}
        self.envs = {Domain.SOURCE: Env(src_params, self.rngs["env_source"]),
                     Domain.TARGET: Env(tar_params, self.rngs["env_target"])}
        self.obs = {Domain.SOURCE: None, Domain.TARGET: None}
        self.j_r, self.j_e = reference_returns(cfg.task_name)
        self.agent_cfg = agent_config_for(cfg.algo, cfg.task_name, cfg.profile, cfg.agent)
        self.agent = make_agent(cfg.algo, cfg.setting, src_params.obs_dim, src_params.act_dim, self.agent_cfg,
                                seed=self.rngs.child_seed("init") % (2**31))
        self.buffers = {}
        for dom, path in ((Domain.SOURCE, cfg.src_dataset), (Domain.TARGET, cfg.tar_dataset)):
            if path is not None:
                self.buffers[dom] = ReplayBuffer.from_batch(_load_role(path, dom, cfg.task_name).to_batch())
            else:
                cap = min(self.agent_cfg.buffer_size, max(cfg.src_steps, cfg.tar_steps, 1))
                self.buffers[dom] = ReplayBuffer(src_params.obs_dim, src_params.act_dim, cap, dom)
        self.offline_sizes = {d: len(self.buffers[d]) for d in Domain if Domain(d).value in OFFLINE_ROLES[cfg.setting]}
        self.counters = {"src_env_steps": 0, "tar_env_steps": 0, "grad_steps": 0, "pretrain_batches": 0}
        self.curves: list = []
        self.last_info: dict = {}
        self.out = Path(cfg.output_dir) if cfg.output_dir else None
        if self.out:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "metrics.jsonl").write_text("")
            (self.out / "config.yaml").write_text(yaml.safe_dump(
                {"experiment": cfg.to_dict(), "agent": self._agent_dict(), "config_hash": cfg.config_hash()},
                sort_keys=True))

    def _agent_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.agent_cfg.to_dict().items()}

    # -- environment interaction --------------------------------------------
    def env_step(self, dom: Domain, warmup: bool) -> None:
        env = self.envs[dom]
        if self.obs[dom] is None:
            self.obs[dom] = env.reset()
        o = self.obs[dom]
        if warmup:
            a = self.rngs["noise"].uniform(-1.0, 1.0, env.act_dim).astype(np.float32)
        else:
            a = self.agent.act(o, domain="src" if dom == Domain.SOURCE else "tar")
        o2, r, terminated, truncated = env.step(a)
        self.buffers[dom].add(o, a, r, o2, terminated)
        self.obs[dom] = None if (terminated or truncated) else o2
        self.counters["src_env_steps" if dom == Domain.SOURCE else "tar_env_steps"] += 1

    def in_warmup(self, dom: Domain) -> bool:
        key = "src_env_steps" if dom == Domain.SOURCE else "tar_env_steps"
        return self.counters[key] < self.agent_cfg.warmup

    def sample(self, n_src: Optional[int] = None, n_tar: Optional[int] = None) -> DualBatch:
        c = self.agent_cfg
        n_src = c.batch_src if n_src is None else n_src
        n_tar = c.batch_tar if n_tar is None else n_tar
        rng = self.rngs["sampler"]
        return DualBatch(self._draw(Domain.SOURCE, n_src, rng), self._draw(Domain.TARGET, n_tar, rng))

    def _draw(self, dom: Domain, n: int, rng) -> TransitionBatch:
        buf = self.buffers[dom]
        if n == 0:
            return buf.gather(np.zeros(0, dtype=np.int64))
        return buf.sample(n, rng)

    def update(self, batch: DualBatch) -> None:
        self.last_info = self.agent.update(batch)
        self.counters["grad_steps"] += 1

    # -- evaluation -----------------------------------------------------------
    def evaluate(self, unit: int) -> None:
        cfg = self.cfg
        ret = evaluate_policy(self.agent, self.params[Domain.TARGET], cfg.eval_episodes, self.rngs["eval"])
        row = {"seed": cfg.seed, "step": unit, "domain": "target", "return": ret,
               "ns": normalized_score(ret, self.j_r, self.j_e)}
        self.curves.append(row)
        metrics = dict(self.counters, step=unit, target_return=ret, target_ns=row["ns"])
        if cfg.eval_source:
            sret = evaluate_policy(self.agent, self.params[Domain.SOURCE], cfg.eval_episodes, self.rngs["eval"])
            self.curves.append({"seed": cfg.seed, "step": unit, "domain": "source", "return": sret, "ns": None})
            metrics["source_return"] = sret
        metrics.update({k: v for k, v in self.last_info.items() if isinstance(v, (int, float))})
        log.info("%s %s %s step %d: target return %.2f", cfg.task_name, cfg.setting, cfg.algo, unit, ret)
        if self.out:
            with open(self.out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(metrics, sort_keys=True) + "\n")

    @property
    def stopped(self) -> bool:
        if self.cfg.stop_ns is None or not self.curves:
            return False
        last = [c for c in self.curves if c["domain"] == "target"][-1]
        return last["ns"] >= self.cfg.stop_ns

    def eval_due(self, unit: int, total: int) -> bool:
        every = max(1, total // max(1, self.cfg.eval_points))
        return unit % every == 0 or unit == total

    # -- setting loops --------------------------------------------------------
    def run(self) -> EvalReport:
        cfg = self.cfg
        started = time.time()
        if cfg.algo == "SAC_tune":
            total = self.run_finetune()
        else:
            total = getattr(self, "run_" + cfg.setting.replace("-", "_"))()
        if not self.stopped:
            self.check_invariants()
        return self.finish(total, started)

    def run_online_online(self) -> int:
        cfg = self.cfg
        total = cfg.src_steps
        for t in range(1, total + 1):
            self.env_step(Domain.SOURCE, self.in_warmup(Domain.SOURCE))
            if t % cfg.interact_every == 0:
                self.env_step(Domain.TARGET, self.in_warmup(Domain.TARGET))
            if not self.in_warmup(Domain.SOURCE) and len(self.buffers[Domain.TARGET]):
                self.update(self.sample())
            if self.eval_due(t, total):
                self.evaluate(t)
                if self.stopped:
                    return t
        return total

    def run_finetune(self) -> int:
        """Source-only training followed by target-only finetuning of the same agent."""
        cfg = self.cfg
        c = self.agent_cfg
        total = cfg.src_steps + cfg.tar_steps
        unit = 0
        for dom, steps in ((Domain.SOURCE, cfg.src_steps), (Domain.TARGET, cfg.tar_steps)):
            for _ in range(steps):
                unit += 1
                # random warmup only before the first phase; finetuning starts from the learned policy
                self.env_step(dom, dom == Domain.SOURCE and self.in_warmup(dom))
                if not self.in_warmup(Domain.SOURCE):
                    if dom == Domain.SOURCE:
                        self.update(self.sample(c.batch_src, 0))
                    else:
                        self.update(self.sample(0, c.batch_tar))
                if self.eval_due(unit, total):
                    self.evaluate(unit)
                    if self.stopped:
                        return unit
        return total

    def run_offline_online(self) -> int:
        cfg = self.cfg
        total = cfg.grad_steps
        for g in range(1, total + 1):
            if (g - 1) % cfg.interact_every == 0:
                self.env_step(Domain.TARGET, self.in_warmup(Domain.TARGET))
            self.update(self.sample())
            if self.eval_due(g, total):
                self.evaluate(g)
                if self.stopped:
                    return g
        return total

    def run_online_offline(self) -> int:
        cfg = self.cfg
        total = cfg.grad_steps
        for g in range(1, total + 1):
            self.env_step(Domain.SOURCE, self.in_warmup(Domain.SOURCE))
            self.update(self.sample())
            if self.eval_due(g, total):
                self.evaluate(g)
                if self.stopped:
                    return g
        return total

    def run_offline_offline(self) -> int:
        cfg = self.cfg
        if hasattr(self.agent, "pretrain"):
            def counted():
                self.counters["pretrain_batches"] += 1
                return self.sample()

            self.agent.pretrain(counted, cfg.pretrain_steps)
        total = cfg.grad_steps
        for g in range(1, total + 1):
            self.update(self.sample())
            if self.eval_due(g, total):
                self.evaluate(g)
                if self.stopped:
                    return g
        return total

    # -- bookkeeping ------------------------------------------------------------
    def check_invariants(self) -> None:
        """Budgets spent exactly; offline data untouched; buffers hold only their own domain."""
        cfg = self.cfg
        want = {"src_env_steps": cfg.src_steps, "tar_env_steps": cfg.tar_steps}
        if cfg.setting != "online-online" or cfg.algo == "SAC_tune":
            want["grad_steps"] = cfg.grad_steps if cfg.algo != "SAC_tune" else self.counters["grad_steps"]
        for k, v in want.items():
            if self.counters[k] != v:
                raise AssertionError(f"{k} = {self.counters[k]}, configured {v}")
        for dom, n in self.offline_sizes.items():
            if len(self.buffers[dom]) != n:
                raise AssertionError(f"offline {dom.value} buffer changed size")
        for dom, buf in self.buffers.items():
            if buf.domain != dom:
                raise AssertionError(f"{dom.value} buffer is tagged {buf.domain}")
        for dom, env in self.envs.items():
            if env.params is not self.params[dom]:
                raise AssertionError(f"{dom.value} environment was replaced during the run")

    def finish(self, total: int, started: float) -> EvalReport:
        cfg = self.cfg
        final = [c for c in self.curves if c["domain"] == "target"][-1]
        rep = EvalReport(cfg.task_name, cfg.setting, cfg.algo, [cfg.seed], [final["return"]], [final["ns"]],
                         final["ns"], 0.0, [time.time()], cfg.config_hash(), total, self.curves,
                         dict(self.counters, wall_seconds=round(time.time() - started, 3)))
        if self.out:
            (self.out / "report.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
            save_checkpoint(self.out / "checkpoint.npz", self.agent.modules(), step=self.counters["grad_steps"],
                            extra={"config_hash": cfg.config_hash(), "algo": cfg.algo, "setting": cfg.setting,
                                   "task": cfg.task_name, "agent": self._agent_dict()})
        return rep


def run_experiment(cfg: ExperimentConfig) -> EvalReport:
    return Experiment(cfg).run()


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
