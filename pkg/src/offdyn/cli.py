"""Command-line entry point: ``offdyn {train,collect,emit-xml,eval,report,list-tasks}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional

from .errors import OffDynError

EXPERIMENT_FLAGS = ("task_name", "setting", "algo", "seed", "src_steps", "tar_steps", "grad_steps", "interact_every",
                    "src_dataset", "tar_dataset", "output_dir", "deterministic", "eval_episodes", "profile")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offdyn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment and write its report")
    t.add_argument("--config", help="YAML file with experiment fields and an optional 'agent' mapping")
    t.add_argument("--task", dest="task_name")
    t.add_argument("--setting")
    t.add_argument("--algo")
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--src-steps", type=int)
    t.add_argument("--tar-steps", type=int)
    t.add_argument("--grad-steps", type=int)
    t.add_argument("--interact-every", type=int)
    t.add_argument("--src-dataset")
    t.add_argument("--tar-dataset")
    t.add_argument("--eval-episodes", type=int)
    t.add_argument("--profile", help="agent config profile: desk (default) or full")
    t.add_argument("--collect-missing", metavar="QUALITY",
                   help="collect any offline dataset the setting needs at this quality")

    c = sub.add_parser("collect", help="collect an offline dataset")
    c.add_argument("--task", required=True)
    c.add_argument("--domain", choices=("source", "target"), required=True)
    c.add_argument("--quality", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n", type=int)
    c.add_argument("--out", required=True)
    c.add_argument("--manifest", help="manifest JSON to record the dataset in")

    x = sub.add_parser("emit-xml", help="write the MuJoCo model files of a shifted task")
    x.add_argument("--task", required=True)
    x.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="evaluate a saved checkpoint on the target domain")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="aggregate run reports and export them")
    r.add_argument("reports", nargs="+", help="report.json files")
    r.add_argument("--format", choices=("csv", "json", "plotdata"), default="csv")
    r.add_argument("--out", required=True)

    sub.add_parser("list-tasks", help="print every registered task name")
    return p


def _train(args, parser) -> int:
    from .runner import ExperimentConfig, load_experiment_file, prepare_datasets, run_experiment

    fields = load_experiment_file(args.config) if args.config else {}
    agent = fields.pop("agent", {}) or {}
    if "task" in fields:
        fields["task_name"] = fields.pop("task")
    for k in EXPERIMENT_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            fields[k] = v
    for k in ("task_name", "setting", "algo"):
        if k not in fields:
            parser.error(f"train needs --{k.replace('_name', '')} (on the command line or in --config)")
    if args.collect_missing:
        root = Path(fields.get("output_dir") or ".") / "datasets"
        for k, v in prepare_datasets(fields["task_name"], fields["setting"], str(root), args.collect_missing,
                                     fields.get("seed", 0)).items():
            fields.setdefault(k, v)
    cfg = ExperimentConfig(agent=agent, **fields)
    rep = run_experiment(cfg)
    print(json.dumps({"task": rep.task_name, "setting": rep.setting, "algo": rep.algo, "seed": cfg.seed,
                      "return": rep.per_seed_returns[0], "ns": rep.mean_ns, "counters": rep.counters}))
    return 0


def _collect(args) -> int:
    from .core import Domain
    from .data import build_dataset, save_dataset, update_manifest

    ds = build_dataset(args.task, Domain(args.domain), args.quality, seed=args.seed, n=args.n)
    crc = save_dataset(ds, args.out)
    if args.manifest:
        update_manifest(args.manifest, ds, args.out, crc)
    print(f"{args.out}: {len(ds)} transitions, crc32 {crc:08x}")
    return 0


def _emit_xml(args) -> int:
    from .envs.xml import emit_mujoco_xml

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in emit_mujoco_xml(args.task):
        (out / name).write_text(text)
        print(out / name)
    return 0


def _eval(args) -> int:
    import numpy as np

    from .agents import AgentConfig, make_agent
    from .approx import load_checkpoint
    from .envs.params import make_env
    from .envs.references import reference_returns
    from .evaluation import evaluate_policy, normalized_score

    extra = _checkpoint_extra(args.checkpoint)
    params = make_env(extra["task"])
    agent = make_agent(extra["algo"], extra["setting"], params.obs_dim, params.act_dim,
                       AgentConfig.from_dict(extra["agent"]))
    load_checkpoint(args.checkpoint, agent.modules())
    ret = evaluate_policy(agent, params, args.episodes, np.random.default_rng(args.seed))
    j_r, j_e = reference_returns(extra["task"])
    print(json.dumps({"task": extra["task"], "return": ret, "ns": normalized_score(ret, j_r, j_e)}))
    return 0


def _checkpoint_extra(path: str) -> dict:
    import numpy as np

    with np.load(path) as data:
        meta = json.loads(data["__meta__"].tobytes().decode())
    extra = meta.get("extra", {})
    if not {"task", "algo", "setting", "agent"} <= set(extra):
        raise OffDynError(f"{path} was not written by the experiment runner")
    return extra


def _report(args) -> int:
    from .evaluation import aggregate, export_results, load_reports

    groups = defaultdict(list)
    for path in args.reports:
        for rep in load_reports(path):
            groups[(rep.task_name, rep.setting, rep.algo)].append(rep)
    merged = [aggregate(groups[k]) for k in sorted(groups)]
    export_results(merged, args.format, args.out)
    print(f"{args.out}: {len(merged)} experiment(s)")
    return 0


def _list_tasks() -> int:
    from .core import list_tasks

    for name in list_tasks():
        print(name)
    return 0


def main(argv: Optional[list] = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            return _train(args, parser)
        if args.command == "collect":
            return _collect(args)
        if args.command == "emit-xml":
            return _emit_xml(args)
        if args.command == "eval":
            return _eval(args)
        if args.command == "report":
            return _report(args)
        return _list_tasks()
    except (OffDynError, ValueError, OSError) as e:
        print(f"offdyn {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
