"""Compare the compiled and pure-Python environment kernels.

    python3 benchmarks/bench_kernels.py [--steps N]

Reports per-call time of the raw physics kernel, of a full environment step
(reward and bookkeeping included), of a batched random rollout, and, for
scale, of one desk-size SAC update.
"""
import argparse
import timeit

import numpy as np

from offdyn.envs import _pykernels
from offdyn.envs.dynamics import EnvState, raw_step, reset, step
from offdyn.envs.params import make_env

try:
    from offdyn.envs import _ckernels
except ImportError:
    _ckernels = None

TASKS = ("pointmass-friction-2.0", "reacher-morph-forearm-hard", "pointmaze-layout-lshape")


def per_call(fn, n: int) -> float:
    return min(timeit.repeat(fn, number=n, repeat=3)) / n


def bench_task(task: str, kernels, n: int) -> dict:
    p = make_env(task)
    s = reset(p, np.random.default_rng(0))
    a = np.array([0.3, -0.7], np.float32)
    return {
        "raw": per_call(lambda: raw_step(p, s.q, a, kernels), n),
        "step": per_call(lambda: step(p, s, a, k=kernels), n),
    }


def bench_rollout(kernels, n: int) -> float:
    p = make_env("pointmass-friction-2.0")
    acts = np.random.default_rng(0).uniform(-1, 1, (p.episode_len, 2))
    (lox, hix), (loy, hiy) = p.action_clamp
    args = (p.start[0], p.start[1], 0.0, 0.0, acts, p.dt, p.force_scale / p.mass, p.friction_mu, p.gravity_g,
            p.v_max, lox, hix, loy, hiy, p.half_width, p.goal[0], p.goal[1])
    return per_call(lambda: kernels.point_rollout_random(*args), max(1, n // 200))


def bench_update() -> float:
    import torch

    from offdyn.agents import SAC
    from offdyn.core import Domain, DualBatch, TransitionBatch
    from offdyn.runner import agent_config_for

    torch.set_num_threads(1)
    rng = np.random.default_rng(0)

    def tb(n):
        return TransitionBatch(rng.normal(size=(n, 4)).astype(np.float32), rng.uniform(-1, 1, (n, 2)).astype(np.float32),
                               rng.normal(size=n).astype(np.float32), rng.normal(size=(n, 4)).astype(np.float32),
                               np.zeros(n, np.float32), Domain.SOURCE)

    agent = SAC(4, 2, agent_config_for("SAC", "pointmass-friction-2.0"))
    batch = DualBatch(tb(128), tb(128))
    return per_call(lambda: agent.update(batch), 30)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=20_000)
    args = ap.parse_args()
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'task':32s} {'backend':8s} {'raw us':>8s} {'step us':>8s}")
    results = {}
    for task in TASKS:
        for name, k in backends:
            r = bench_task(task, k, args.steps)
            results[(task, name)] = r
            print(f"{task:32s} {name:8s} {r['raw'] * 1e6:8.2f} {r['step'] * 1e6:8.2f}")
        if _ckernels:
            py, cy = results[(task, "python")], results[(task, "cython")]
            print(f"{'':32s} {'speedup':8s} {py['raw'] / cy['raw']:7.1f}x {py['step'] / cy['step']:7.1f}x")
    for name, k in backends:
        print(f"200-step random rollout ({name}): {bench_rollout(k, args.steps) * 1e6:.1f} us")
    print(f"one desk SAC update (for scale): {bench_update() * 1e6:.0f} us")
    if not _ckernels:
        print("compiled kernels not built; only the Python fallback was timed")


if __name__ == "__main__":
    main()
