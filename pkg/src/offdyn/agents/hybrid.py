"""Offline-Online and Online-Offline learners: regularized SAC/VGDF/PAR variants, H2O and RLPD."""
from __future__ import annotations

from typing import Optional

import torch

from ..approx import TorchBatch
from ..errors import UnknownAlgorithm
from .base import DOMAINS, SAC, AgentConfig, Batches, RegularizerSpec
from .online import PAR, VGDF, ClassifierAgent

# name -> (base learner, regularizer kind, domain it applies to)
HYBRID_TABLE = {
    "BC_SAC": (SAC, "bc", "src"),
    "CQL_SAC": (SAC, "cql", "src"),
    "MCQ_SAC": (SAC, "mcq", "src"),
    "SAC_BC": (SAC, "bc", "tar"),
    "SAC_CQL": (SAC, "cql", "tar"),
    "SAC_MCQ": (SAC, "mcq", "tar"),
    "BC_VGDF": (VGDF, "bc", "src"),
    "BC_PAR": (PAR, "bc", "src"),
    "PAR_BC": (PAR, "bc", "tar"),
}


def regularizer_for(name: str, cfg: AgentConfig) -> RegularizerSpec:
    if name not in HYBRID_TABLE:
        raise UnknownAlgorithm(f"{name!r} is not a regularized hybrid algorithm")
    _, kind, domain = HYBRID_TABLE[name]
    return RegularizerSpec(kind, domain, nu=cfg.nu, beta_cql=cfg.beta_cql, mcq_lambda=cfg.mcq_lambda,
                           mcq_samples=cfg.mcq_samples)


def compose_hybrid(name: str, obs_dim: int, act_dim: int, cfg: Optional[AgentConfig] = None, seed: int = 0,
                   dtype: torch.dtype = torch.float32) -> SAC:
    """Build the learner for a regularized hybrid name such as ``CQL_SAC`` or ``PAR_BC``."""
    cfg = cfg or AgentConfig()
    spec = regularizer_for(name, cfg)
    base = HYBRID_TABLE[name][0]
    agent = base(obs_dim, act_dim, cfg, seed, regularizer=spec, dtype=dtype)
    agent.name = name
    return agent


class H2O(ClassifierAgent):
    """Importance-weighted TD plus a CQL term.

    ``variant="offon"`` (offline source): the source TD and both CQL expectations
    over source samples are weighted per sample by the clipped importance weight.
    ``variant="onoff"`` (offline target): source TD weighted the same way; the CQL
    push-down uses normalised batch weights over source states with several policy
    actions per state, and the push-up uses target data actions.
    """

    name = "H2O"

    def __init__(self, obs_dim: int, act_dim: int, cfg: Optional[AgentConfig] = None, seed: int = 0,
                 variant: str = "offon", dtype: torch.dtype = torch.float32):
        if variant not in ("offon", "onoff"):
            raise ValueError(f"unknown H2O variant {variant!r}")
        self.variant = variant
        super().__init__(obs_dim, act_dim, cfg, seed, dtype=dtype)

    def draw_noise(self, batches: Batches) -> dict:
        noise = super().draw_noise(batches)
        n = len(batches["src"])
        k = 1 if self.variant == "offon" else self.cfg.h2o_sampled_actions
        noise["src"]["cql"] = self.randn(k, n, self.act_dim)
        return noise

    def td_weights(self, batches: Batches, noise: dict) -> dict:
        w = {d: None for d in DOMAINS}
        if len(batches["src"]):
            w["src"] = self.source_weight(batches["src"])
        return w

    def _policy_q(self, b: TorchBatch, eps: torch.Tensor) -> torch.Tensor:
        """Q_i at policy actions, averaged over the k noise draws: [members, n]."""
        k, n = eps.shape[0], eps.shape[1]
        obs = b.obs.unsqueeze(0).expand(k, -1, -1).reshape(k * n, -1)
        with torch.no_grad():
            a = self.actor.rsample(obs, eps.reshape(k * n, -1))[0]
        return self.critic(obs, a).reshape(-1, k, n).mean(1)

    def cql_term(self, batches: Batches, noise: dict) -> torch.Tensor:
        src, tar = batches["src"], batches["tar"]
        if len(src) == 0:
            return torch.zeros((), dtype=self.dtype)
        q_pi = self._policy_q(src, noise["src"]["cql"])
        if self.variant == "offon":
            w = self.source_weight(src)
            gap = (w * q_pi).mean(1) - (w * self.critic(src.obs, src.act)).mean(1)
        else:
            w_tilde = self.classifier.batch_weight(src).to(self.dtype)
            push_down = (w_tilde * q_pi).sum(1)
            push_up = self.critic(tar.obs, tar.act).mean(1) if len(tar) else torch.zeros_like(push_down)
            gap = push_down - push_up
        beta = self.cfg.beta_cql if self.variant == "offon" else self.cfg.h2o_onoff_beta
        return beta * gap.sum()

    def critic_loss(self, batches: Batches, noise: dict) -> torch.Tensor:
        return super().critic_loss(batches, noise) + self.cql_term(batches, noise)


class RLPD(SAC):
    """Layer-normalised critic ensemble; TD target from a random subset of the target critics."""

    name = "RLPD"

    @property
    def critic_members(self) -> int:
        return self.cfg.rlpd_ensemble

    def critic_kwargs(self) -> dict:
        return {"layer_norm": self.cfg.layer_norm}

    def draw_noise(self, batches: Batches) -> dict:
        noise = super().draw_noise(batches)
        subset = torch.randperm(self.cfg.rlpd_ensemble, generator=self.gen)[: self.cfg.rlpd_subset]
        for d in DOMAINS:
            noise[d]["subset"] = subset
        return noise

    def next_value(self, b: TorchBatch, nz: dict) -> torch.Tensor:
        a2, logp2 = self.actor.rsample(b.next_obs, nz["next"])
        q = self.critic_target(b.next_obs, a2)[nz["subset"]]
        v = q.min(0).values if self.cfg.clipped_double_q else q.mean(0)
        if self.cfg.entropy_backup:
            v = v - self.cfg.alpha * logp2
        return v

    def actor_q(self, obs: torch.Tensor, act: torch.Tensor) -> torch.Tensor:
        return self.critic(obs, act).mean(0)


def h2o_offon_update(agent: H2O, batch) -> dict:
    return agent.update(batch)


def h2o_onoff_update(agent: H2O, batch) -> dict:
    return agent.update(batch)


def rlpd_update(agent: RLPD, batch) -> dict:
    return agent.update(batch)


def bc_actor_loss(agent: SAC, batches: Batches, noise: dict) -> torch.Tensor:
    if agent.regularizer is None or agent.regularizer.kind != "bc":
        raise ValueError("agent has no BC regularizer")
    return agent.actor_loss(batches, noise)


def cql_critic_loss(agent: SAC, batches: Batches, noise: dict) -> torch.Tensor:
    if agent.regularizer is None or agent.regularizer.kind != "cql":
        raise ValueError("agent has no CQL regularizer")
    return agent.critic_loss(batches, noise)


def mcq_pseudo_target(agent: SAC, obs: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return agent.mcq_pseudo_target(obs, z)
