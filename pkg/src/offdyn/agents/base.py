"""Shared agent machinery: configuration, the SAC learner and the BC / CQL / MCQ regularizers.

Every loss is a pure function of the parameters, a batch and a pre-drawn noise
dictionary, so losses can be gradient-checked and compared bit for bit. TD terms
are per-domain means combined with weights n_d / N, which equals the mean over the
union of both batches and is exactly symmetric under swapping domain labels.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
import torch

from ..approx import (
    CVAE,
    Critic,
    GaussianPolicy,
    TorchBatch,
    adam,
    check_finite,
    make_generator,
    polyak_update,
)
from ..core import DualBatch

DOMAINS = ("src", "tar")
Q_MEAN_FLOOR = 1e-3


@dataclass
class AgentConfig:
    # shared SAC settings
    hidden: tuple = (256, 256)
    lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 5e-3
    alpha: float = 0.2
    batch_src: int = 128
    batch_tar: int = 128
    warmup: int = 256
    buffer_size: int = 1_000_000
    # domain classifiers (DARC, SAC_IW, H2O, DARA)
    classifier_hidden: tuple = (256, 256)
    classifier_noise: float = 1.0
    # VGDF
    ensemble_size: int = 7
    dynamics_hidden: tuple = (200, 200, 200, 200, 200)
    xi: float = 25.0
    # PAR
    par_beta: float = 0.1
    rep_dim: int = 256
    encoder_hidden: tuple = (256, 256)
    # BC / CQL / MCQ regularizers
    nu: float = 5.0
    beta_cql: float = 10.0
    mcq_lambda: float = 0.8
    mcq_samples: int = 10
    cvae_hidden: int = 750
    cvae_layers: int = 3
    cvae_lr: float = 1e-3
    # H2O (online-offline variant)
    h2o_sampled_actions: int = 10
    h2o_onoff_beta: float = 0.01
    # RLPD
    rlpd_ensemble: int = 10
    rlpd_subset: int = 2
    layer_norm: bool = True
    entropy_backup: bool = True
    clipped_double_q: bool = True
    # IQL / DARA
    iql_tau: float = 0.7
    iql_beta: float = 3.0
    adv_clip: float = 100.0
    dara_lambda: float = 0.1
    dara_clip: float = 10.0
    classifier_pretrain_steps: int = 2000
    # TD3_BC
    td3_noise: float = 0.2
    td3_noise_clip: float = 0.5
    policy_delay: int = 2
    # BOSA
    bosa_eps: float = math.log(0.01)
    bosa_eps_policy: float = math.log(0.01)
    bosa_policy_coef: float = 0.1
    bosa_transition_coef: float = 0.1
    bosa_value_weight: float = 0.1
    bosa_policy_cvaes: int = 1
    bosa_dynamics_cvaes: int = 5
    cvae_pretrain_steps: int = 2000

    def __post_init__(self):
        for name in ("hidden", "classifier_hidden", "dynamics_hidden", "encoder_hidden"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.nu <= 0 or self.beta_cql < 0 or not 0.0 <= self.mcq_lambda <= 1.0 or self.mcq_samples < 1:
            raise ValueError("invalid regularizer coefficients")
        if self.rlpd_subset > self.rlpd_ensemble:
            raise ValueError("RLPD subset size exceeds ensemble size")
        if not 0.0 < self.iql_tau < 1.0 or self.iql_beta <= 0:
            raise ValueError("invalid IQL parameters")

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RegularizerSpec:
    """Which conservative term to add and to which domain's samples."""

    kind: str  # "bc" | "cql" | "mcq"
    applied_domain: str  # "src" | "tar"
    nu: float = 5.0
    beta_cql: float = 10.0
    mcq_lambda: float = 0.8
    mcq_samples: int = 10

    def __post_init__(self):
        if self.kind not in ("bc", "cql", "mcq"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.applied_domain not in DOMAINS:
            raise ValueError(f"applied domain must be one of {DOMAINS}")
        if self.nu <= 0 or self.beta_cql < 0 or not 0 <= self.mcq_lambda <= 1 or self.mcq_samples < 1:
            raise ValueError("invalid regularizer coefficients")


Batches = dict  # {"src": TorchBatch, "tar": TorchBatch}


def to_batches(batch: DualBatch, dtype: torch.dtype) -> Batches:
    return {"src": TorchBatch.from_numpy(batch.src, dtype), "tar": TorchBatch.from_numpy(batch.tar, dtype)}


def domain_fractions(batches: Batches) -> dict:
    n = sum(len(b) for b in batches.values())
    return {d: len(b) / n for d, b in batches.items()}


def bc_lambda(nu: float, q_means: dict, fractions: dict) -> float:
    """nu / mean|min_i Q_i(s, a)| over the combined batch, with the mean floored at 1e-3."""
    m = 0.0
    for d, frac in fractions.items():
        if frac > 0:
            m = m + frac * q_means[d]
    return nu / max(float(m), Q_MEAN_FLOOR)


class SAC:
    """Soft actor-critic over the union of a source and a target batch.

    Subclasses customise it through a few hooks: ``aux_update`` (auxiliary
    models), ``relabel`` (source rewards), ``td_weights`` (per-sample TD weights),
    and the optional ``regularizer`` spec.
    """

    name = "SAC"
    critic_members = 2

    def __init__(self, obs_dim: int, act_dim: int, cfg: Optional[AgentConfig] = None, seed: int = 0,
                 regularizer: Optional[RegularizerSpec] = None, dtype: torch.dtype = torch.float32):
        self.cfg = cfg or AgentConfig()
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.dtype = dtype
        self.regularizer = regularizer
        self.init_gen = make_generator(seed)
        self.gen = make_generator(seed + 7919)
        self.updates = 0
        self.build()
        for m in self.modules().values():
            if isinstance(m, torch.nn.Module):
                m.to(dtype)
        self.build_optimizers()

    # -- construction -----------------------------------------------------
    def build(self) -> None:
        c = self.cfg
        self.actor = GaussianPolicy(self.obs_dim, self.act_dim, c.hidden, self.init_gen)
        self.build_critics()
        if self.regularizer is not None and self.regularizer.kind == "mcq":
            self.behavior = CVAE(self.obs_dim, self.act_dim, 2 * self.act_dim, c.cvae_hidden, c.cvae_layers,
                                 squash=True, generator=self.init_gen)

    def build_critics(self) -> None:
        self.critic = Critic(self.obs_dim, self.act_dim, self.critic_members, self.cfg.hidden,
                             generator=self.init_gen, **self.critic_kwargs())
        self.critic_target = copy.deepcopy(self.critic)

    def critic_kwargs(self) -> dict:
        return {}

    def build_optimizers(self) -> None:
        self.actor_opt = adam(self.actor.parameters(), self.cfg.lr)
        self.critic_opt = adam(self.critic.parameters(), self.cfg.lr)
        if hasattr(self, "behavior"):
            self.behavior_opt = adam(self.behavior.parameters(), self.cfg.cvae_lr)

    def modules(self) -> dict:
        """Everything a checkpoint must hold."""
        out = {"actor": self.actor, "critic": self.critic, "critic_target": self.critic_target, "gen": self.gen}
        if hasattr(self, "actor_opt"):
            out.update(actor_opt=self.actor_opt, critic_opt=self.critic_opt)
        if hasattr(self, "behavior"):
            out["behavior"] = self.behavior
            if hasattr(self, "behavior_opt"):
                out["behavior_opt"] = self.behavior_opt
        return out

    # -- acting -------------------------------------------------------------
    @torch.no_grad()
    def act(self, obs, deterministic: bool = False, domain: str = "src") -> np.ndarray:
        o = torch.as_tensor(np.asarray(obs), dtype=self.dtype).unsqueeze(0)
        if deterministic:
            a = self.actor.mode(o)
        else:
            eps = torch.randn((1, self.act_dim), generator=self.gen, dtype=self.dtype)
            a = self.actor.rsample(o, eps)[0]
        return a[0].cpu().numpy().astype(np.float32)

    # -- noise ----------------------------------------------------------------
    def randn(self, *shape) -> torch.Tensor:
        return torch.randn(shape, generator=self.gen, dtype=self.dtype)

    def draw_noise(self, batches: Batches) -> dict:
        noise = {}
        for d in DOMAINS:
            n = len(batches[d])
            nz = {"next": self.randn(n, self.act_dim), "pi": self.randn(n, self.act_dim)}
            reg = self.regularizer
            if reg is not None and reg.applied_domain == d:
                if reg.kind == "cql":
                    nz["cql"] = self.randn(n, self.act_dim)
                elif reg.kind == "mcq":
                    nz["cql"] = self.randn(n, self.act_dim)
                    z = self.randn(reg.mcq_samples, n, self.behavior.latent_dim).clamp(-0.5, 0.5)
                    # the pseudo target is a stop-gradient quantity: fix it before the critic step
                    nz["mcq_target"] = self.mcq_pseudo_target(batches[d].obs, z) if n else None
            noise[d] = nz
        return noise

    # -- hooks ----------------------------------------------------------------
    def aux_update(self, batches: Batches) -> dict:
        if self.regularizer is not None and self.regularizer.kind == "mcq":
            b = batches[self.regularizer.applied_domain]
            if len(b):
                return {"behavior_loss": self.behavior.train_step(self.behavior_opt, b.obs, b.act, self.gen)}
        return {}

    def relabel(self, batches: Batches) -> Batches:
        return batches

    def td_weights(self, batches: Batches, noise: dict) -> dict:
        return {d: None for d in DOMAINS}

    # -- losses ---------------------------------------------------------------
    def next_value(self, b: TorchBatch, nz: dict) -> torch.Tensor:
        a2, logp2 = self.actor.rsample(b.next_obs, nz["next"])
        q = self.critic_target(b.next_obs, a2).min(0).values
        return q - self.cfg.alpha * logp2

    def td_target(self, b: TorchBatch, nz: dict) -> torch.Tensor:
        with torch.no_grad():
            return b.rew + self.cfg.gamma * (1.0 - b.done) * self.next_value(b, nz)

    def td_errors(self, b: TorchBatch, nz: dict) -> torch.Tensor:
        """Squared TD residuals, [members, n]."""
        y = self.td_target(b, nz)
        return (self.critic(b.obs, b.act) - y) ** 2

    def critic_loss(self, batches: Batches, noise: dict) -> torch.Tensor:
        fr = domain_fractions(batches)
        weights = self.td_weights(batches, noise)
        reg = self.regularizer
        loss = torch.zeros((), dtype=self.dtype)
        for d in DOMAINS:
            b = batches[d]
            if len(b) == 0:
                continue
            res = self.td_errors(b, noise[d])
            if weights[d] is not None:
                res = res * weights[d]
            scale = fr[d]
            if reg is not None and reg.kind == "mcq" and reg.applied_domain == d:
                scale = scale * reg.mcq_lambda
            loss = loss + scale * res.mean(1).sum()
        if reg is not None and len(batches[reg.applied_domain]):
            if reg.kind == "cql":
                loss = loss + self.cql_penalty(batches, noise)
            elif reg.kind == "mcq":
                loss = loss + self.mcq_penalty(batches, noise, fr)
        return loss

    def cql_penalty(self, batches: Batches, noise: dict) -> torch.Tensor:
        """beta * sum_i (E[Q_i(s, a~pi)] - E[Q_i(s, a_data)]) on the regularized domain."""
        reg = self.regularizer
        b = batches[reg.applied_domain]
        with torch.no_grad():
            a_pi = self.actor.rsample(b.obs, noise[reg.applied_domain]["cql"])[0]
        gap = self.critic(b.obs, a_pi).mean(1) - self.critic(b.obs, b.act).mean(1)
        return reg.beta_cql * gap.sum()

    def mcq_pseudo_target(self, obs: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """min_j max_k Q_j(s, a_k) over behaviour-model samples a_k = decoder(s, z_k)."""
        self.behavior.require_trained()
        with torch.no_grad():
            k, n = z.shape[0], z.shape[1]
            obs_rep = obs.unsqueeze(0).expand(k, -1, -1).reshape(k * n, -1)
            acts = self.behavior.decode(obs_rep, z.reshape(k * n, -1))[0]
            q = self.critic(obs_rep, acts).reshape(-1, k, n)
            return q.max(1).values.min(0).values

    def mcq_penalty(self, batches: Batches, noise: dict, fr: dict) -> torch.Tensor:
        reg = self.regularizer
        d = reg.applied_domain
        b = batches[d]
        y_pseudo = noise[d]["mcq_target"]
        with torch.no_grad():
            a_pi = self.actor.rsample(b.obs, noise[d]["cql"])[0]
        res = (self.critic(b.obs, a_pi) - y_pseudo) ** 2
        return (1.0 - reg.mcq_lambda) * fr[d] * res.mean(1).sum()

    def actor_q(self, obs: torch.Tensor, act: torch.Tensor) -> torch.Tensor:
        return self.critic(obs, act).min(0).values

    def actor_loss(self, batches: Batches, noise: dict) -> torch.Tensor:
        fr = domain_fractions(batches)
        reg = self.regularizer
        sac = torch.zeros((), dtype=self.dtype)
        sampled = {}
        for d in DOMAINS:
            b = batches[d]
            if len(b) == 0:
                continue
            a, logp = self.actor.rsample(b.obs, noise[d]["pi"])
            sampled[d] = a
            sac = sac + fr[d] * (self.cfg.alpha * logp - self.actor_q(b.obs, a)).mean()
        if reg is None or reg.kind != "bc":
            return sac
        with torch.no_grad():
            q_means = {d: float(self.critic(batches[d].obs, batches[d].act).min(0).values.abs().mean())
                       for d in DOMAINS if len(batches[d])}
        lam = bc_lambda(reg.nu, q_means, {d: fr[d] for d in q_means})
        d = reg.applied_domain
        bc = ((sampled[d] - batches[d].act) ** 2).mean() if d in sampled else 0.0
        return lam * sac + bc

    # -- update ---------------------------------------------------------------
    def prepare(self, batch) -> Batches:
        return to_batches(batch, self.dtype) if isinstance(batch, DualBatch) else batch

    def update(self, batch) -> dict:
        batches = self.prepare(batch)
        info = dict(self.aux_update(batches))
        batches = self.relabel(batches)
        noise = self.draw_noise(batches)

        closs = self.critic_loss(batches, noise)
        check_finite(closs, "critic")
        self.critic_opt.zero_grad()
        closs.backward()
        self.critic_opt.step()

        if self.actor_due():
            aloss = self.actor_loss(batches, noise)
            check_finite(aloss, "actor")
            self.actor_opt.zero_grad()
            aloss.backward()
            self.actor_opt.step()
            info["actor_loss"] = aloss.item()
            self.after_actor(batches, noise)

        polyak_update(self.critic_target, self.critic, self.cfg.tau)
        self.updates += 1
        info["critic_loss"] = closs.item()
        return info

    def actor_due(self) -> bool:
        return True

    def after_actor(self, batches: Batches, noise: dict) -> None:
        pass


def sac_update(agent: SAC, batch) -> dict:
    return agent.update(batch)
