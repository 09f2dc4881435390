"""Offline-Offline learners: IQL, TD3_BC, DARA and BOSA.

All four train on batches drawn from two fixed datasets and never touch an
environment. Per-domain terms are combined with weights n_d / N as in ``base``.
"""
from __future__ import annotations

import copy
import warnings
from typing import Optional

import numpy as np
import torch

from ..approx import (
    CVAE,
    MLP,
    BoundedGaussianPolicy,
    DeterministicPolicy,
    TorchBatch,
    adam,
    check_finite,
    polyak_update,
)
from ..classifiers import DomainClassifier
from ..core import TransitionBatch
from ..errors import AllMasked
from .base import DOMAINS, Q_MEAN_FLOOR, SAC, AgentConfig, Batches, domain_fractions


def expectile_loss(u, tau: float):
    """|tau - 1(u < 0)| * u^2, elementwise; works on floats and tensors."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if torch.is_tensor(u):
        return torch.abs(tau - (u < 0).to(u.dtype)) * u * u
    return abs(tau - (1.0 if u < 0 else 0.0)) * u * u


def _step(opt: torch.optim.Optimizer, loss: torch.Tensor, name: str) -> float:
    check_finite(loss, name)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


class IQL(SAC):
    """Implicit Q-learning on the mixture of both datasets."""

    name = "IQL"

    def build(self) -> None:
        c = self.cfg
        self.actor = BoundedGaussianPolicy(self.obs_dim, self.act_dim, c.hidden, self.init_gen)
        self.build_critics()
        self.value = MLP(self.obs_dim, 1, c.hidden, generator=self.init_gen)

    def build_optimizers(self) -> None:
        super().build_optimizers()
        self.value_opt = adam(self.value.parameters(), self.cfg.lr)

    def modules(self) -> dict:
        out = super().modules()
        out["value"] = self.value
        if hasattr(self, "value_opt"):
            out["value_opt"] = self.value_opt
        return out

    def draw_noise(self, batches: Batches) -> dict:
        return {d: {} for d in DOMAINS}

    def v(self, obs: torch.Tensor) -> torch.Tensor:
        return self.value(obs).squeeze(-1)

    def target_q(self, b: TorchBatch) -> torch.Tensor:
        with torch.no_grad():
            return self.critic_target(b.obs, b.act).min(0).values

    def value_loss(self, batches: Batches) -> torch.Tensor:
        fr = domain_fractions(batches)
        loss = torch.zeros((), dtype=self.dtype)
        for d in DOMAINS:
            b = batches[d]
            if len(b):
                loss = loss + fr[d] * expectile_loss(self.target_q(b) - self.v(b.obs), self.cfg.iql_tau).mean()
        return loss

    def advantage_weight(self, b: TorchBatch) -> torch.Tensor:
        with torch.no_grad():
            adv = self.target_q(b) - self.v(b.obs)
            return torch.exp(self.cfg.iql_beta * adv).clamp(max=self.cfg.adv_clip)

    def actor_loss(self, batches: Batches, noise: dict) -> torch.Tensor:
        fr = domain_fractions(batches)
        loss = torch.zeros((), dtype=self.dtype)
        for d in DOMAINS:
            b = batches[d]
            if len(b):
                loss = loss - fr[d] * (self.advantage_weight(b) * self.actor.log_prob(b.obs, b.act)).mean()
        return loss

    def critic_loss(self, batches: Batches, noise: dict) -> torch.Tensor:
        fr = domain_fractions(batches)
        loss = torch.zeros((), dtype=self.dtype)
        for d in DOMAINS:
            b = batches[d]
            if len(b) == 0:
                continue
            with torch.no_grad():
                y = b.rew + self.cfg.gamma * (1.0 - b.done) * self.v(b.next_obs)
            loss = loss + fr[d] * ((self.critic(b.obs, b.act) - y) ** 2).mean(1).sum()
        return loss

    def update(self, batch) -> dict:
        batches = self.prepare(batch)
        info = dict(self.aux_update(batches))
        batches = self.relabel(batches)
        noise = self.draw_noise(batches)
        info["value_loss"] = _step(self.value_opt, self.value_loss(batches), "value")
        info["actor_loss"] = _step(self.actor_opt, self.actor_loss(batches, noise), "actor")
        info["critic_loss"] = _step(self.critic_opt, self.critic_loss(batches, noise), "critic")
        polyak_update(self.critic_target, self.critic, self.cfg.tau)
        self.updates += 1
        return info


def dara_penalty(classifier: DomainClassifier, obs, act, next_obs, lam: float = 0.1, clip: float = 10.0):
    """lambda * clip(delta_r, -clip, clip)."""
    return lam * classifier.penalty(obs, act, next_obs).clamp(-clip, clip)


def dara_relabel(dataset_src: TransitionBatch, classifier: DomainClassifier, lam: float = 0.1,
                 clip: float = 10.0) -> TransitionBatch:
    """Copy of the source dataset with rewards r - lambda * clip(delta_r, -clip, clip)."""
    dtype = next(classifier.parameters()).dtype
    t = TorchBatch.from_numpy(dataset_src, dtype)
    pen = dara_penalty(classifier, t.obs, t.act, t.next_obs, lam, clip).cpu().numpy()
    rew = (np.asarray(dataset_src.rew, dtype=np.float64) - pen).astype(np.asarray(dataset_src.rew).dtype)
    return TransitionBatch(dataset_src.obs, dataset_src.act, rew, dataset_src.next_obs, dataset_src.done,
                           dataset_src.domain)


class DARA(IQL):
    """IQL on source rewards corrected by a pre-trained, then frozen, classifier pair."""

    name = "DARA"

    def build(self) -> None:
        super().build()
        c = self.cfg
        self.classifier = DomainClassifier(self.obs_dim, self.act_dim, c.classifier_hidden, c.classifier_noise,
                                           c.lr, generator=self.init_gen)

    def build_optimizers(self) -> None:
        super().build_optimizers()
        self.classifier.opt = adam(self.classifier.parameters(), self.cfg.lr)

    def modules(self) -> dict:
        out = super().modules()
        out["classifier"] = self.classifier
        if hasattr(self.classifier, "opt"):
            out["classifier_opt"] = self.classifier.opt
        return out

    def pretrain(self, sample_batch, steps: Optional[int] = None) -> list:
        """Train the classifiers; ``sample_batch()`` returns a fresh DualBatch each call."""
        steps = self.cfg.classifier_pretrain_steps if steps is None else steps
        losses = []
        for _ in range(steps):
            b = self.prepare(sample_batch())
            losses.append(self.classifier.train_step(b["src"], b["tar"], self.gen))
        return losses

    def relabel(self, batches: Batches) -> Batches:
        b = batches["src"]
        if len(b) == 0:
            return batches
        pen = dara_penalty(self.classifier, b.obs, b.act, b.next_obs, self.cfg.dara_lambda, self.cfg.dara_clip)
        return {"src": b.with_rewards(b.rew - pen.to(self.dtype)), "tar": batches["tar"]}


class TD3_BC(SAC):
    """TD3 with target-policy smoothing and delayed actor updates, plus a behaviour-cloning term."""

    name = "TD3_BC"
    bc_nu = 2.5

    def build(self) -> None:
        self.actor = DeterministicPolicy(self.obs_dim, self.act_dim, self.cfg.hidden, self.init_gen)
        self.actor_target = copy.deepcopy(self.actor)
        self.build_critics()

    def modules(self) -> dict:
        out = super().modules()
        out["actor_target"] = self.actor_target
        return out

    @torch.no_grad()
    def act(self, obs, deterministic: bool = True, domain: str = "src") -> np.ndarray:
        o = torch.as_tensor(np.asarray(obs), dtype=self.dtype).unsqueeze(0)
        return self.actor(o)[0].cpu().numpy().astype(np.float32)

    def draw_noise(self, batches: Batches) -> dict:
        return {d: {"next": self.randn(len(batches[d]), self.act_dim)} for d in DOMAINS}

    def next_value(self, b: TorchBatch, nz: dict) -> torch.Tensor:
        c = self.cfg
        smooth = (c.td3_noise * nz["next"]).clamp(-c.td3_noise_clip, c.td3_noise_clip)
        a2 = (self.actor_target(b.next_obs) + smooth).clamp(-1.0, 1.0)
        return self.critic_target(b.next_obs, a2).min(0).values

    def bc_lambda(self, batches: Batches) -> float:
        """nu / mean|min_i Q_i(s, pi(s))| over the mixed batch."""
        fr = domain_fractions(batches)
        m = 0.0
        with torch.no_grad():
            for d in DOMAINS:
                b = batches[d]
                if len(b):
                    m += fr[d] * float(self.critic(b.obs, self.actor(b.obs)).min(0).values.abs().mean())
        return self.bc_nu / max(m, Q_MEAN_FLOOR)

    def actor_loss(self, batches: Batches, noise: dict, lam: Optional[float] = None) -> torch.Tensor:
        """``lam`` is held fixed during the step; computed from the current networks when omitted."""
        fr = domain_fractions(batches)
        lam = self.bc_lambda(batches) if lam is None else lam
        loss = torch.zeros((), dtype=self.dtype)
        for d in DOMAINS:
            b = batches[d]
            if len(b) == 0:
                continue
            pi = self.actor(b.obs)
            q = self.critic(b.obs, pi).min(0).values
            loss = loss + fr[d] * (-lam * q.mean() + ((pi - b.act) ** 2).mean())
        return loss

    def actor_due(self) -> bool:
        return self.updates % self.cfg.policy_delay == 0

    def update(self, batch) -> dict:
        batches = self.prepare(batch)
        noise = self.draw_noise(batches)
        info = {"critic_loss": _step(self.critic_opt, self.critic_loss(batches, noise), "critic")}
        if self.actor_due():
            info["actor_loss"] = _step(self.actor_opt, self.actor_loss(batches, noise), "actor")
            polyak_update(self.critic_target, self.critic, self.cfg.tau)
            polyak_update(self.actor_target, self.actor, self.cfg.tau)
        self.updates += 1
        return info


class BOSA(SAC):
    """Supported value and supported policy optimisation.

    Critic: a push-down on source Q values plus a TD loss restricted to
    transitions whose estimated target-dynamics log-density exceeds ``bosa_eps``.
    The dynamics density is the mean evidence lower bound of a CVAE ensemble
    trained on target data. Actor: SAC objective plus a fixed-multiplier hinge
    on the behaviour-model log-density of the policy's actions.
    """

    name = "BOSA"

    def build(self) -> None:
        super().build()
        c = self.cfg
        self.behavior = CVAE(self.obs_dim, self.act_dim, 2 * self.act_dim, c.cvae_hidden, c.cvae_layers,
                             squash=True, generator=self.init_gen)
        self.dynamics = torch.nn.ModuleList(
            CVAE(self.obs_dim + self.act_dim, self.obs_dim, 2 * self.obs_dim, c.cvae_hidden, c.cvae_layers,
                 squash=False, generator=self.init_gen)
            for _ in range(c.bosa_dynamics_cvaes))

    def build_optimizers(self) -> None:
        super().build_optimizers()
        self.dynamics_opts = [adam(m.parameters(), self.cfg.cvae_lr) for m in self.dynamics]

    def modules(self) -> dict:
        out = super().modules()
        out["dynamics"] = self.dynamics
        for i, opt in enumerate(getattr(self, "dynamics_opts", [])):
            out[f"dynamics_opt{i}"] = opt
        return out

    def pretrain(self, sample_batch, steps: Optional[int] = None) -> dict:
        """Fit the behaviour CVAE on the mixture and each dynamics CVAE on target data."""
        steps = self.cfg.cvae_pretrain_steps if steps is None else steps
        beh, dyn = [], []
        for _ in range(steps):
            b = self.prepare(sample_batch())
            mix = TorchBatch(*(torch.cat([getattr(b["src"], f), getattr(b["tar"], f)])
                               for f in ("obs", "act", "rew", "next_obs", "done")))
            beh.append(self.behavior.train_step(self.behavior_opt, mix.obs, mix.act, self.gen))
            t = b["tar"]
            cond = torch.cat([t.obs, t.act], -1)
            dyn.append(np.mean([m.train_step(opt, cond, t.next_obs - t.obs, self.gen)
                                for m, opt in zip(self.dynamics, self.dynamics_opts)]))
        return {"behavior_loss": beh, "dynamics_loss": dyn}

    def draw_noise(self, batches: Batches) -> dict:
        noise = super().draw_noise(batches)
        for d in DOMAINS:
            n = len(batches[d])
            noise[d]["dyn"] = self.randn(len(self.dynamics), n, self.dynamics[0].latent_dim)
            noise[d]["beh"] = self.randn(n, self.behavior.latent_dim)
        return noise

    @torch.no_grad()
    def dynamics_log_density(self, b: TorchBatch, eps: torch.Tensor) -> torch.Tensor:
        cond = torch.cat([b.obs, b.act], -1)
        delta = b.next_obs - b.obs
        total = torch.zeros(len(b), dtype=self.dtype)
        for m, e in zip(self.dynamics, eps):
            m.require_trained()
            total = total + m.elbo(cond, delta, e)
        return total / len(self.dynamics)

    def support_mask(self, batches: Batches, noise: dict) -> dict:
        mask = {}
        for d in DOMAINS:
            b = batches[d]
            if len(b):
                mask[d] = (self.dynamics_log_density(b, noise[d]["dyn"]) > self.cfg.bosa_eps).to(self.dtype)
        return mask

    def critic_loss(self, batches: Batches, noise: dict) -> torch.Tensor:
        fr = domain_fractions(batches)
        mask = self.support_mask(batches, noise)
        loss = torch.zeros((), dtype=self.dtype)
        src = batches["src"]
        if len(src):
            loss = loss + self.cfg.bosa_value_weight * self.critic(src.obs, src.act).mean(1).sum()
        if all(float(m.sum()) == 0 for m in mask.values()):
            warnings.warn("no transition passed the dynamics-support test; Bellman term skipped", AllMasked,
                          stacklevel=2)
            self.all_masked_steps = getattr(self, "all_masked_steps", 0) + 1
            return loss
        for d in DOMAINS:
            b = batches[d]
            if len(b) == 0:
                continue
            res = self.td_errors(b, noise[d]) * mask[d]
            scale = fr[d] * (self.cfg.bosa_transition_coef if d == "src" else 1.0)
            loss = loss + scale * res.mean(1).sum()
        return loss

    def actor_loss(self, batches: Batches, noise: dict) -> torch.Tensor:
        fr = domain_fractions(batches)
        sac = torch.zeros((), dtype=self.dtype)
        support = torch.zeros((), dtype=self.dtype)
        self.behavior.require_trained()
        for d in DOMAINS:
            b = batches[d]
            if len(b) == 0:
                continue
            a, logp = self.actor.rsample(b.obs, noise[d]["pi"])
            sac = sac + fr[d] * (self.cfg.alpha * logp - self.actor_q(b.obs, a)).mean()
            support = support + fr[d] * self.behavior.elbo(b.obs, a, noise[d]["beh"]).mean()
        return sac + self.cfg.bosa_policy_coef * torch.relu(self.cfg.bosa_eps_policy - support)

    def aux_update(self, batches: Batches) -> dict:
        return {}


def iql_update(agent: IQL, batch) -> dict:
    return agent.update(batch)


def td3bc_update(agent: TD3_BC, batch) -> dict:
    return agent.update(batch)


def bosa_update(agent: BOSA, batch) -> dict:
    return agent.update(batch)
