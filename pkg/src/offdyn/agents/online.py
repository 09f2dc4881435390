"""Online-Online learners: SAC_IW, DARC, VGDF and PAR (SAC itself lives in ``base``)."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch

from ..approx import MLP, EnsembleMLP, GaussianPolicy, TorchBatch, adam, check_finite, gaussian_log_prob
from ..classifiers import DomainClassifier
from ..errors import EnsembleUntrained
from .base import DOMAINS, SAC, Batches, domain_fractions


class ClassifierAgent(SAC):
    """SAC plus a domain-classifier pair trained one step per agent update."""

    def build(self) -> None:
        super().build()
        c = self.cfg
        self.classifier = DomainClassifier(self.obs_dim, self.act_dim, c.classifier_hidden, c.classifier_noise,
                                           c.lr, generator=self.init_gen)

    def build_optimizers(self) -> None:
        super().build_optimizers()
        # the classifier owns its optimiser; rebuild it after the dtype cast
        self.classifier.opt = adam(self.classifier.parameters(), self.cfg.lr)

    def modules(self) -> dict:
        out = super().modules()
        out["classifier"] = self.classifier
        if hasattr(self.classifier, "opt"):
            out["classifier_opt"] = self.classifier.opt
        return out

    def aux_update(self, batches: Batches) -> dict:
        info = super().aux_update(batches)
        if len(batches["src"]) and len(batches["tar"]):
            info["classifier_loss"] = self.classifier.train_step(batches["src"], batches["tar"], self.gen)
        return info

    def source_penalty(self, b: TorchBatch) -> torch.Tensor:
        return self.classifier.penalty(b.obs, b.act, b.next_obs).to(self.dtype)

    def source_weight(self, b: TorchBatch) -> torch.Tensor:
        return self.classifier.importance_weight(b.obs, b.act, b.next_obs).to(self.dtype)


class SAC_IW(ClassifierAgent):
    """Source TD residuals scaled per sample by the clipped importance weight."""

    name = "SAC_IW"

    def td_weights(self, batches: Batches, noise: dict) -> dict:
        w = {d: None for d in DOMAINS}
        if len(batches["src"]):
            w["src"] = self.source_weight(batches["src"])
        return w


class DARC(ClassifierAgent):
    """Source rewards replaced by r - delta_r."""

    name = "DARC"

    def relabel(self, batches: Batches) -> Batches:
        b = batches["src"]
        if len(b) == 0:
            return batches
        return {"src": b.with_rewards(b.rew - self.source_penalty(b)), "tar": batches["tar"]}


def vgdf_select(log_lik: torch.Tensor, xi: float) -> torch.Tensor:
    """Boolean mask of the ceil(xi% * n) highest likelihoods; ties go to the lowest batch index."""
    n = log_lik.shape[0]
    k = math.ceil(xi * n / 100.0)
    order = torch.argsort(-log_lik, stable=True)
    mask = torch.zeros(n, dtype=torch.bool)
    mask[order[:k]] = True
    return mask


class VGDF(SAC):
    """Source samples shared only when their value is likely under target-dynamics rollouts."""

    name = "VGDF"

    def build(self) -> None:
        super().build()
        c = self.cfg
        self.dynamics = EnsembleMLP(c.ensemble_size, self.obs_dim + self.act_dim, 2 * self.obs_dim,
                                    c.dynamics_hidden, generator=self.init_gen)
        self.explorer = GaussianPolicy(self.obs_dim, self.act_dim, c.hidden, self.init_gen)
        self.dynamics_steps = 0

    def build_optimizers(self) -> None:
        super().build_optimizers()
        self.dynamics_opt = adam(self.dynamics.parameters(), self.cfg.lr)
        self.explorer_opt = adam(self.explorer.parameters(), self.cfg.lr)

    def modules(self) -> dict:
        out = super().modules()
        out.update(dynamics=self.dynamics, explorer=self.explorer)
        if hasattr(self, "dynamics_opt"):
            out.update(dynamics_opt=self.dynamics_opt, explorer_opt=self.explorer_opt)
        return out

    @torch.no_grad()
    def act(self, obs, deterministic: bool = False, domain: str = "src") -> np.ndarray:
        if domain != "tar" or deterministic:
            return super().act(obs, deterministic, domain)
        o = torch.as_tensor(np.asarray(obs), dtype=self.dtype).unsqueeze(0)
        a = self.explorer.rsample(o, self.randn(1, self.act_dim))[0]
        return a[0].cpu().numpy().astype(np.float32)

    # dynamics ensemble: Gaussian over the next state, mean = s + delta
    def predict(self, obs: torch.Tensor, act: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.dynamics(torch.cat([obs, act], -1))
        delta, log_std = out.chunk(2, -1)
        return obs.unsqueeze(0) + delta, log_std.clamp(-10.0, 2.0)

    def dynamics_loss(self, b: TorchBatch) -> torch.Tensor:
        mean, log_std = self.predict(b.obs, b.act)
        return -gaussian_log_prob(b.next_obs.unsqueeze(0), mean, log_std).mean(1).sum()

    def aux_update(self, batches: Batches) -> dict:
        info = super().aux_update(batches)
        b = batches["tar"]
        if len(b):
            loss = self.dynamics_loss(b)
            check_finite(loss, "dynamics")
            self.dynamics_opt.zero_grad()
            loss.backward()
            self.dynamics_opt.step()
            self.dynamics_steps += 1
            info["dynamics_loss"] = loss.item()
        return info

    def draw_noise(self, batches: Batches) -> dict:
        noise = super().draw_noise(batches)
        n = len(batches["src"])
        noise["src"]["fvp"] = self.randn(self.cfg.ensemble_size, n, self.act_dim)
        noise["src"]["fvp_real"] = self.randn(n, self.act_dim)
        return noise

    @torch.no_grad()
    def fvp_log_likelihood(self, b: TorchBatch, eps_models: torch.Tensor, eps_real: torch.Tensor) -> torch.Tensor:
        """log N(V(s'_real); mean_i V(s'_i), var_i V(s'_i)) with s'_i the ensemble-mean predictions."""
        if self.dynamics_steps == 0:
            raise EnsembleUntrained("dynamics ensemble has no training steps")
        m = self.cfg.ensemble_size
        pred, _ = self.predict(b.obs, b.act)  # [m, n, obs]
        flat = pred.reshape(-1, self.obs_dim)
        a_pred = self.actor.rsample(flat, eps_models.reshape(-1, self.act_dim))[0]
        values = self.critic_target(flat, a_pred).min(0).values.reshape(m, -1)
        mu = values.mean(0)
        std = values.std(0, unbiased=False).clamp_min(1e-6)
        a_real = self.actor.rsample(b.next_obs, eps_real)[0]
        v_real = self.critic_target(b.next_obs, a_real).min(0).values
        z = (v_real - mu) / std
        return -0.5 * z * z - torch.log(std)

    def td_weights(self, batches: Batches, noise: dict) -> dict:
        w = {d: None for d in DOMAINS}
        b = batches["src"]
        if len(b):
            ll = self.fvp_log_likelihood(b, noise["src"]["fvp"], noise["src"]["fvp_real"])
            w["src"] = vgdf_select(ll, self.cfg.xi).to(self.dtype)
        return w

    def explorer_loss(self, batches: Batches, noise: dict) -> torch.Tensor:
        """SAC actor loss against the optimistic value mean_i Q_i + std_i Q_i."""
        fr = domain_fractions(batches)
        loss = torch.zeros((), dtype=self.dtype)
        for d in DOMAINS:
            b = batches[d]
            if len(b) == 0:
                continue
            a, logp = self.explorer.rsample(b.obs, noise[d]["pi"])
            q = self.critic(b.obs, a)
            optimistic = q.mean(0) + q.std(0, unbiased=False)
            loss = loss + fr[d] * (self.cfg.alpha * logp - optimistic).mean()
        return loss

    def after_actor(self, batches: Batches, noise: dict) -> None:
        loss = self.explorer_loss(batches, noise)
        check_finite(loss, "explorer")
        self.explorer_opt.zero_grad()
        loss.backward()
        self.explorer_opt.step()


class PAR(SAC):
    """Source rewards penalised by the target-trained representation mismatch."""

    name = "PAR"

    def build(self) -> None:
        super().build()
        c = self.cfg
        self.state_encoder = MLP(self.obs_dim, c.rep_dim, c.encoder_hidden, generator=self.init_gen)
        self.sa_encoder = MLP(c.rep_dim + self.act_dim, c.rep_dim, c.encoder_hidden, generator=self.init_gen)

    def build_optimizers(self) -> None:
        super().build_optimizers()
        self.encoder_opt = adam(list(self.state_encoder.parameters()) + list(self.sa_encoder.parameters()),
                                self.cfg.lr)

    def modules(self) -> dict:
        out = super().modules()
        out.update(state_encoder=self.state_encoder, sa_encoder=self.sa_encoder)
        if hasattr(self, "encoder_opt"):
            out["encoder_opt"] = self.encoder_opt
        return out

    def mismatch(self, b: TorchBatch, stop_gradient: bool = True) -> torch.Tensor:
        """||g(f(s), a) - f(s')||^2 per sample."""
        pred = self.sa_encoder(torch.cat([self.state_encoder(b.obs), b.act], -1))
        nxt = self.state_encoder(b.next_obs)
        if stop_gradient:
            nxt = nxt.detach()
        return ((pred - nxt) ** 2).sum(-1)

    def encoder_loss(self, b: TorchBatch) -> torch.Tensor:
        return self.mismatch(b).mean()

    def aux_update(self, batches: Batches) -> dict:
        info = super().aux_update(batches)
        b = batches["tar"]
        if len(b):
            loss = self.encoder_loss(b)
            check_finite(loss, "encoder")
            self.encoder_opt.zero_grad()
            loss.backward()
            self.encoder_opt.step()
            info["encoder_loss"] = loss.item()
        return info

    def source_penalty(self, b: TorchBatch) -> torch.Tensor:
        with torch.no_grad():
            return self.cfg.par_beta * self.mismatch(b)

    def relabel(self, batches: Batches) -> Batches:
        b = batches["src"]
        if len(b) == 0:
            return batches
        return {"src": b.with_rewards(b.rew - self.source_penalty(b)), "tar": batches["tar"]}


def sac_iw_update(agent: SAC_IW, batch) -> dict:
    return agent.update(batch)


def darc_update(agent: DARC, batch) -> dict:
    return agent.update(batch)


def vgdf_update(agent: VGDF, batch) -> dict:
    return agent.update(batch)


def par_update(agent: PAR, batch) -> dict:
    return agent.update(batch)
