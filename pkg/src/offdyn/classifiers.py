"""Domain classifiers and the reward penalty / importance weights derived from them."""
from __future__ import annotations

import warnings
from typing import Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .approx import MLP, TorchBatch, adam, check_finite
from .errors import DegenerateBatchWarning, EmptyBatch

PROB_CLAMP = 1e-7
WEIGHT_MIN = 1e-4
WEIGHT_MAX = 1.0


def _log_clamped(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))


def darc_penalty_from_probs(sas_tar, sas_src, sa_tar, sa_src) -> torch.Tensor:
    """-log[q_sas(tar) q_sa(src) / (q_sas(src) q_sa(tar))] with each probability clamped away from 0 and 1."""
    sas_tar, sas_src, sa_tar, sa_src = (torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
                                        for x in (sas_tar, sas_src, sa_tar, sa_src))
    sas_ratio = _log_clamped(sas_tar) - _log_clamped(sas_src)
    sa_ratio = _log_clamped(sa_tar) - _log_clamped(sa_src)
    return -(sas_ratio - sa_ratio)


def weight_from_penalty(delta_r: torch.Tensor) -> torch.Tensor:
    return torch.exp(-delta_r).clamp(WEIGHT_MIN, WEIGHT_MAX)


def normalized_batch_weight(u: torch.Tensor) -> torch.Tensor:
    """Shift scores to be non-negative (subtract the batch minimum) and normalise to sum to one.

    A batch whose scores are all equal carries no ranking; it falls back to
    uniform weights and emits ``DegenerateBatchWarning``.
    """
    if u.numel() == 0:
        raise EmptyBatch("cannot weight an empty batch")
    shifted = u - u.min()
    total = shifted.sum()
    if not total > 0:
        warnings.warn("all batch scores are equal; using uniform weights", DegenerateBatchWarning, stacklevel=2)
        return torch.full_like(u, 1.0 / u.numel())
    return shifted / total


class DomainClassifier(nn.Module):
    """q(target | s, a, s') and q(target | s, a), trained with Gaussian input noise."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256), noise_std: float = 1.0,
                 lr: float = 3e-4, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.noise_std = noise_std
        self.sas = MLP(2 * obs_dim + act_dim, 1, hidden, generator=generator)
        self.sa = MLP(obs_dim + act_dim, 1, hidden, generator=generator)
        self.opt = adam(self.parameters(), lr)
        self.steps = 0

    def logits(self, s, a, s2) -> tuple[torch.Tensor, torch.Tensor]:
        return self.sas(torch.cat([s, a, s2], -1)).squeeze(-1), self.sa(torch.cat([s, a], -1)).squeeze(-1)

    def target_probs(self, s, a, s2) -> tuple[torch.Tensor, torch.Tensor]:
        l_sas, l_sa = self.logits(s, a, s2)
        return torch.sigmoid(l_sas), torch.sigmoid(l_sa)

    def _noisy_logits(self, b: TorchBatch, generator: torch.Generator):
        x = torch.cat([b.obs, b.act, b.next_obs], -1)
        if self.noise_std > 0:
            x = x + self.noise_std * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        d_s, d_a = b.obs.shape[-1], b.act.shape[-1]
        l_sas = self.sas(x).squeeze(-1)
        l_sa = self.sa(x[:, : d_s + d_a]).squeeze(-1)
        return l_sas, l_sa

    def loss(self, src: TorchBatch, tar: TorchBatch, generator: torch.Generator) -> torch.Tensor:
        if len(src) == 0 or len(tar) == 0:
            raise EmptyBatch("classifier training needs transitions from both domains")
        ls_sas, ls_sa = self._noisy_logits(src, generator)
        lt_sas, lt_sa = self._noisy_logits(tar, generator)
        # target labelled 1, source 0
        sas = F.binary_cross_entropy_with_logits(lt_sas, torch.ones_like(lt_sas)) + \
            F.binary_cross_entropy_with_logits(ls_sas, torch.zeros_like(ls_sas))
        sa = F.binary_cross_entropy_with_logits(lt_sa, torch.ones_like(lt_sa)) + \
            F.binary_cross_entropy_with_logits(ls_sa, torch.zeros_like(ls_sa))
        return sas + sa

    def train_step(self, src: TorchBatch, tar: TorchBatch, generator: torch.Generator) -> float:
        loss = self.loss(src, tar, generator)
        check_finite(loss, "classifier")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.steps += 1
        return loss.item()

    @torch.no_grad()
    def penalty(self, s, a, s2) -> torch.Tensor:
        """DARC reward penalty; no input noise at evaluation time."""
        p_sas, p_sa = self.target_probs(s, a, s2)
        return darc_penalty_from_probs(p_sas, 1.0 - p_sas, p_sa, 1.0 - p_sa)

    def importance_weight(self, s, a, s2) -> torch.Tensor:
        return weight_from_penalty(self.penalty(s, a, s2))

    def batch_weight(self, b: TorchBatch) -> torch.Tensor:
        """Normalised per-sample weight from the single-sample log-ratio estimate u = -penalty."""
        if len(b) == 0:
            raise EmptyBatch("cannot weight an empty batch")
        return normalized_batch_weight(-self.penalty(b.obs, b.act, b.next_obs))


def classifier_train_step(c: DomainClassifier, src: TorchBatch, tar: TorchBatch, generator: torch.Generator) -> float:
    return c.train_step(src, tar, generator)


def darc_penalty(c: DomainClassifier, s, a, s2) -> torch.Tensor:
    return c.penalty(s, a, s2)


def importance_weight(c: DomainClassifier, s, a, s2) -> torch.Tensor:
    return c.importance_weight(s, a, s2)


def h2o_batch_weight(c: DomainClassifier, batch_src: TorchBatch) -> torch.Tensor:
    return c.batch_weight(batch_src)
