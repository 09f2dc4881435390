"""Networks, stochastic policies, target tracking, the CVAE, checkpoints and a gradient checker."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CVAEUntrained, NonFiniteLoss, ShapeMismatch

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_2 = math.log(2.0)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TorchBatch:
    """Tensors of one domain's transitions."""

    obs: torch.Tensor
    act: torch.Tensor
    rew: torch.Tensor
    next_obs: torch.Tensor
    done: torch.Tensor

    def __len__(self) -> int:
        return self.rew.shape[0]

    @classmethod
    def from_numpy(cls, b, dtype: torch.dtype = torch.float32) -> "TorchBatch":
        def t(x):
            return torch.as_tensor(np.asarray(x), dtype=dtype)

        return cls(t(b.obs), t(b.act), t(b.rew), t(b.next_obs), t(b.done))

    def with_rewards(self, rew: torch.Tensor) -> "TorchBatch":
        return TorchBatch(self.obs, self.act, rew, self.next_obs, self.done)

    def to(self, dtype: torch.dtype) -> "TorchBatch":
        return TorchBatch(*(x.to(dtype) for x in (self.obs, self.act, self.rew, self.next_obs, self.done)))


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) % (2**63))


def adam(params: Iterable[nn.Parameter], lr: float = 3e-4) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _uniform(shape, bound: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    return (torch.rand(shape, generator=generator) * 2.0 - 1.0) * bound


# ---------------------------------------------------------------------------
# ensembles of MLPs, evaluated as one batched matmul per layer
# ---------------------------------------------------------------------------


class EnsembleLinear(nn.Module):
    def __init__(self, members: int, in_dim: int, out_dim: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = nn.Parameter(_uniform((members, in_dim, out_dim), bound, generator))
        self.bias = nn.Parameter(_uniform((members, 1, out_dim), bound, generator))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.baddbmm(self.bias, x, self.weight)


class EnsembleLayerNorm(nn.Module):
    def __init__(self, members: int, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(members, 1, dim))
        self.bias = nn.Parameter(torch.zeros(members, 1, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, x.shape[-1:], eps=self.eps) * self.weight + self.bias


class EnsembleMLP(nn.Module):
    """``members`` independent ReLU MLPs. Input [B, in] is shared by all members; output is [members, B, out]."""

    def __init__(
        self,
        members: int,
        in_dim: int,
        out_dim: int,
        hidden: Sequence[int] = (256, 256),
        layer_norm: bool = False,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.members = members
        self.in_dim = in_dim
        self.out_dim = out_dim
        layers: list[nn.Module] = []
        prev = in_dim
        for h in hidden:
            layers.append(EnsembleLinear(members, prev, h, generator))
            if layer_norm:
                layers.append(EnsembleLayerNorm(members, h))
            layers.append(nn.ReLU())
            prev = h
        layers.append(EnsembleLinear(members, prev, out_dim, generator))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(0).expand(self.members, -1, -1)
        return self.net(x)


class MLP(EnsembleMLP):
    """Single network with the same initialisation scheme; maps [B, in] to [B, out]."""

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int] = (256, 256), layer_norm: bool = False,
                 generator: Optional[torch.Generator] = None):
        super().__init__(1, in_dim, out_dim, hidden, layer_norm, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x)[0]


class Critic(nn.Module):
    """Q ensemble over concatenated (state, action); returns [members, B]."""

    def __init__(self, obs_dim: int, act_dim: int, members: int = 2, hidden: Sequence[int] = (256, 256),
                 layer_norm: bool = False, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.net = EnsembleMLP(members, obs_dim + act_dim, 1, hidden, layer_norm, generator)

    @property
    def members(self) -> int:
        return self.net.members

    def forward(self, obs: torch.Tensor, act: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([obs, act], dim=-1)).squeeze(-1)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


def tanh_log_det(u: torch.Tensor) -> torch.Tensor:
    """log(1 - tanh(u)^2), computed without cancellation."""
    return 2.0 * (LOG_2 - u - F.softplus(-2.0 * u))


def gaussian_log_prob(x: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    z = (x - mean) * torch.exp(-log_std)
    return (-0.5 * z * z - log_std - LOG_SQRT_2PI).sum(-1)


def _squash(u: torch.Tensor) -> torch.Tensor:
    # float32 tanh saturates to exactly +-1 for |u| > 9; keep samples strictly inside the box
    bound = 1.0 - torch.finfo(u.dtype).eps
    return torch.tanh(u).clamp(-bound, bound)


class GaussianPolicy(nn.Module):
    """Tanh-squashed diagonal Gaussian with a log-std head clamped to [-20, 2]."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256),
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.act_dim = act_dim
        self.net = MLP(obs_dim, 2 * act_dim, hidden, generator=generator)

    def params(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, log_std = self.net(obs).chunk(2, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def rsample(self, obs: torch.Tensor, eps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Reparameterised sample from given standard-normal noise; returns (action, log-density)."""
        mean, log_std = self.params(obs)
        u = mean + torch.exp(log_std) * eps
        logp = gaussian_log_prob(u, mean, log_std) - tanh_log_det(u).sum(-1)
        return _squash(u), logp

    def log_prob(self, obs: torch.Tensor, act: torch.Tensor) -> torch.Tensor:
        bound = 1.0 - 1e-6
        u = torch.atanh(act.clamp(-bound, bound))
        mean, log_std = self.params(obs)
        return gaussian_log_prob(u, mean, log_std) - tanh_log_det(u).sum(-1)

    def mode(self, obs: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.params(obs)[0])


class BoundedGaussianPolicy(nn.Module):
    """Unsquashed Gaussian with a tanh-bounded mean; log-likelihood of boundary actions stays finite."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256),
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.act_dim = act_dim
        self.net = MLP(obs_dim, act_dim, hidden, generator=generator)
        self.log_std = nn.Parameter(torch.zeros(act_dim))

    def params(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean = torch.tanh(self.net(obs))
        return mean, self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).expand_as(mean)

    def log_prob(self, obs: torch.Tensor, act: torch.Tensor) -> torch.Tensor:
        mean, log_std = self.params(obs)
        return gaussian_log_prob(act, mean, log_std)

    def rsample(self, obs: torch.Tensor, eps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, log_std = self.params(obs)
        x = mean + torch.exp(log_std) * eps
        return x.clamp(-1.0, 1.0), gaussian_log_prob(x, mean, log_std)

    def mode(self, obs: torch.Tensor) -> torch.Tensor:
        return self.params(obs)[0]


class DeterministicPolicy(nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256),
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.act_dim = act_dim
        self.net = MLP(obs_dim, act_dim, hidden, generator=generator)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(obs))

    def mode(self, obs: torch.Tensor) -> torch.Tensor:
        return self(obs)


def sample_action(policy: GaussianPolicy, obs, generator: torch.Generator, deterministic: bool = False):
    """Draw (action, log-density) for a batch of states. Deterministic mode returns the squashed mean."""
    obs = torch.as_tensor(obs, dtype=next(policy.parameters()).dtype)
    squeeze = obs.dim() == 1
    if squeeze:
        obs = obs.unsqueeze(0)
    with torch.no_grad():
        if deterministic:
            a, logp = policy.mode(obs), None
        else:
            eps = torch.randn((obs.shape[0], policy.act_dim), generator=generator, dtype=obs.dtype)
            a, logp = policy.rsample(obs, eps)
    if squeeze:
        return a[0], (None if logp is None else logp[0])
    return a, logp


# ---------------------------------------------------------------------------
# conditional VAE (behaviour policy for MCQ/BOSA, transition density for BOSA)
# ---------------------------------------------------------------------------


class CVAE(nn.Module):
    """Gaussian-decoder CVAE over x given a condition c.

    The decoder predicts a mean and a log-std, so the evidence lower bound is a
    usable log-density estimate. With ``squash`` the decoder mean is tanh-bounded
    (action models).
    """

    def __init__(self, cond_dim: int, x_dim: int, latent_dim: Optional[int] = None, hidden: int = 750,
                 layers: int = 3, squash: bool = True, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.x_dim = x_dim
        self.latent_dim = latent_dim or 2 * x_dim
        self.squash = squash
        self.encoder = MLP(cond_dim + x_dim, 2 * self.latent_dim, (hidden,) * layers, generator=generator)
        self.decoder = MLP(cond_dim + self.latent_dim, 2 * x_dim, (hidden,) * layers, generator=generator)
        self.register_buffer("train_steps", torch.zeros((), dtype=torch.int64))

    def encode(self, c, x):
        mu, log_std = self.encoder(torch.cat([c, x], -1)).chunk(2, -1)
        return mu, log_std.clamp(-4.0, 15.0)

    def decode(self, c, z):
        mean, log_std = self.decoder(torch.cat([c, z], -1)).chunk(2, -1)
        if self.squash:
            mean = torch.tanh(mean)
        return mean, log_std.clamp(-10.0, 2.0)

    def terms(self, c, x, eps) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-sample (negative reconstruction log-likelihood, KL to the unit prior)."""
        mu, log_std = self.encode(c, x)
        z = mu + torch.exp(log_std) * eps
        mean, dec_log_std = self.decode(c, z)
        nll = -gaussian_log_prob(x, mean, dec_log_std)
        kl = 0.5 * (mu * mu + torch.exp(2 * log_std) - 1.0 - 2 * log_std).sum(-1)
        return nll, kl

    def loss(self, c, x, eps) -> torch.Tensor:
        nll, kl = self.terms(c, x, eps)
        return (nll + kl).mean()

    def elbo(self, c, x, eps) -> torch.Tensor:
        nll, kl = self.terms(c, x, eps)
        return -(nll + kl)

    def log_density(self, c, x, generator: torch.Generator, samples: int = 1) -> torch.Tensor:
        """Monte-Carlo evidence lower bound, used as log p(x | c)."""
        self.require_trained()
        total = torch.zeros(x.shape[0], dtype=x.dtype)
        for _ in range(samples):
            eps = torch.randn((x.shape[0], self.latent_dim), generator=generator, dtype=x.dtype)
            total = total + self.elbo(c, x, eps)
        return total / samples

    def sample(self, c, generator: torch.Generator, clip: float = 0.5) -> torch.Tensor:
        """Decoder mean at a prior draw truncated to [-clip, clip]."""
        self.require_trained()
        z = torch.randn((c.shape[0], self.latent_dim), generator=generator, dtype=c.dtype).clamp(-clip, clip)
        return self.decode(c, z)[0]

    def require_trained(self) -> None:
        if int(self.train_steps) == 0:
            raise CVAEUntrained("CVAE has not been trained")

    def train_step(self, opt: torch.optim.Optimizer, c, x, generator: torch.Generator) -> float:
        eps = torch.randn((x.shape[0], self.latent_dim), generator=generator, dtype=x.dtype)
        loss = self.loss(c, x, eps)
        check_finite(loss, "cvae")
        opt.zero_grad()
        loss.backward()
        opt.step()
        self.train_steps += 1
        return loss.item()


# ---------------------------------------------------------------------------
# target tracking, checks, checkpoints
# ---------------------------------------------------------------------------


def _as_list(params) -> list[torch.Tensor]:
    if isinstance(params, nn.Module):
        return list(params.parameters())
    return list(params)


@torch.no_grad()
def polyak_update(target_params, online_params, rate: float) -> None:
    """target <- (1 - rate) * target + rate * online, in place."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"polyak rate must lie in [0, 1], got {rate}")
    tgt = _as_list(target_params)
    src = _as_list(online_params)
    if len(tgt) != len(src) or any(t.shape != s.shape for t, s in zip(tgt, src)):
        raise ShapeMismatch("target and online parameters differ in shape")
    for t, s in zip(tgt, src):
        t.lerp_(s, rate)


def check_finite(loss: torch.Tensor, name: str) -> None:
    if not torch.isfinite(loss).all():
        raise NonFiniteLoss(f"{name} loss is not finite: {loss.detach().cpu().numpy()}")


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    kinks: int


def grad_check_detailed(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], epsilon: float = 1e-4,
                        floor: float = 1e-6, kink_tol: float = 1e-2) -> GradCheck:
    """Compare autograd gradients with central differences, element by element.

    Elements whose one-sided slopes disagree by more than ``kink_tol`` (relative)
    sit on a non-differentiable point (ReLU, indicator, clamp) and are excluded.
    """
    params = list(params)
    loss = loss_fn()
    check_finite(loss, "grad_check")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst, checked, kinks = 0.0, 0, 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = loss_fn().item()
                flat[i] = orig - epsilon
                f_minus = loss_fn().item()
                flat[i] = orig
                f0 = loss_fn().item()
                if not all(map(math.isfinite, (f_plus, f_minus, f0))):
                    raise NonFiniteLoss("loss became non-finite during finite differencing")
                fwd = (f_plus - f0) / epsilon
                bwd = (f0 - f_minus) / epsilon
                scale = max(abs(fwd), abs(bwd), floor)
                if abs(fwd - bwd) > kink_tol * scale and abs(fwd - bwd) > 1e3 * epsilon:
                    kinks += 1
                    continue
                numeric = (f_plus - f_minus) / (2 * epsilon)
                analytic = gflat[i].item()
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                worst = max(worst, err)
                checked += 1
    return GradCheck(worst, checked, kinks)


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], epsilon: float = 1e-4) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return grad_check_detailed(loss_fn, params, epsilon).max_rel_error


Checkpointable = Union[nn.Module, torch.optim.Optimizer, torch.Generator]


def _flatten_state(name: str, obj: Checkpointable, out: dict, meta: dict) -> None:
    if isinstance(obj, nn.Module):
        for key, t in obj.state_dict().items():
            out[f"{name}/{key}"] = t.detach().cpu().numpy()
    elif isinstance(obj, torch.optim.Optimizer):
        sd = obj.state_dict()
        for idx, st in sd["state"].items():
            for key, t in st.items():
                out[f"{name}/state/{idx}/{key}"] = torch.as_tensor(t).cpu().numpy()
        meta[name] = sd["param_groups"]
    else:
        out[f"{name}/rng"] = obj.get_state().numpy()


def save_checkpoint(path: Union[str, Path], objects: dict, step: int, extra: Optional[dict] = None) -> None:
    """Write named parameter arrays, optimiser moments, RNG states and the step counter to one .npz."""
    arrays: dict = {}
    meta: dict = {"step": int(step), "extra": extra or {}, "param_groups": {}}
    for name, obj in objects.items():
        _flatten_state(name, obj, arrays, meta["param_groups"])
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: Union[str, Path], objects: dict) -> tuple[int, dict]:
    """Restore objects in place; returns (step, extra)."""
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    for name, obj in objects.items():
        prefix = f"{name}/"
        if isinstance(obj, nn.Module):
            sd = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
            obj.load_state_dict(sd)
        elif isinstance(obj, torch.optim.Optimizer):
            state: dict = {}
            for k, v in arrays.items():
                if k.startswith(prefix + "state/"):
                    _, _, idx, key = k.split("/", 3)
                    state.setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
            obj.load_state_dict({"state": state, "param_groups": meta["param_groups"][name]})
        else:
            obj.set_state(torch.from_numpy(arrays[f"{name}/rng"].copy()))
    return meta["step"], meta["extra"]
