"""Learners for the four off-dynamics settings and the registry that maps names to them."""
from __future__ import annotations

from typing import Optional

import torch

from ..errors import IllegalPairing, UnknownAlgorithm
from .base import DOMAINS, SAC, AgentConfig, RegularizerSpec, bc_lambda, sac_update, to_batches
from .hybrid import (
    H2O,
    HYBRID_TABLE,
    RLPD,
    bc_actor_loss,
    compose_hybrid,
    cql_critic_loss,
    h2o_offon_update,
    h2o_onoff_update,
    mcq_pseudo_target,
    rlpd_update,
)
from .offline import BOSA, DARA, IQL, TD3_BC, bosa_update, dara_relabel, expectile_loss, iql_update, td3bc_update
from .online import DARC, PAR, SAC_IW, VGDF, darc_update, par_update, sac_iw_update, vgdf_update, vgdf_select

SETTINGS = ("online-online", "offline-online", "online-offline", "offline-offline")

ALGORITHMS = {
    "online-online": ("SAC", "SAC_IW", "SAC_tune", "DARC", "VGDF", "PAR"),
    "offline-online": ("H2O", "BC_VGDF", "BC_PAR", "BC_SAC", "CQL_SAC", "MCQ_SAC", "RLPD"),
    "online-offline": ("H2O", "PAR_BC", "SAC_BC", "SAC_CQL", "SAC_MCQ"),
    "offline-offline": ("IQL", "TD3_BC", "DARA", "BOSA"),
}

_PLAIN = {"SAC": SAC, "SAC_tune": SAC, "SAC_IW": SAC_IW, "DARC": DARC, "VGDF": VGDF, "PAR": PAR, "RLPD": RLPD,
          "IQL": IQL, "TD3_BC": TD3_BC, "DARA": DARA, "BOSA": BOSA}


def canonical_algo(name: str) -> str:
    """Registry spelling of an algorithm name, accepting any letter case."""
    for algos in ALGORITHMS.values():
        for a in algos:
            if a.lower() == name.lower():
                return a
    raise UnknownAlgorithm(f"unknown algorithm {name!r}")


def check_pairing(algo: str, setting: str) -> str:
    if setting not in ALGORITHMS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    algo = canonical_algo(algo)
    if algo not in ALGORITHMS[setting]:
        raise IllegalPairing(f"{algo} is not implemented for the {setting} setting")
    return algo


def make_agent(algo: str, setting: str, obs_dim: int, act_dim: int, cfg: Optional[AgentConfig] = None,
               seed: int = 0, dtype: torch.dtype = torch.float32) -> SAC:
    algo = check_pairing(algo, setting)
    cfg = cfg or AgentConfig()
    if algo == "H2O":
        variant = "offon" if setting == "offline-online" else "onoff"
        return H2O(obs_dim, act_dim, cfg, seed, variant=variant, dtype=dtype)
    if algo in HYBRID_TABLE:
        return compose_hybrid(algo, obs_dim, act_dim, cfg, seed, dtype=dtype)
    agent = _PLAIN[algo](obs_dim, act_dim, cfg, seed, dtype=dtype)
    agent.name = algo
    return agent


__all__ = [
    "ALGORITHMS", "AgentConfig", "BOSA", "DARA", "DARC", "DOMAINS", "H2O", "HYBRID_TABLE", "IQL", "PAR", "RLPD",
    "RegularizerSpec", "SAC", "bc_actor_loss", "cql_critic_loss", "mcq_pseudo_target", "SAC_IW", "SETTINGS", "TD3_BC", "VGDF", "bc_lambda", "bosa_update", "canonical_algo",
    "check_pairing", "compose_hybrid", "dara_relabel", "darc_update", "expectile_loss", "h2o_offon_update",
    "h2o_onoff_update", "iql_update", "make_agent", "par_update", "rlpd_update", "sac_iw_update", "sac_update",
    "td3bc_update", "to_batches", "vgdf_select", "vgdf_update",
]
