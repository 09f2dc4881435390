"""Desk-scale shift environments, the MuJoCo XML emitter and reference returns."""
from .dynamics import BACKEND, Env, EnvState, reset, step
from .params import EnvParams, base_params, make_env, make_env_pair

__all__ = [
    "BACKEND",
    "Env",
    "EnvParams",
    "EnvState",
    "base_params",
    "make_env",
    "make_env_pair",
    "reset",
    "step",
]
