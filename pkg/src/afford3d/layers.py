"""Parameter initialisation and the handful of layers every module reuses.

Parameters live in flat ``{name: Tensor}`` dicts. Names are slash-separated
(``encoder/block0/attn/wq``) and double as checkpoint entry names.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


class ConfigError(ValueError):
    """Parameters or inputs do not match the configured shapes."""


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_linear(params: Params, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, bias: bool = True) -> None:
    bound = xavier_bound(fan_in, fan_out)
    params[f"{name}/w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                                 requires_grad=True, name=f"{name}/w")
    if bias:
        params[f"{name}/b"] = Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"{name}/b")


def init_layer_norm(params: Params, name: str, width: int) -> None:
    params[f"{name}/g"] = Tensor(np.ones((1, width)), requires_grad=True, name=f"{name}/g")
    params[f"{name}/b"] = Tensor(np.zeros((1, width)), requires_grad=True, name=f"{name}/b")


def linear(x, params: Params, name: str) -> Tensor:
    w = params[f"{name}/w"]
    if x.shape[-1] != w.shape[0]:
        raise ConfigError(f"{name}: input width {x.shape[-1]} does not match weight {w.shape}")
    out = ad.matmul(x, w)
    b = params.get(f"{name}/b")
    return out + b if b is not None else out


def layer_norm(x, params: Params, name: str, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm(x, params[f"{name}/g"], params[f"{name}/b"], eps)


def mlp(x, params: Params, name: str, activation=ad.gelu) -> Tensor:
    """Two linear layers with an activation between them."""
    return linear(activation(linear(x, params, f"{name}/fc1")), params, f"{name}/fc2")


def init_mlp(params: Params, name: str, fan_in: int, hidden: int, fan_out: int,
             rng: np.random.Generator) -> None:
    init_linear(params, f"{name}/fc1", fan_in, hidden, rng)
    init_linear(params, f"{name}/fc2", hidden, fan_out, rng)


def check_shapes(params: Params, expected: dict[str, tuple[int, ...]], prefix: str) -> None:
    """Raise ConfigError unless every expected parameter exists with the expected shape."""
    for name, shape in expected.items():
        if name not in params:
            raise ConfigError(f"{prefix}: missing parameter {name}")
        if params[name].shape != tuple(shape):
            raise ConfigError(f"{prefix}: parameter {name} has shape {params[name].shape}, "
                              f"expected {tuple(shape)}")


def subset(params: Params, prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix)}
