"""Small point transformer producing center tokens, two taps and a global vector."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import PointCloud, _coords, fps, knn
from .layers import (ConfigError, Params, check_shapes, init_layer_norm, init_linear, init_mlp,
                     layer_norm, linear, mlp)

PREFIX = "encoder/"


@dataclass(frozen=True)
class EncoderConfig:
    centers: int = 128
    k: int = 32
    width: int = 128
    depth: int = 4
    heads: int = 4
    taps: tuple[int, int] = (2, 4)
    sparse_width: int = 256
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(self.taps))
        if self.width % self.heads:
            raise ConfigError(f"encoder width {self.width} is not divisible by {self.heads} heads")
        if len(self.taps) != 2 or not all(1 <= t <= self.depth for t in self.taps):
            raise ConfigError(f"encoder taps {self.taps} must be two depths in 1..{self.depth}")


@dataclass
class Grouping:
    centers: np.ndarray          # |P1| indices into the cloud
    neighborhoods: np.ndarray    # |P1| x k indices
    relative: np.ndarray         # |P1| x k x 3, offsets from each center
    center_xyz: np.ndarray       # |P1| x 3


@dataclass
class EncoderOutput:
    p1_indices: np.ndarray
    tokens: Tensor
    h4: Tensor
    h8: Tensor
    f_sparse: Tensor


def group(cloud, cfg: EncoderConfig, start: int = 0) -> Grouping:
    pts = _coords(cloud)
    centers = fps(pts, cfg.centers, start)
    nbrs, _ = knn(pts[centers], pts, cfg.k)
    rel = pts[nbrs] - pts[centers][:, None, :]
    return Grouping(centers, nbrs, rel, pts[centers])


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    w, hidden = cfg.width, cfg.width * cfg.mlp_ratio
    shapes = {
        "encoder/embed/fc1/w": (3, w), "encoder/embed/fc1/b": (1, w),
        "encoder/embed/fc2/w": (w, w), "encoder/embed/fc2/b": (1, w),
        "encoder/pos/fc1/w": (3, w), "encoder/pos/fc1/b": (1, w),
        "encoder/pos/fc2/w": (w, w), "encoder/pos/fc2/b": (1, w),
        "encoder/norm/g": (1, w), "encoder/norm/b": (1, w),
        "encoder/sparse/w": (w, cfg.sparse_width), "encoder/sparse/b": (1, cfg.sparse_width),
    }
    for i in range(cfg.depth):
        b = f"encoder/block{i}"
        for ln in ("ln1", "ln2"):
            shapes[f"{b}/{ln}/g"] = (1, w)
            shapes[f"{b}/{ln}/b"] = (1, w)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{b}/attn/{proj}/w"] = (w, w)
            if proj != "k":
                shapes[f"{b}/attn/{proj}/b"] = (1, w)
        shapes[f"{b}/mlp/fc1/w"] = (w, hidden)
        shapes[f"{b}/mlp/fc1/b"] = (1, hidden)
        shapes[f"{b}/mlp/fc2/w"] = (hidden, w)
        shapes[f"{b}/mlp/fc2/b"] = (1, w)
    return shapes


def init_params(cfg: EncoderConfig, seed: int | None = None) -> Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    w, hidden = cfg.width, cfg.width * cfg.mlp_ratio
    p: Params = {}
    init_mlp(p, "encoder/embed", 3, w, w, rng)
    init_mlp(p, "encoder/pos", 3, w, w, rng)
    for i in range(cfg.depth):
        b = f"encoder/block{i}"
        init_layer_norm(p, f"{b}/ln1", w)
        for proj in ("q", "k", "v", "o"):
            # softmax ignores a constant shift of the logits, so keys get no bias
            init_linear(p, f"{b}/attn/{proj}", w, w, rng, bias=proj != "k")
        init_layer_norm(p, f"{b}/ln2", w)
        init_mlp(p, f"{b}/mlp", w, hidden, w, rng)
    init_layer_norm(p, "encoder/norm", w)
    init_linear(p, "encoder/sparse", w, cfg.sparse_width, rng)
    return p


def self_attention(x: Tensor, params: Params, name: str, heads: int) -> Tensor:
    t, w = x.shape
    dh = w // heads

    def split(z):
        return ad.transpose(ad.reshape(z, (t, heads, dh)), (1, 0, 2))

    q = split(linear(x, params, f"{name}/q"))
    k = split(linear(x, params, f"{name}/k"))
    v = split(linear(x, params, f"{name}/v"))
    out, _ = ad.attention(q, k, v, 1.0 / math.sqrt(dh))
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (t, w))
    return linear(out, params, f"{name}/o")


def block(x: Tensor, params: Params, name: str, heads: int) -> Tensor:
    x = x + self_attention(layer_norm(x, params, f"{name}/ln1"), params, f"{name}/attn", heads)
    return x + mlp(layer_norm(x, params, f"{name}/ln2"), params, f"{name}/mlp")


def encode(cloud, cfg: EncoderConfig, params: Params, start: int = 0,
           grouping: Grouping | None = None) -> EncoderOutput:
    """Tokens for |P1| FPS centers plus the two tapped intermediates and f_sparse.

    Each center is embedded by a shared point-wise MLP over its neighbourhood
    offsets, max-pooled, plus an MLP embedding of the center position.
    f_sparse is a linear map of the mean of the final tokens.
    """
    check_shapes(params, param_shapes(cfg), "encoder")
    if grouping is None:
        grouping = group(cloud, cfg, start)
    m, k = grouping.neighborhoods.shape
    rel = ad.Tensor(grouping.relative.reshape(m * k, 3))
    local = mlp(rel, params, "encoder/embed")
    x = ad.max_(ad.reshape(local, (m, k, cfg.width)), axis=1)
    x = x + mlp(ad.Tensor(grouping.center_xyz), params, "encoder/pos")
    taps: dict[int, Tensor] = {}
    for i in range(cfg.depth):
        x = block(x, params, f"encoder/block{i}", cfg.heads)
        taps[i + 1] = x
    tokens = layer_norm(x, params, "encoder/norm")
    f_sparse = linear(ad.mean(tokens, axis=0, keepdims=True), params, "encoder/sparse")
    return EncoderOutput(grouping.centers, tokens, taps[cfg.taps[0]], taps[cfg.taps[1]], f_sparse)
