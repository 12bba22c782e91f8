"""Seg-token projection, point-language integration and the mask decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (ConfigError, Params, init_layer_norm, init_linear, init_mlp, layer_norm,
                     linear, mlp)

PREFIX = "fusion/"


@dataclass(frozen=True)
class FusionConfig:
    seg_width: int = 256        # d_l, width of raw seg embeddings
    dense_width: int = 128      # C_d
    sparse_width: int = 256     # C_s
    fused_width: int = 128      # C_f
    ffn_mult: int = 4
    shared_decoder: bool = True
    max_slots: int = 4          # decoder copies when not shared


@dataclass
class SegEmbedding:
    raw: Tensor
    projected: Tensor


@dataclass
class FusionOutput:
    conditioned: Tensor
    af: Tensor
    weights: Tensor


def init_params(cfg: FusionConfig, rng: np.random.Generator | int = 0) -> Params:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    cd = cfg.dense_width
    p: Params = {}
    init_mlp(p, "fusion/proj", cfg.seg_width, cd, cd, rng)
    for name in ("q", "k", "v"):
        init_linear(p, f"fusion/attn/{name}", cd, cd, rng, bias=name != "k")
    init_mlp(p, "fusion/ffn", cd, cfg.ffn_mult * cd, cd, rng)
    init_linear(p, "fusion/sparse", cfg.sparse_width, cd, rng)
    init_layer_norm(p, "fusion/ln", cd)
    init_linear(p, "fusion/fuse", 2 * cd, cfg.fused_width, rng)
    for d in decoder_names(cfg):
        init_mlp(p, d, cfg.fused_width, cfg.fused_width // 2, 1, rng)
    return p


def decoder_names(cfg: FusionConfig) -> list[str]:
    if cfg.shared_decoder:
        return ["fusion/decoder"]
    return [f"fusion/decoder{i}" for i in range(cfg.max_slots)]


def project_seg(h, params: Params) -> Tensor:
    """Map a raw 1 x d_l seg embedding to the dense feature width."""
    h = ad.as_tensor(h)
    w = params["fusion/proj/fc1/w"]
    if h.shape[-1] != w.shape[0]:
        raise ConfigError(f"project_seg: input width {h.shape[-1]}, expected {w.shape[0]}")
    return mlp(h, params, "fusion/proj")


def integrate(f_dense, f_sparse, h_seg, params: Params) -> FusionOutput:
    f_dense, f_sparse, h_seg = ad.as_tensor(f_dense), ad.as_tensor(f_sparse), ad.as_tensor(h_seg)
    if f_dense.shape[0] == 0:
        raise ValueError("integrate: f_dense has no points")
    n, cd = f_dense.shape
    q = linear(h_seg, params, "fusion/attn/q")
    k = linear(f_dense, params, "fusion/attn/k")
    v = linear(f_dense, params, "fusion/attn/v")
    c, weights = ad.attention(q, k, v, 1.0 / math.sqrt(cd))
    c = c + mlp(c, params, "fusion/ffn")
    cond = layer_norm(c + linear(f_sparse, params, "fusion/sparse"), params, "fusion/ln")
    af = linear(ad.concat([f_dense, ad.broadcast_to(cond, (n, cd))], axis=-1), params, "fusion/fuse")
    return FusionOutput(cond, af, weights)


def decode_mask(out: FusionOutput, params: Params, decoder: str = "fusion/decoder") -> Tensor:
    """Per-point scores in (0, 1), shape (N,)."""
    logits = mlp(out.af, params, decoder)
    return ad.reshape(ad.sigmoid(logits), (out.af.shape[0],))


def forward_sequence(f_dense, f_sparse, seg_embeddings, params: Params,
                     cfg: FusionConfig | None = None) -> list[Tensor]:
    """One independent integrate+decode pass per seg embedding, in slot order.

    ``f_dense``/``f_sparse`` may be single tensors shared by every slot or
    per-slot lists (slots bound to different objects).
    """
    if len(seg_embeddings) == 0:
        raise ValueError("forward_sequence: empty seg-token sequence")
    cfg = cfg or FusionConfig()
    names = decoder_names(cfg)
    masks = []
    for i, h in enumerate(seg_embeddings):
        fd = f_dense[i] if isinstance(f_dense, (list, tuple)) else f_dense
        fs = f_sparse[i] if isinstance(f_sparse, (list, tuple)) else f_sparse
        out = integrate(fd, fs, project_seg(h, params), params)
        masks.append(decode_mask(out, params, names[min(i, len(names) - 1)]))
    return masks


def zero_decoder(params: Params, name: str = "fusion/decoder") -> None:
    for suffix in ("fc1/w", "fc1/b", "fc2/w", "fc2/b"):
        params[f"{name}/{suffix}"].data[...] = 0.0
