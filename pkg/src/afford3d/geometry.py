"""Point-cloud kernels: sampling, neighbour search, interpolation, upsampling.

Index-producing kernels (``fps``, ``knn``, ``interpolation_weights``) are plain
numpy and deterministic. ``propagate`` and ``upsample`` run on autodiff
tensors; only their feature inputs and parameters carry gradients, the
geometry is treated as constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ConfigError, Params, init_linear, linear

FP_EPS = 1e-8
COINCIDENT = 1e-12


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray
    channels: Optional[np.ndarray] = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError(f"PointCloud needs an (N>=1, 3) coordinate array, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("PointCloud coordinates must be finite")
        object.__setattr__(self, "coords", coords)
        if self.channels is not None:
            ch = np.asarray(self.channels, dtype=np.float64)
            if ch.ndim != 2 or ch.shape[0] != coords.shape[0]:
                raise ValueError(f"channels shape {ch.shape} does not match {coords.shape[0]} points")
            object.__setattr__(self, "channels", ch)

    def __len__(self) -> int:
        return self.coords.shape[0]


def _coords(x) -> np.ndarray:
    return x.coords if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, computed from explicit differences."""
    out = np.empty((a.shape[0], b.shape[0]))
    step = max(1, 2_000_000 // max(1, 3 * b.shape[0]))
    for s in range(0, a.shape[0], step):
        d = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.einsum("mrk,mrk->mr", d, d)
    return out


def fps(cloud, m: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling; ties go to the lowest index."""
    pts = _coords(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"fps: need 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= start < n:
        raise ValueError(f"fps: start index {start} out of range for N={n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    d = pts - pts[start]
    mind = np.einsum("nk,nk->n", d, d)
    mind[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        d = pts - pts[nxt]
        np.minimum(mind, np.einsum("nk,nk->n", d, d), out=mind)
        mind[nxt] = -1.0
    return chosen


def knn(queries, refs, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest refs per query, ascending squared distance, ties by lowest index."""
    q, r = _coords(queries), _coords(refs)
    if k > r.shape[0]:
        raise ValueError(f"knn: k={k} exceeds the {r.shape[0]} reference points")
    if k < 1:
        raise ValueError("knn: k must be >= 1")
    d2 = sq_dists(q, r)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d2, idx, axis=1)


def interpolation_weights(dst, src, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Inverse squared distance weights over the k nearest sources."""
    src = _coords(src)
    if src.shape[0] < 3:
        raise ValueError(f"propagate: need at least 3 source points, got {src.shape[0]}")
    idx, d2 = knn(dst, src, k)
    w = 1.0 / (d2 + FP_EPS)
    w /= w.sum(axis=1, keepdims=True)
    exact = d2[:, 0] < COINCIDENT
    if np.any(exact):
        w[exact] = 0.0
        w[exact, 0] = 1.0
    return idx, w


def propagate(dst, src, src_feats, weights: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Interpolate ``src_feats`` (R x C) onto destination points (M x C)."""
    src_feats = ad.as_tensor(src_feats)
    src_xyz = _coords(src)
    if src_xyz.shape[0] < 3:
        raise ValueError(f"propagate: need at least 3 source points, got {src_xyz.shape[0]}")
    if src_feats.shape[0] != src_xyz.shape[0]:
        raise ValueError(f"propagate: {src_feats.shape[0]} feature rows for {src_xyz.shape[0]} sources")
    idx, w = weights if weights is not None else interpolation_weights(dst, src_xyz)
    gathered = ad.gather_rows(src_feats, idx)          # M x 3 x C
    return ad.sum_(gathered * w[:, :, None], axis=1)


# ---------------------------------------------------------------- edge upsampling

def init_upsample(params: Params, name: str, c_src: int, c_dst: int, c_proj: int, c_out: int,
                  rng: np.random.Generator, identity: bool = False) -> None:
    init_linear(params, f"{name}/src_proj", c_src, c_proj, rng, bias=False)
    init_linear(params, f"{name}/dst_proj", c_dst, c_proj, rng, bias=False)
    init_linear(params, f"{name}/edge", 2 * c_proj, c_out, rng)
    if identity:
        for side, c_in in (("src_proj", c_src), ("dst_proj", c_dst)):
            params[f"{name}/{side}/w"].data = np.eye(c_in, c_proj)


def upsample(src_xyz, src_feats, dst_xyz, dst_feats, params: Params, name: str, k: int = 8,
             neighbors: np.ndarray | None = None) -> Tensor:
    """Edge-feature upsampling onto the destination points.

    For every destination point the k nearest source points form edges
    ``[P_src(f_nbr) - P_dst(f_ctr) | P_dst(f_ctr)]``, which go through a
    linear layer and GELU and are max-reduced over the neighbourhood.
    """
    src_feats, dst_feats = ad.as_tensor(src_feats), ad.as_tensor(dst_feats)
    if src_feats.shape[0] == 0 or dst_feats.shape[0] == 0:
        raise ValueError("upsample: feature inputs must be non-empty")
    n_src = _coords(src_xyz).shape[0]
    k = min(k, n_src)
    if neighbors is None:
        neighbors, _ = knn(dst_xyz, src_xyz, k)
    ps = linear(src_feats, params, f"{name}/src_proj")
    pd = linear(dst_feats, params, f"{name}/dst_proj")
    w = params[f"{name}/edge/w"]
    cp = ps.shape[1]
    if w.shape[0] != 2 * cp:
        raise ConfigError(f"{name}: edge weight {w.shape} does not match projection width {cp}")
    # [a - c | c] @ [W1; W2] == a @ W1 + c @ (W2 - W1): the neighbour term is
    # computed once per source point instead of once per edge
    w_nbr, w_ctr = w[:cp], w[cp:]
    nbr = ad.gather_rows(ad.matmul(ps, w_nbr), neighbors)          # M x k x C_out
    ctr = ad.matmul(pd, w_ctr - w_nbr) + params[f"{name}/edge/b"]  # M x C_out
    h = ad.gelu(nbr + ad.reshape(ctr, (ctr.shape[0], 1, ctr.shape[1])))
    return ad.max_(h, axis=1)


# ---------------------------------------------------------------- dense feature chain

@dataclass(frozen=True)
class PyramidConfig:
    n2: int = 512
    n3: int = 1024
    fp_k: int = 3
    up_k: int = 8
    width: int = 128          # C_d: width of f1', f2' and f_dense

    def validate(self, n_points: int) -> None:
        if not self.n2 < self.n3:
            raise ValueError(f"pyramid: need n2 < n3, got n2={self.n2}, n3={self.n3}")
        if not self.n3 < n_points:
            raise ValueError(f"pyramid: need n3 < N, got n3={self.n3}, N={n_points}")


@dataclass
class PyramidGeometry:
    """Index tables for one cloud; depends only on coordinates and config."""
    p2: np.ndarray
    p3: np.ndarray
    w_f1: tuple[np.ndarray, np.ndarray]
    w_f2: tuple[np.ndarray, np.ndarray]
    nbr_up1: np.ndarray
    nbr_up2: np.ndarray
    w_dense: tuple[np.ndarray, np.ndarray]


@dataclass
class FeaturePyramid:
    p1_indices: np.ndarray
    p2_indices: np.ndarray
    p3_indices: np.ndarray
    h4: Tensor
    h8: Tensor
    f1: Tensor
    f2: Tensor
    f1_up: Tensor
    f2_up: Tensor
    f_dense: Tensor
    f_sparse: Tensor
    extras: dict = field(default_factory=dict)


def prepare_pyramid(cloud, p1_indices: np.ndarray, cfg: PyramidConfig, start: int = 0) -> PyramidGeometry:
    pts = _coords(cloud)
    cfg.validate(pts.shape[0])
    p2 = fps(pts, cfg.n2, start)
    p3 = fps(pts, cfg.n3, start)
    x1, x2, x3 = pts[p1_indices], pts[p2], pts[p3]
    return PyramidGeometry(
        p2=p2, p3=p3,
        w_f1=interpolation_weights(x2, x1, cfg.fp_k),
        w_f2=interpolation_weights(x3, x1, cfg.fp_k),
        nbr_up1=knn(x2, x2, min(cfg.up_k, len(p2)))[0],
        nbr_up2=knn(x3, x2, min(cfg.up_k, len(p2)))[0],
        w_dense=interpolation_weights(pts, x3, cfg.fp_k),
    )


def init_pyramid(params: Params, c_enc: int, cfg: PyramidConfig, rng: np.random.Generator) -> None:
    init_upsample(params, "pyramid/up1", c_enc, c_enc, cfg.width, cfg.width, rng)
    init_upsample(params, "pyramid/up2", cfg.width, c_enc, cfg.width, cfg.width, rng)


def build_dense(cloud, enc, params: Params, cfg: PyramidConfig,
                geom: PyramidGeometry | None = None) -> FeaturePyramid:
    """Run the multi-granular chain from encoder intermediates to per-point features.

    ``enc`` supplies ``p1_indices``, ``h4``, ``h8`` and ``f_sparse``.
    """
    pts = _coords(cloud)
    cfg.validate(pts.shape[0])
    if geom is None:
        geom = prepare_pyramid(pts, enc.p1_indices, cfg)
    x1, x2, x3 = pts[enc.p1_indices], pts[geom.p2], pts[geom.p3]
    f1 = propagate(x2, x1, enc.h8, geom.w_f1)
    f2 = propagate(x3, x1, enc.h4, geom.w_f2)
    # dst side of the first upsample is H8 carried onto P2, i.e. f1 itself
    f1_up = upsample(x2, f1, x2, f1, params, "pyramid/up1", cfg.up_k, geom.nbr_up1)
    f2_up = upsample(x2, f1_up, x3, f2, params, "pyramid/up2", cfg.up_k, geom.nbr_up2)
    f_dense = propagate(pts, x3, f2_up, geom.w_dense)
    return FeaturePyramid(
        p1_indices=enc.p1_indices, p2_indices=geom.p2, p3_indices=geom.p3,
        h4=enc.h4, h8=enc.h8, f1=f1, f2=f2, f1_up=f1_up, f2_up=f2_up,
        f_dense=f_dense, f_sparse=enc.f_sparse,
    )


def check_pyramid_params(params: Params, c_enc: int, cfg: PyramidConfig) -> None:
    for name, c_src in (("pyramid/up1", c_enc), ("pyramid/up2", cfg.width)):
        w = params.get(f"{name}/src_proj/w")
        if w is None or w.shape != (c_src, cfg.width):
            raise ConfigError(f"{name}: projection does not match widths ({c_src}, {cfg.width})")
