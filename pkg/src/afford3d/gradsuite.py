"""Finite-difference checks for every differentiable stage of the model.

Each case builds a small random instance, wraps the stage in a scalar
objective (a random projection of its outputs) and runs
:func:`autodiff.grad_check` with respect to both activations and weights.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import encoder, fusion, language
from .geometry import init_upsample, upsample
from .language import Instruction, LanguageConfig, Vocabulary
from .layers import Params
from .traineval import losses

TOL = 1e-4


@dataclass
class CaseResult:
    op: str
    instance: int
    report: ad.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _project(t: ad.Tensor, rng: np.random.Generator) -> ad.Tensor:
    """Scalar ``sum(t * R)`` with a fixed random R, so every output matters."""
    r = rng.normal(size=t.shape)
    return ad.sum_(t * ad.Tensor(r))


def _with_params(params: Params, fn: Callable[[Params], ad.Tensor]):
    """Adapt ``fn(params)`` to grad_check's dict-of-tensors calling convention."""
    def wrapped(ts):
        merged = dict(params)
        merged.update(ts)
        return fn(merged)
    return wrapped


def _point(params: Params, names=None) -> dict[str, np.ndarray]:
    names = names or sorted(params)
    return {k: params[k].data for k in names}


# ---------------------------------------------------------------- cases

def case_upsample(rng: np.random.Generator, max_elements: int | None = 8) -> ad.GradCheckReport:
    n_src, n_dst, c_src, c_dst, c_proj, c_out = 10, 7, 4, 3, 5, 4
    src_xyz, dst_xyz = rng.normal(size=(n_src, 3)), rng.normal(size=(n_dst, 3))
    p: Params = {}
    init_upsample(p, "up", c_src, c_dst, c_proj, c_out, rng)
    point = _point(p)
    point["src_feats"] = rng.normal(size=(n_src, c_src))
    point["dst_feats"] = rng.normal(size=(n_dst, c_dst))
    seed = int(rng.integers(2**31))

    def fn(ts):
        out = upsample(src_xyz, ts["src_feats"], dst_xyz, ts["dst_feats"], ts, "up", k=4)
        return _project(out, np.random.default_rng(seed))

    return ad.grad_check(fn, point, tol=TOL, max_elements=max_elements, rng=rng)


def case_encode(rng: np.random.Generator, max_elements: int | None = 4) -> ad.GradCheckReport:
    cfg = encoder.EncoderConfig(centers=8, k=8, width=8, depth=2, heads=2, taps=(1, 2), sparse_width=6)
    cloud = rng.normal(size=(64, 3))
    params = encoder.init_params(cfg, seed=int(rng.integers(2**31)))
    grouping = encoder.group(cloud, cfg)
    seed = int(rng.integers(2**31))

    def fn(ps):
        out = encoder.encode(cloud, cfg, ps, grouping=grouping)
        r = np.random.default_rng(seed)
        return (_project(out.tokens, r) + _project(out.f_sparse, r)
                + _project(out.h8, r) + _project(out.h4, r))

    return ad.grad_check(_with_params(params, fn), _point(params), tol=TOL, max_elements=max_elements, rng=rng)


def _fusion_setup(rng):
    cfg = fusion.FusionConfig(seg_width=6, dense_width=5, sparse_width=4, fused_width=6)
    params = fusion.init_params(cfg, rng)
    n = 12
    acts = {"f_dense": rng.normal(size=(n, cfg.dense_width)),
            "f_sparse": rng.normal(size=(1, cfg.sparse_width)),
            "h_raw": rng.normal(size=(1, cfg.seg_width)),
            "h_seg": rng.normal(size=(1, cfg.dense_width))}
    return cfg, params, acts


def case_project_seg(rng: np.random.Generator, max_elements: int | None = None) -> ad.GradCheckReport:
    _, params, acts = _fusion_setup(rng)
    names = [k for k in params if k.startswith("fusion/proj/")]
    point = _point(params, names) | {"h_raw": acts["h_raw"]}
    seed = int(rng.integers(2**31))

    def fn(ps):
        return _project(fusion.project_seg(ps["h_raw"], ps), np.random.default_rng(seed))

    return ad.grad_check(_with_params(params, fn), point, tol=TOL, max_elements=max_elements, rng=rng)


def case_integrate(rng: np.random.Generator, max_elements: int | None = 8) -> ad.GradCheckReport:
    _, params, acts = _fusion_setup(rng)
    names = [k for k in params if k.split("/")[1] in ("attn", "ffn", "sparse", "ln", "fuse")]
    point = _point(params, names) | {k: acts[k] for k in ("f_dense", "f_sparse", "h_seg")}
    seed = int(rng.integers(2**31))

    def fn(ps):
        out = fusion.integrate(ps["f_dense"], ps["f_sparse"], ps["h_seg"], ps)
        r = np.random.default_rng(seed)
        return _project(out.af, r) + _project(out.conditioned, r)

    return ad.grad_check(_with_params(params, fn), point, tol=TOL, max_elements=max_elements, rng=rng)


def case_decode_mask(rng: np.random.Generator, max_elements: int | None = None) -> ad.GradCheckReport:
    cfg, params, _ = _fusion_setup(rng)
    names = [k for k in params if k.startswith("fusion/decoder/")]
    point = _point(params, names) | {"af": rng.normal(size=(12, cfg.fused_width))}
    seed = int(rng.integers(2**31))

    def fn(ps):
        out = fusion.FusionOutput(None, ps["af"], None)
        return _project(fusion.decode_mask(out, ps), np.random.default_rng(seed))

    return ad.grad_check(_with_params(params, fn), point, tol=TOL, max_elements=max_elements, rng=rng)


_WORDS = ("grasp", "the", "mug", "then", "open", "door", "pour", "knife", "cut", "bag", "and")


def case_embed_instruction(rng: np.random.Generator, max_elements: int | None = 6) -> ad.GradCheckReport:
    cfg = LanguageConfig(width=8, heads=2, max_len=16, s_max=3)
    vocab = Vocabulary.build([" ".join(_WORDS)])
    params = language.init_params(cfg, len(vocab), rng)
    words = list(rng.choice(_WORDS, size=int(rng.integers(3, 8))))
    instr = Instruction.from_text(" ".join(words), ["mug", "door", "knife", "bag"])
    s = int(rng.integers(1, cfg.s_max + 1))
    seed = int(rng.integers(2**31))

    def fn(ps):
        _, embeds, logits = language.embed_instruction(instr, cfg.s_max, ps, vocab, cfg, n_slots=s)
        r = np.random.default_rng(seed)
        total = _project(logits, r)
        for e in embeds:
            total = total + _project(e, r)
        return total

    return ad.grad_check(_with_params(params, fn), _point(params), tol=TOL, max_elements=max_elements, rng=rng)


def _probs(rng, n):
    return rng.uniform(0.05, 0.95, size=n)


def case_dice(rng: np.random.Generator, max_elements: int | None = None) -> ad.GradCheckReport:
    gt = ad.Tensor(rng.uniform(size=20))
    return ad.grad_check(lambda p: losses.dice_loss(p, gt), _probs(rng, 20), tol=TOL)


def case_bce(rng: np.random.Generator, max_elements: int | None = None) -> ad.GradCheckReport:
    gt = ad.Tensor(rng.uniform(size=20))
    return ad.grad_check(lambda p: losses.bce_loss(p, gt), _probs(rng, 20), tol=TOL)


def case_text(rng: np.random.Generator, max_elements: int | None = None) -> ad.GradCheckReport:
    s_max = 4
    gt_len = int(rng.integers(1, s_max + 1))
    return ad.grad_check(lambda z: losses.text_loss(z, gt_len), rng.normal(size=(1, s_max)), tol=TOL)


def case_total(rng: np.random.Generator, max_elements: int | None = None) -> ad.GradCheckReport:
    n_slots = int(rng.integers(1, 4))
    gts = [ad.Tensor(rng.uniform(size=16)) for _ in range(n_slots)]
    w = losses.LossWeights(*rng.uniform(0.2, 2.0, size=3))
    gt_len = n_slots
    point = {f"pred{i}": _probs(rng, 16) for i in range(n_slots)} | {"logits": rng.normal(size=(1, 4))}

    def fn(ts):
        preds = [ts[f"pred{i}"] for i in range(n_slots)]
        return losses.total_loss(w, [losses.bce_loss(p, g) for p, g in zip(preds, gts)],
                                 [losses.dice_loss(p, g) for p, g in zip(preds, gts)],
                                 losses.text_loss(ts["logits"], gt_len))

    return ad.grad_check(fn, point, tol=TOL)


CASES: dict[str, Callable] = {
    "geometry.upsample": case_upsample,
    "encoder.encode": case_encode,
    "fusion.project_seg": case_project_seg,
    "fusion.integrate": case_integrate,
    "fusion.decode_mask": case_decode_mask,
    "language.embed_instruction": case_embed_instruction,
    "losses.dice_loss": case_dice,
    "losses.bce_loss": case_bce,
    "losses.text_loss": case_text,
    "losses.total_loss": case_total,
}


def run_suite(seed: int = 0, instances: int = 10, ops=None) -> tuple[list[CaseResult], float]:
    """Run ``instances`` random cases per op; returns results and wall time."""
    t0 = time.perf_counter()
    results = []
    for op in ops or CASES:
        for i in range(instances):
            rng = np.random.default_rng([seed, i, sum(map(ord, op))])
            results.append(CaseResult(op, i, CASES[op](rng)))
    return results, time.perf_counter() - t0


def summarize(results: list[CaseResult]) -> dict[str, tuple[bool, float, int]]:
    """Per op: (all passed, worst relative error, instances)."""
    out: dict[str, tuple[bool, float, int]] = {}
    for r in results:
        ok, worst, n = out.get(r.op, (True, 0.0, 0))
        out[r.op] = (ok and r.passed, max(worst, r.report.worst_rel_error), n + 1)
    return out
