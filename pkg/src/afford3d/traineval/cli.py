"""Command line entry point: ``afford3d {synth,train,eval,infer,gradcheck,report}``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..autodiff import NumericalError
from ..data import CATALOG, SplitSpec, load_dataset, make_splits, normalize, save_dataset, synth_generate
from ..geometry import PointCloud
from ..language import Instruction
from ..model import Model, ModelConfig

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

PRESETS = {"default": ModelConfig, "small": ModelConfig.small, "tiny": ModelConfig.tiny}

log = logging.getLogger("afford3d")


def _pair(text: str) -> tuple[str, str]:
    obj, sep, aff = text.partition(":")
    if not sep or not obj or not aff:
        raise argparse.ArgumentTypeError(f"expected OBJECT:AFFORDANCE, got {text!r}")
    return obj, aff


def _filter(samples, tag):
    if tag is None:
        return samples
    picked = [s for s in samples if tag in s.split_tags]
    if not picked:
        raise ValueError(f"no samples carry split tag {tag!r}")
    return picked


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    samples = synth_generate(args.seed, args.n, n_points=args.points, kind=args.kind)
    if args.holdout or args.test_fraction:
        spec = SplitSpec("unseen" if args.holdout else "seen", frozenset(args.holdout),
                         args.test_fraction or 0.1)
        train, test = make_splits(samples, spec, seed=args.seed)
        samples = train + test
        print(f"split ({spec.mode}): {len(train)} train / {len(test)} test")
    save_dataset(args.out, samples, sorted(CATALOG))
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _model_config(spec, seed: int) -> ModelConfig:
    if spec is None or isinstance(spec, str):
        name = spec or "default"
        if name not in PRESETS:
            raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
        return PRESETS[name](seed=seed)
    return ModelConfig.from_dict({"seed": seed, **spec})


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = TrainConfig.from_dict(raw)
    samples = _filter(load_dataset(args.data), args.tag)
    model = Model.load(args.init_ckpt) if args.init_ckpt else None
    model_cfg = None if model else _model_config(args.preset or raw.get("model"), cfg.seed)
    _, history = train(cfg, samples, args.out, model_cfg=model_cfg, model=model)
    last = history[-1]
    print(f"trained {len(history)} steps on {len(samples)} samples; final loss {last.total:.6f}")
    print(f"checkpoint: {Path(args.out) / 'model.sqaf'}")
    return EXIT_OK


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def cmd_eval(args) -> int:
    from .evaluate import evaluate

    model = Model.load(args.ckpt)
    samples = _filter(load_dataset(args.data), args.tag)
    report = evaluate(model, samples, teacher_forced=args.teacher_forced)
    report.save(args.report)
    agg = report.aggregate
    print(f"{len(samples)} samples  " + "  ".join(f"{k}={_fmt(v)}" for k, v in agg.items())
          + f"  routing={report.routing_accuracy:.4f}")
    for name, vals in report.per_affordance.items():
        print(f"  {name:<10} " + "  ".join(f"{k}={_fmt(v)}" for k, v in vals.items()))
    if report.skipped:
        print("skipped: " + ", ".join(f"{k} x{v}" for k, v in sorted(report.skipped.items())))
    print(f"report: {args.report}")
    return EXIT_OK


def _read_cloud(path: str) -> np.ndarray:
    p = Path(path)
    arr = np.load(p) if p.suffix == ".npy" else np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None)
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    if arr.shape[1] < 3:
        raise ValueError(f"{path}: expected at least 3 columns (x y z), got {arr.shape[1]}")
    return arr[:, :3]


def cmd_infer(args) -> int:
    model = Model.load(args.ckpt)
    clouds: dict[str, PointCloud] = {}
    for item in args.cloud:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        clouds[name] = normalize(_read_cloud(path))
    known = set(clouds) | set(CATALOG)
    instr = Instruction.from_text(args.instruction, sorted(known))
    response, masks = model.predict(clouds, instr)
    print(response.text)
    for i, (slot, mask) in enumerate(zip(response.slots, masks)):
        obj = slot.object if slot.object in clouds else next(iter(clouds))
        print(f"# slot {i} object={obj} points={mask.size} mean={mask.mean():.4f} max={mask.max():.4f}")
        print(",".join(f"{v:.4f}" for v in mask))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from ..gradsuite import run_suite, summarize

    results, seconds = run_suite(args.seed, args.instances)
    ok = True
    for op, (passed, worst, n) in summarize(results).items():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {op:<28} instances={n}  worst_rel_err={worst:.3e}")
    for r in results:
        if not r.passed:
            print(f"  {r.op}[{r.instance}]: {r.report.worst_name}{list(r.report.worst_index)} "
                  f"rel_err={r.report.worst_rel_error:.3e}")
    print(f"{len(results)} checks in {seconds:.1f} s")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_report(args) -> int:
    from .evaluate import EvalReport
    from .report import render_report

    report = EvalReport.load(args.eval_json)
    for kind, path in render_report(report, args.plot).items():
        print(f"{kind}: {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="afford3d", description="Sequential 3D affordance segmentation: "
                                 "synthetic data, training, evaluation and inference.",
                                 epilog="exit codes: 0 ok, 2 invalid input, 3 numerical failure")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--out", required=True, help="dataset JSON path")
    p.add_argument("--kind", choices=("single", "sequential", "mixed"), default="mixed")
    p.add_argument("--points", type=int, default=1024, help="points per cloud")
    p.add_argument("--holdout", type=_pair, nargs="*", default=[], metavar="OBJ:AFF",
                   help="tag an unseen split holding these pairs out of train")
    p.add_argument("--test-fraction", type=float, default=None,
                   help="tag a seen split with this test fraction")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train (or finetune) a model")
    p.add_argument("--config", help="JSON with TrainConfig fields and an optional 'model' entry")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model size (overrides config 'model')")
    p.add_argument("--init-ckpt", help="continue from this checkpoint (finetuning)")
    p.add_argument("--tag", help="only use samples with this split tag, e.g. 'train'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="free-running evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output EvalReport JSON")
    p.add_argument("--tag", help="only evaluate samples with this split tag, e.g. 'test'")
    p.add_argument("--teacher-forced", action="store_true", help="force ground-truth slot counts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one instruction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", action="append", required=True, metavar="[NAME=]PATH",
                   help=".npy, .csv or whitespace text with x y z columns; repeat for several objects")
    p.add_argument("--instruction", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable stage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="metric histograms and CSV tables from an eval report")
    p.add_argument("--eval-json", required=True)
    p.add_argument("--plot", required=True, help="PNG path; CSVs are written next to it")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
