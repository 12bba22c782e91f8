"""Free-running evaluation and the EvalReport container."""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..data.schema import InstructionSample
from ..model import Model
from .metrics import MIOU_THRESHOLDS, metric_auc, metric_mae, metric_miou, metric_sim

METRICS = ("miou", "auc", "sim", "mae")

# score given to a ground-truth step the model produced no slot for
PENALTY = {"miou": 0.0, "auc": 0.0, "sim": 0.0, "mae": 1.0}

PROTOCOL = {
    "gt_binarization": "gt > 0 (mIoU, AUC)",
    "miou_thresholds": list(MIOU_THRESHOLDS),
    "miou_rule": "pred >= t",
    "slot_matching": "by order, truncated to min(S_pred, S_gt)",
    "missing_slot_penalty": PENALTY,
    "routing": "free-running",
}


@dataclass
class EvalReport:
    per_sample: list[dict]
    aggregate: dict[str, float | None]
    per_affordance: dict[str, dict[str, float | None]]
    per_slot: dict[str, dict[str, float | None]]
    per_task_kind: dict[str, dict[str, float | None]]
    per_split: dict[str, dict[str, float | None]]
    skipped: dict[str, int]
    routing_accuracy: float
    protocol: dict = field(default_factory=lambda: dict(PROTOCOL))

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> EvalReport:
        return cls(**json.loads(Path(path).read_text()))


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def slot_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float | None]:
    return {"miou": metric_miou(pred, gt), "auc": metric_auc(pred, gt),
            "sim": metric_sim(pred, gt), "mae": metric_mae(pred, gt)}


def score_sample(sample: InstructionSample, masks: Sequence[np.ndarray], s_pred: int,
                 skipped: Counter) -> dict:
    slots = []
    for i, step in enumerate(sample.steps):
        rec = {"index": i, "object": step.object, "affordance": step.affordance}
        if i < len(masks):
            m = slot_metrics(masks[i], step.mask)
            rec.update(m, penalized=False)
            for name in ("auc", "sim"):
                if m[name] is None:
                    skipped[f"{name}: degenerate ground truth or prediction"] += 1
        else:
            rec.update(PENALTY, penalized=True)
            skipped["slot: missing prediction (penalised)"] += 1
        slots.append(rec)
    out = {"id": sample.id, "task_kind": sample.task_kind, "category": sample.category,
           "split_tags": list(sample.split_tags), "s_gt": len(sample.steps), "s_pred": s_pred,
           "slots": slots}
    for name in METRICS:
        out[name] = _mean(s[name] for s in slots)
    return out


def aggregate(records: Sequence[dict]) -> dict[str, float | None]:
    return {name: _mean(r[name] for r in records) for name in METRICS}


def build_report(per_sample: list[dict], skipped: Counter) -> EvalReport:
    slots = [s for r in per_sample for s in r["slots"]]
    by_aff: dict[str, list] = defaultdict(list)
    by_slot: dict[str, list] = defaultdict(list)
    for s in slots:
        by_aff[s["affordance"]].append(s)
        by_slot[str(s["index"])].append(s)
    by_kind: dict[str, list] = defaultdict(list)
    by_split: dict[str, list] = defaultdict(list)
    for r in per_sample:
        by_kind[r["task_kind"]].append(r)
        for tag in r["split_tags"] or ["untagged"]:
            by_split[tag].append(r)
    for name in ("auc", "sim"):
        n = sum(1 for r in per_sample if r[name] is None)
        if n:
            skipped[f"sample {name}: every slot skipped"] = n
    routing = float(np.mean([r["s_pred"] == r["s_gt"] for r in per_sample]))
    return EvalReport(
        per_sample=per_sample,
        aggregate=aggregate(per_sample),
        per_affordance={k: aggregate(v) for k, v in sorted(by_aff.items())},
        per_slot={k: aggregate(v) for k, v in sorted(by_slot.items())},
        per_task_kind={k: aggregate(v) for k, v in sorted(by_kind.items())},
        per_split={k: aggregate(v) for k, v in sorted(by_split.items())},
        skipped=dict(skipped),
        routing_accuracy=routing,
    )


def evaluate(model: Model, samples: Sequence[InstructionSample], teacher_forced: bool = False) -> EvalReport:
    """Score every sample; routing runs free unless ``teacher_forced``."""
    if not samples:
        raise ValueError("evaluate: no samples")
    skipped: Counter = Counter()
    per_sample = []
    for sample in samples:
        if teacher_forced:
            with ad.no_grad():
                out = model.forward(sample.clouds, sample.instruction,
                                    slot_objects=[s.object for s in sample.steps])
            masks = [m.data for m in out.masks]
            s_pred = int(np.argmax(out.routing_logits.data[0])) + 1
        else:
            _, masks = model.predict(sample.clouds, sample.instruction)
            s_pred = len(masks)
        per_sample.append(score_sample(sample, masks, s_pred, skipped))
    report = build_report(per_sample, skipped)
    if teacher_forced:
        report.protocol["routing"] = "teacher-forced slots (routing accuracy still from the head)"
    return report
