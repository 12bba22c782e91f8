"""Teacher-forced joint training over single and sequential samples."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import NumericalError
from ..data.schema import InstructionSample
from ..data.synth import CATALOG, PHRASES
from ..language import Vocabulary, response_templates
from ..model import Model, ModelConfig
from .losses import LossWeights, bce_loss, dice_loss, text_loss, total_loss
from .optim import AdamWConfig, AdamWState, adamw_step, cosine_schedule

log = logging.getLogger(__name__)

LOG_NAME = "loss_log.csv"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    freeze_encoder: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    max_steps: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if isinstance(self.loss_weights, Mapping):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        d = {k: v for k, v in d.items() if k != "model"}
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepLog:
    step: int
    lr: float
    total: float
    l_c: float
    l_b: float
    l_d: float


def build_vocab(samples: Sequence[InstructionSample]) -> Vocabulary:
    texts = [s.instruction.text for s in samples]
    texts += [p for bank in PHRASES.values() for p in bank]
    texts += list(CATALOG) + [c for c, _ in response_templates()]
    return Vocabulary.build(texts)


def sample_loss(model: Model, sample: InstructionSample, weights: LossWeights):
    """Teacher-forced loss for one sample: slot count and objects follow the steps."""
    out = model.forward(sample.clouds, sample.instruction, slot_objects=[s.object for s in sample.steps])
    bces, dices = [], []
    for mask, step in zip(out.masks, sample.steps):
        gt = ad.Tensor(step.mask)
        bces.append(bce_loss(mask, gt))
        dices.append(dice_loss(mask, gt))
    l_c = text_loss(out.routing_logits, len(sample.steps))
    total = total_loss(weights, bces, dices, l_c)
    parts = (l_c.item(), float(np.mean([b.item() for b in bces])), float(np.mean([d.item() for d in dices])))
    return total, parts


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return int(math.ceil(n_samples / batch_size))


def train(cfg: TrainConfig, samples: Sequence[InstructionSample], out_dir: str | Path | None = None,
          model_cfg: ModelConfig | None = None, model: Model | None = None) -> tuple[Model, list[StepLog]]:
    """Train and optionally write the checkpoint directory plus a per-step loss log.

    Passing ``model`` continues from existing weights (finetuning).
    """
    if not samples:
        raise ValueError("train: empty dataset")
    if model is None:
        model = Model(model_cfg or ModelConfig(seed=cfg.seed), build_vocab(samples))
    model.set_frozen_encoder(cfg.freeze_encoder)
    trainable = model.trainable()
    opt_cfg = AdamWConfig(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    state = AdamWState()
    per_epoch = steps_per_epoch(len(samples), cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    rng = np.random.default_rng(cfg.seed)
    history: list[StepLog] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for b in range(per_epoch):
            if step >= total_steps:
                break
            step += 1
            batch = [samples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            ad.zero_grad(model.params.values())
            sums = np.zeros(4)
            for sample in batch:
                loss, parts = sample_loss(model, sample, cfg.loss_weights)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(
                        f"non-finite loss at step {step} (sample {sample.id}): "
                        f"total={value} l_c={parts[0]} l_b={parts[1]} l_d={parts[2]}")
                (loss * (1.0 / len(batch))).backward()
                sums += np.array([value, *parts])
            lr = cosine_schedule(step, total_steps, cfg.warmup_ratio, cfg.learning_rate)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in trainable.items()}
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient for {k} at step {step}")
            adamw_step(trainable, grads, state, step, opt_cfg, lr)
            mean = sums / len(batch)
            history.append(StepLog(step, lr, *mean))
            if step % 25 == 0 or step == 1:
                log.info("step %d/%d lr=%.2e loss=%.4f (c=%.4f b=%.4f d=%.4f)", step, total_steps, lr, *mean)
    ad.zero_grad(model.params.values())
    if out_dir is not None:
        write_outputs(model, cfg, history, out_dir)
    return model, history


def write_outputs(model: Model, cfg: TrainConfig, history: Sequence[StepLog], out_dir: str | Path) -> None:
    d = Path(out_dir)
    model.save(d)
    (d / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    with open(d / LOG_NAME, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "total", "l_c", "l_b", "l_d"])
        for h in history:
            w.writerow([h.step, repr(h.lr), repr(h.total), repr(h.l_c), repr(h.l_b), repr(h.l_d)])
