"""Seen / Unseen train-test construction."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .schema import InstructionSample


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "seen"
    holdout: frozenset = field(default_factory=frozenset)
    test_fraction: float = 0.1
    # "holdout": every held-out sample goes to test, the rest split as seen.
    # "shared": test equals the seen-mode test set; held-out pairs are only
    # removed from train.
    unseen_test: str = "holdout"

    def __post_init__(self):
        object.__setattr__(self, "holdout", frozenset(tuple(p) for p in self.holdout))
        if self.mode not in ("seen", "unseen"):
            raise ValueError(f"split mode must be 'seen' or 'unseen', got {self.mode!r}")
        if self.mode == "unseen" and not self.holdout:
            raise ValueError("unseen split needs a non-empty holdout set")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.unseen_test not in ("holdout", "shared"):
            raise ValueError(f"unknown unseen_test option {self.unseen_test!r}")


def sample_pairs(s: InstructionSample) -> set[tuple[str, str]]:
    return {(st.object, st.affordance) for st in s.steps}


def stratum(s: InstructionSample) -> tuple[str, str]:
    return s.category, "+".join(st.affordance for st in s.steps)


def _seen_split(samples: Sequence[InstructionSample], fraction: float, seed: int):
    groups: dict[tuple[str, str], list[InstructionSample]] = defaultdict(list)
    for s in samples:
        groups[stratum(s)].append(s)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda s: s.id)
        order = rng.permutation(len(members))
        n_test = int(math.floor(len(members) * fraction + 0.5))
        chosen = set(order[:n_test].tolist())
        for i, s in enumerate(members):
            (test if i in chosen else train).append(s)
    return train, test


def make_splits(samples: Sequence[InstructionSample], spec: SplitSpec, seed: int = 0):
    """Return ``(train, test)``; a pure function of its arguments."""
    if not samples:
        raise ValueError("make_splits: no samples")
    if spec.mode == "seen":
        train, test = _seen_split(samples, spec.test_fraction, seed)
    else:
        held = [s for s in samples if sample_pairs(s) & spec.holdout]
        rest = [s for s in samples if not sample_pairs(s) & spec.holdout]
        if spec.unseen_test == "holdout":
            train, test = _seen_split(rest, spec.test_fraction, seed)
            test = test + held
        else:
            train, test = _seen_split(samples, spec.test_fraction, seed)
            train = [s for s in train if not sample_pairs(s) & spec.holdout]
    if not train:
        raise ValueError("make_splits: the split leaves the training set empty")
    tag = spec.mode

    def tagged(s: InstructionSample, role: str) -> InstructionSample:
        tags = set(s.split_tags) - {"train", "test", "holdout", "seen", "unseen"} | {role, tag}
        if role == "test" and spec.mode == "unseen" and sample_pairs(s) & spec.holdout:
            tags.add("holdout")
        return replace(s, split_tags=sorted(tags))

    return [tagged(s, "train") for s in train], [tagged(s, "test") for s in test]
