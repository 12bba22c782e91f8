"""Dataset records, validation and the JSON container format."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..geometry import PointCloud
from ..language import Instruction

FORMAT_VERSION = 1

LABEL_REGISTRY = (
    "grasp", "contain", "lift", "open", "lay", "sit", "support", "wrap_grasp", "pour",
    "move", "display", "push", "pull", "listen", "wear", "press", "cut", "stab",
)

TASK_KINDS = ("single", "sequential")


class DatasetError(ValueError):
    """A sample violates the schema; the message names the sample id and field."""

    def __init__(self, sample_id, field_name: str, message: str):
        self.sample_id = sample_id
        self.field = field_name
        super().__init__(f"sample {sample_id!r}, field {field_name!r}: {message}")


@dataclass(frozen=True)
class Step:
    object: str
    affordance: str
    mask: np.ndarray


@dataclass
class InstructionSample:
    id: str
    instruction: Instruction
    clouds: dict[str, PointCloud]
    steps: list[Step]
    task_kind: str
    category: str
    split_tags: list[str] = field(default_factory=list)

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return [(s.object, s.affordance) for s in self.steps]

    def cloud_for(self, step: Step) -> PointCloud:
        return self.clouds[step.object]


def validate_sample(s: InstructionSample, registry: Sequence[str] = LABEL_REGISTRY) -> None:
    if s.task_kind not in TASK_KINDS:
        raise DatasetError(s.id, "task_kind", f"unknown task kind {s.task_kind!r}")
    if s.task_kind == "single" and len(s.steps) != 1:
        raise DatasetError(s.id, "steps", f"single task needs exactly one step, got {len(s.steps)}")
    if s.task_kind == "sequential" and len(s.steps) < 2:
        raise DatasetError(s.id, "steps", f"sequential task needs >= 2 steps, got {len(s.steps)}")
    if not s.clouds:
        raise DatasetError(s.id, "objects", "no point clouds")
    for i, step in enumerate(s.steps):
        if step.affordance not in registry:
            raise DatasetError(s.id, f"steps[{i}].affordance", f"{step.affordance!r} not in label registry")
        if step.object not in s.clouds:
            raise DatasetError(s.id, f"steps[{i}].object", f"no cloud named {step.object!r}")
        mask = np.asarray(step.mask)
        n = len(s.clouds[step.object])
        if mask.ndim != 1 or mask.shape[0] != n:
            raise DatasetError(s.id, f"steps[{i}].mask",
                               f"mask length {mask.shape} does not match cloud size {n}")
        if not np.all(np.isfinite(mask)) or mask.min() < 0.0 or mask.max() > 1.0:
            raise DatasetError(s.id, f"steps[{i}].mask", "scores must lie in [0, 1]")


def counts(samples: Iterable[InstructionSample]) -> dict[str, dict[str, int]]:
    by_cat: Counter = Counter()
    by_aff: Counter = Counter()
    by_kind: Counter = Counter()
    for s in samples:
        by_kind[s.task_kind] += 1
        by_cat[s.category] += 1
        for step in s.steps:
            by_aff[step.affordance] += 1
    return {"task_kind": dict(by_kind), "category": dict(by_cat), "affordance": dict(by_aff)}


# ---------------------------------------------------------------- JSON container

def catalog_hash(catalog_names: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(sorted(catalog_names)).encode()).hexdigest()[:16]


def sample_to_dict(s: InstructionSample) -> dict:
    return {
        "id": s.id,
        "task_kind": s.task_kind,
        "category": s.category,
        "instruction": {"text": s.instruction.text, "object_refs": list(s.instruction.object_refs)},
        "objects": [{"name": name, "points": c.coords.tolist()} for name, c in s.clouds.items()],
        "steps": [{"object": st.object, "affordance": st.affordance,
                   "mask": np.asarray(st.mask, dtype=np.float64).tolist()} for st in s.steps],
        "split_tags": list(s.split_tags),
    }


def _require(rec: Mapping, key: str, sid):
    if key not in rec:
        raise DatasetError(sid, key, "missing field")
    return rec[key]


def sample_from_dict(rec: Mapping, registry: Sequence[str] = LABEL_REGISTRY) -> InstructionSample:
    sid = rec.get("id", "<no id>")
    _require(rec, "id", sid)
    instr = _require(rec, "instruction", sid)
    if isinstance(instr, str):
        instr = {"text": instr, "object_refs": []}
    try:
        instruction = Instruction(_require(instr, "text", sid), tuple(instr.get("object_refs", ())))
    except ValueError as exc:
        raise DatasetError(sid, "instruction", str(exc)) from None
    clouds = {}
    for j, obj in enumerate(_require(rec, "objects", sid)):
        try:
            clouds[obj["name"]] = PointCloud(np.asarray(obj["points"], dtype=np.float64))
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(sid, f"objects[{j}]", str(exc)) from None
    steps = []
    for j, st in enumerate(_require(rec, "steps", sid)):
        try:
            steps.append(Step(st["object"], st["affordance"], np.asarray(st["mask"], dtype=np.float64)))
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(sid, f"steps[{j}]", str(exc)) from None
    sample = InstructionSample(
        id=sid, instruction=instruction, clouds=clouds, steps=steps,
        task_kind=_require(rec, "task_kind", sid), category=_require(rec, "category", sid),
        split_tags=list(rec.get("split_tags", [])),
    )
    validate_sample(sample, registry)
    return sample


def dumps(samples: Sequence[InstructionSample], catalog_names: Sequence[str] = (),
          registry: Sequence[str] = LABEL_REGISTRY) -> str:
    doc = {
        "header": {"format_version": FORMAT_VERSION, "label_registry": list(registry),
                   "catalog_hash": catalog_hash(catalog_names)},
        "samples": [sample_to_dict(s) for s in samples],
    }
    return json.dumps(doc)


def loads(text: str) -> list[InstructionSample]:
    doc = json.loads(text)
    header = doc.get("header")
    if not isinstance(header, dict) or "format_version" not in header:
        raise DatasetError(None, "header", "missing or malformed header")
    if header["format_version"] != FORMAT_VERSION:
        raise DatasetError(None, "header.format_version", f"unsupported version {header['format_version']}")
    registry = tuple(header.get("label_registry", LABEL_REGISTRY))
    samples = [sample_from_dict(rec, registry) for rec in doc.get("samples", [])]
    ids = Counter(s.id for s in samples)
    dup = [k for k, v in ids.items() if v > 1]
    if dup:
        raise DatasetError(dup[0], "id", "duplicate sample id")
    return samples


def save_dataset(path: str | Path, samples: Sequence[InstructionSample],
                 catalog_names: Sequence[str] = ()) -> None:
    Path(path).write_text(dumps(samples, catalog_names), encoding="utf-8")


def load_dataset(path: str | Path) -> list[InstructionSample]:
    return loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- geometry helpers

def normalize(cloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1.

    A cloud whose points all coincide is only centred (scale 1).
    """
    coords = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] < 1:
        raise ValueError("normalize: need at least one point")
    if not np.all(np.isfinite(coords)):
        raise ValueError("normalize: non-finite coordinates")
    centered = coords - coords.mean(axis=0)
    scale = float(np.sqrt((centered ** 2).sum(axis=1)).max())
    if scale > 0.0:
        centered = centered / scale
    channels = cloud.channels if isinstance(cloud, PointCloud) else None
    return PointCloud(centered, channels)


# ---------------------------------------------------------------- real-corpus conversion

DEFAULT_PHRASES = {
    "grasp": "grasp the {obj}", "contain": "put something into the {obj}",
    "lift": "lift the {obj}", "open": "open the {obj}", "lay": "lie down on the {obj}",
    "sit": "sit on the {obj}", "support": "place items on the {obj}",
    "wrap_grasp": "wrap your hand around the {obj}", "pour": "pour from the {obj}",
    "move": "move the {obj}", "display": "look at the {obj} screen", "push": "push the {obj}",
    "pull": "pull the {obj}", "listen": "listen with the {obj}", "wear": "wear the {obj}",
    "press": "press the {obj}", "cut": "cut with the {obj}", "stab": "stab with the {obj}",
}


def convert_shape_records(records: Iterable[Mapping], phrases: Mapping[str, str] = DEFAULT_PHRASES,
                          instructions_per_affordance: int = 1) -> list[InstructionSample]:
    """Turn per-shape annotation records into single-task samples.

    Each record carries ``shape_id``, ``category``, ``coordinates`` (N x 3) and
    ``labels`` mapping affordance name to N per-point scores. One sample is
    produced per affordance with any positive score.
    """
    out = []
    for rec in records:
        sid, cat = str(rec["shape_id"]), str(rec["category"]).lower()
        cloud = PointCloud(np.asarray(rec["coordinates"], dtype=np.float64))
        for aff in sorted(rec["labels"]):
            mask = np.clip(np.asarray(rec["labels"][aff], dtype=np.float64), 0.0, 1.0)
            if not np.any(mask > 0):
                continue
            for j in range(instructions_per_affordance):
                text = phrases.get(aff, "use the {obj} to " + aff).format(obj=cat)
                sample = InstructionSample(
                    id=f"{sid}:{aff}:{j}", instruction=Instruction(text, (cat,)),
                    clouds={cat: cloud}, steps=[Step(cat, aff, mask)], task_kind="single",
                    category=cat, split_tags=[],
                )
                validate_sample(sample)
                out.append(sample)
    return out
