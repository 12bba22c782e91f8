"""The full point-cloud + instruction -> mask-sequence model."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint, encoder, fusion, language
from .autodiff import Tensor
from .encoder import EncoderConfig, Grouping
from .fusion import FusionConfig
from .geometry import FeaturePyramid, PointCloud, PyramidConfig, PyramidGeometry, build_dense, init_pyramid, prepare_pyramid
from .language import Instruction, LanguageConfig, SegResponse, Vocabulary
from .layers import ConfigError, Params

CKPT_NAME = "model.sqaf"
VOCAB_NAME = "vocab.txt"
CONFIG_NAME = "model_config.json"


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    language: LanguageConfig = field(default_factory=LanguageConfig)
    fused_width: int = 128
    shared_decoder: bool = True
    seed: int = 0

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(seg_width=self.language.width, dense_width=self.pyramid.width,
                            sparse_width=self.encoder.sparse_width, fused_width=self.fused_width,
                            shared_decoder=self.shared_decoder, max_slots=self.language.s_max)

    @classmethod
    def small(cls, seed: int = 0) -> ModelConfig:
        """Desk-scale preset for 1024-point clouds."""
        return cls(
            encoder=EncoderConfig(centers=64, k=32, width=64, depth=4, heads=4, taps=(2, 4), sparse_width=128),
            pyramid=PyramidConfig(n2=256, n3=512, width=64),
            language=LanguageConfig(width=128, heads=4, max_len=64, s_max=4),
            fused_width=64, seed=seed,
        )

    @classmethod
    def tiny(cls, seed: int = 0) -> ModelConfig:
        """For gradient checks: 64-point clouds, 8 centers."""
        return cls(
            encoder=EncoderConfig(centers=8, k=8, width=8, depth=2, heads=2, taps=(1, 2), sparse_width=8),
            pyramid=PyramidConfig(n2=16, n3=32, up_k=4, width=8),
            language=LanguageConfig(width=8, heads=2, max_len=32, s_max=4),
            fused_width=8, seed=seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        d = dict(d)
        return cls(
            encoder=EncoderConfig(**d.pop("encoder", {})),
            pyramid=PyramidConfig(**d.pop("pyramid", {})),
            language=LanguageConfig(**d.pop("language", {})),
            **d,
        )


@dataclass
class CloudFeatures:
    enc: encoder.EncoderOutput
    pyramid: FeaturePyramid


@dataclass
class ForwardResult:
    response: SegResponse
    masks: list[Tensor]
    routing_logits: Tensor
    slot_objects: list[str]


def _cloud_key(coords: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(coords).tobytes()).hexdigest()


class Model:
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, params: Params | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.params: Params = params if params is not None else self.init_params()
        self._geom_cache: dict[str, tuple[Grouping, PyramidGeometry]] = {}

    def init_params(self) -> Params:
        cfg = self.cfg
        seed = cfg.seed
        p: Params = {}
        p.update(encoder.init_params(cfg.encoder, seed=int(np.random.default_rng([seed, 0]).integers(2**31))))
        init_pyramid(p, cfg.encoder.width, cfg.pyramid, np.random.default_rng([seed, 1]))
        p.update(fusion.init_params(cfg.fusion, np.random.default_rng([seed, 2])))
        p.update(language.init_params(cfg.language, len(self.vocab), np.random.default_rng([seed, 3])))
        for name, t in p.items():
            t.name = name
        return p

    # ------------------------------------------------------------ parameter groups

    def dense_path_names(self) -> list[str]:
        """Parameters that feed f_dense / f_sparse (frozen together)."""
        return sorted(k for k in self.params if k.startswith(("encoder/", "pyramid/")))

    def set_frozen_encoder(self, frozen: bool) -> None:
        for name in self.dense_path_names():
            self.params[name].requires_grad = not frozen

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    # ------------------------------------------------------------ forward

    def geometry(self, coords: np.ndarray) -> tuple[Grouping, PyramidGeometry]:
        key = _cloud_key(coords)
        hit = self._geom_cache.get(key)
        if hit is None:
            grouping = encoder.group(coords, self.cfg.encoder)
            hit = (grouping, prepare_pyramid(coords, grouping.centers, self.cfg.pyramid))
            if len(self._geom_cache) > 4096:
                self._geom_cache.clear()
            self._geom_cache[key] = hit
        return hit

    def cloud_features(self, cloud: PointCloud) -> CloudFeatures:
        grouping, geom = self.geometry(cloud.coords)
        enc = encoder.encode(cloud, self.cfg.encoder, self.params, grouping=grouping)
        return CloudFeatures(enc, build_dense(cloud, enc, self.params, self.cfg.pyramid, geom))

    def forward(self, clouds: Mapping[str, PointCloud], instr: Instruction,
                n_slots: int | None = None, slot_objects: Sequence[str] | None = None,
                s_max: int | None = None) -> ForwardResult:
        """Masks for every seg slot of ``instr``.

        ``n_slots``/``slot_objects`` force the slot count and per-slot object
        (teacher forcing); otherwise the routing head decides and slots bind
        to object mentions in order. Unknown objects fall back to the first
        cloud.
        """
        if not clouds:
            raise ValueError("forward: no point clouds")
        s_max = s_max or self.cfg.language.s_max
        if slot_objects is not None:
            n_slots = len(slot_objects)
        response, embeds, logits = language.embed_instruction(
            instr, s_max, self.params, self.vocab, self.cfg.language, n_slots=n_slots)
        objects = list(slot_objects) if slot_objects is not None else [s.object for s in response.slots]
        first = next(iter(clouds))
        resolved = [o if o in clouds else first for o in objects]
        feats = {name: self.cloud_features(clouds[name]) for name in dict.fromkeys(resolved)}
        masks = fusion.forward_sequence(
            [feats[o].pyramid.f_dense for o in resolved],
            [feats[o].pyramid.f_sparse for o in resolved],
            embeds, self.params, self.cfg.fusion)
        return ForwardResult(response, masks, logits, resolved)

    def predict(self, clouds: Mapping[str, PointCloud], instr: Instruction) -> tuple[SegResponse, list[np.ndarray]]:
        with ad.no_grad():
            out = self.forward(clouds, instr)
        return out.response, [m.data.copy() for m in out.masks]

    # ------------------------------------------------------------ persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        checkpoint.save(d / CKPT_NAME, self.state_arrays())
        self.vocab.save(d / VOCAB_NAME)
        (d / CONFIG_NAME).write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True))
        return d / CKPT_NAME

    @classmethod
    def load(cls, path: str | Path) -> Model:
        """Load from a checkpoint directory (or the ``model.sqaf`` inside it)."""
        p = Path(path)
        d = p if p.is_dir() else p.parent
        cfg = ModelConfig.from_dict(json.loads((d / CONFIG_NAME).read_text()))
        vocab = Vocabulary.load(d / VOCAB_NAME)
        model = cls(cfg, vocab)
        arrays = checkpoint.load(d / CKPT_NAME)
        missing = set(model.params) - set(arrays)
        extra = set(arrays) - set(model.params)
        if missing or extra:
            raise ConfigError(f"checkpoint does not match config: missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]}")
        for name, arr in arrays.items():
            if arr.shape != model.params[name].shape:
                raise ConfigError(f"checkpoint entry {name} has shape {arr.shape}, "
                                  f"expected {model.params[name].shape}")
            model.params[name].data = arr.astype(np.float64)
        return model
