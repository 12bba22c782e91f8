"""The <SEG>-token protocol and a small trainable instruction encoder.

Text goes through a token embedding, one self-attention block and then two
heads: a routing head that predicts how many seg slots the instruction needs,
and a set of learned slot queries that each attend over the tokens to produce
one raw seg embedding per slot.
"""
from __future__ import annotations

import math
import re
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import block
from .layers import ConfigError, Params, init_layer_norm, init_linear, init_mlp, linear

PREFIX = "language/"
SEG = "<SEG>"
PAD = "<PAD>"
UNK = "<UNK>"
RESERVED = (PAD, UNK, SEG)

_TOKEN_RE = re.compile(r"<seg>|[a-z0-9_]+")

STOP_WORDS = frozenset("""
a an the then and next finally first second third after afterwards that this it its is are be
to of with on in at by for from into onto using use part region area you your please segment
now lastly also
""".split())


class TemplateError(KeyError):
    """A template placeholder had no value."""


# ---------------------------------------------------------------- tokens and vocabulary

def split_tokens(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation; ``<SEG>`` stays one token."""
    return [SEG if t == "<seg>" else t for t in _TOKEN_RE.findall(text.lower())]


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()):
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            if t not in self.token_to_id:
                self.token_to_id[t] = len(self.token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    @classmethod
    def build(cls, texts: Sequence[str]) -> Vocabulary:
        words = sorted({t for text in texts for t in split_tokens(text) if t not in RESERVED})
        return cls(words)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.token_to_id == other.token_to_id

    @property
    def seg_id(self) -> int:
        return self.token_to_id[SEG]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def dumps(self) -> str:
        return "".join(f"{t}\t{i}\n" for i, t in sorted(self.id_to_token.items()))

    @classmethod
    def loads(cls, text: str) -> Vocabulary:
        pairs = []
        for line in text.splitlines():
            if not line:
                continue
            tok, idx = line.rsplit("\t", 1)
            pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))) or tuple(t for _, t in pairs[:3]) != RESERVED:
            raise ValueError("vocabulary file is not a dense id list starting with the reserved tokens")
        return cls([t for _, t in pairs[3:]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    unk = vocab.unk_id
    return [vocab.token_to_id.get(t, unk) for t in split_tokens(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


# ---------------------------------------------------------------- instructions and responses

@dataclass(frozen=True)
class Instruction:
    text: str
    object_refs: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("instruction text must be non-empty")
        object.__setattr__(self, "object_refs", tuple(self.object_refs))

    @classmethod
    def from_text(cls, text: str, known_objects: Sequence[str]) -> Instruction:
        """Object refs are the known object names in order of mention."""
        known = set(known_objects)
        return cls(text, tuple(t for t in split_tokens(text) if t in known))


@dataclass
class Slot:
    object: str
    offset: int
    embedding: Tensor | None = None


@dataclass
class SegResponse:
    text: str
    slots: list[Slot] = field(default_factory=list)

    @property
    def S(self) -> int:
        return len(self.slots)

    def validate(self) -> None:
        if self.text.count(SEG) != len(self.slots):
            raise ValueError("SegResponse: marker count differs from slot count")
        offs = [s.offset for s in self.slots]
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise ValueError("SegResponse: slot offsets must increase strictly")


@lru_cache(maxsize=None)
def response_templates() -> tuple[tuple[str, str], ...]:
    raw = resources.files("afford3d.templates").joinpath("responses.txt").read_text(encoding="utf-8")
    out = []
    for line in raw.split("\n"):
        if not line or line.startswith("#"):
            continue
        clause, joiner = line.split("|", 1)
        out.append((clause, joiner))
    return tuple(out)


def render_response(objects: Sequence[str], template: int = 0) -> str:
    clause, joiner = response_templates()[template]
    return joiner.join(string.Template(clause).substitute(object=o) for o in objects)


def parse_seg_response(text: str) -> list[tuple[str, int]]:
    """(object mention, marker offset) for every ``<SEG>`` marker in text order.

    A marker binds to the last token before it that is not a stop word.
    """
    out = []
    pos = 0
    while True:
        at = text.find(SEG, pos)
        if at < 0:
            return out
        words = [t for t in split_tokens(text[:at]) if t != SEG and t not in STOP_WORDS]
        out.append((words[-1] if words else "", at))
        pos = at + len(SEG)


def bind_slots(object_refs: Sequence[str], n: int) -> list[str]:
    """Slot i takes the i-th mention; extra slots reuse the last mention."""
    if not object_refs:
        return ["object"] * n
    return [object_refs[min(i, len(object_refs) - 1)] for i in range(n)]


def build_response(objects: Sequence[str], embeddings: Sequence[Tensor] | None = None,
                   template: int = 0) -> SegResponse:
    text = render_response(objects, template)
    offsets = [m.start() for m in re.finditer(re.escape(SEG), text)]
    embeddings = list(embeddings) if embeddings is not None else [None] * len(objects)
    resp = SegResponse(text, [Slot(o, off, e) for o, off, e in zip(objects, offsets, embeddings)])
    resp.validate()
    return resp


# ---------------------------------------------------------------- prompt templates

PROMPT_TEMPLATES = ("role", "task", "examples", "instruction")


@lru_cache(maxsize=None)
def _prompt_source(template_id: str) -> str:
    return resources.files("afford3d.templates").joinpath(f"{template_id}.txt").read_text(encoding="utf-8")


def render_prompt(template_id: str, **fields: str) -> str:
    if template_id not in PROMPT_TEMPLATES:
        raise ValueError(f"unknown template {template_id!r}; expected one of {PROMPT_TEMPLATES}")
    try:
        return string.Template(_prompt_source(template_id)).substitute(fields)
    except KeyError as exc:
        raise TemplateError(f"template {template_id!r} needs field {exc.args[0]!r}") from None


# ---------------------------------------------------------------- instruction encoder

@dataclass(frozen=True)
class LanguageConfig:
    width: int = 256            # d_l
    heads: int = 4
    max_len: int = 64
    s_max: int = 4
    mlp_ratio: int = 2


def shape_of(params: Params) -> tuple[int, int]:
    return params["language/tok_embed"].shape


def init_params(cfg: LanguageConfig, vocab_size: int, rng: np.random.Generator | int = 0) -> Params:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    d = cfg.width
    p: Params = {}
    p["language/tok_embed"] = Tensor(rng.normal(0.0, 0.5, size=(vocab_size, d)), requires_grad=True)
    p["language/pos_embed"] = Tensor(rng.normal(0.0, 0.1, size=(cfg.max_len, d)), requires_grad=True)
    b = "language/block"
    init_layer_norm(p, f"{b}/ln1", d)
    for proj in ("q", "k", "v", "o"):
        init_linear(p, f"{b}/attn/{proj}", d, d, rng, bias=proj != "k")
    init_layer_norm(p, f"{b}/ln2", d)
    init_mlp(p, f"{b}/mlp", d, cfg.mlp_ratio * d, d, rng)
    p["language/slot_queries"] = Tensor(rng.normal(0.0, 1.0, size=(cfg.s_max, d)), requires_grad=True)
    init_linear(p, "language/slot_attn/k", d, d, rng, bias=False)
    init_linear(p, "language/slot_attn/v", d, d, rng)
    init_linear(p, "language/route", d, cfg.s_max, rng)
    return p


def encode_text(ids: Sequence[int], params: Params, cfg: LanguageConfig) -> Tensor:
    ids = list(ids)[: cfg.max_len] or [RESERVED.index(UNK)]
    table = params["language/tok_embed"]
    if max(ids) >= table.shape[0]:
        raise ConfigError(f"token id {max(ids)} outside embedding table of {table.shape[0]} rows")
    x = ad.gather_rows(table, np.array(ids)) + ad.gather_rows(params["language/pos_embed"], np.arange(len(ids)))
    return block(x, params, "language/block", cfg.heads)


def route_logits(tokens: Tensor, params: Params) -> Tensor:
    return linear(ad.mean(tokens, axis=0, keepdims=True), params, "language/route")


def route_slots(instr: Instruction, s_max: int, params: Params, vocab: Vocabulary,
                cfg: LanguageConfig) -> tuple[int, list[str], Tensor]:
    """Predicted slot count, per-slot object binding, and the routing logits."""
    if s_max < 1:
        raise ValueError("s_max must be >= 1")
    tokens = encode_text(tokenize(instr.text, vocab), params, cfg)
    logits = route_logits(tokens, params)
    s = int(np.argmax(logits.data[0, :s_max])) + 1
    return s, bind_slots(instr.object_refs, s), logits


def embed_instruction(instr: Instruction, s_max: int, params: Params, vocab: Vocabulary,
                      cfg: LanguageConfig, n_slots: int | None = None,
                      template: int = 0) -> tuple[SegResponse, list[Tensor], Tensor]:
    """Encode an instruction into S raw seg embeddings and a rendered response.

    ``n_slots`` forces S (teacher forcing); otherwise the routing head picks it.
    Returns ``(response, embeddings, routing_logits)``.
    """
    if s_max < 1:
        raise ValueError("s_max must be >= 1")
    if s_max > cfg.s_max:
        raise ConfigError(f"s_max {s_max} exceeds the {cfg.s_max} trained slot queries")
    tokens = encode_text(tokenize(instr.text, vocab), params, cfg)
    logits = route_logits(tokens, params)
    s = n_slots if n_slots is not None else int(np.argmax(logits.data[0, :s_max])) + 1
    if not 1 <= s <= s_max:
        raise ValueError(f"slot count {s} outside 1..{s_max}")
    d = tokens.shape[1]
    q = ad.gather_rows(params["language/slot_queries"], np.arange(s))
    k = linear(tokens, params, "language/slot_attn/k")
    v = linear(tokens, params, "language/slot_attn/v")
    h, _ = ad.attention(q, k, v, 1.0 / math.sqrt(d))
    embeddings = [ad.gather_rows(h, np.array([i])) for i in range(s)]
    response = build_response(bind_slots(instr.object_refs, s), embeddings, template)
    return response, embeddings, logits
