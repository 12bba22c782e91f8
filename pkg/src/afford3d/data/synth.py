"""Parametric labelled shapes for end-to-end runs without a real corpus.

Each catalog object is a handful of parametric surface parts. Affordance
regions are sets of parts (optionally cut by a predicate). Ground-truth masks
are 1 on the region, fall off with a cosine over ``band`` (normalised units)
and are 0 beyond.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import PointCloud
from ..language import Instruction
from .schema import InstructionSample, Step, normalize

Sampler = Callable[[np.random.Generator, int], np.ndarray]


# ---------------------------------------------------------------- surface primitives

def cylinder_side(radius, z0, z1, cx=0.0, cy=0.0) -> Sampler:
    def sample(rng, n):
        t = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(z0, z1, n)
        return np.stack([cx + radius * np.cos(t), cy + radius * np.sin(t), z], axis=1)
    return sample


def annulus(r0, r1, z, cx=0.0, cy=0.0) -> Sampler:
    def sample(rng, n):
        t = rng.uniform(0, 2 * np.pi, n)
        r = np.sqrt(rng.uniform(r0 * r0, r1 * r1, n))
        return np.stack([cx + r * np.cos(t), cy + r * np.sin(t), np.full(n, z)], axis=1)
    return sample


def torus_arc(big_r, small_r, center, t0, t1, plane="xz") -> Sampler:
    """Tube of radius small_r around an arc of radius big_r in the given plane."""
    center = np.asarray(center, dtype=np.float64)

    def sample(rng, n):
        t = rng.uniform(t0, t1, n)
        p = rng.uniform(0, 2 * np.pi, n)
        rr = big_r + small_r * np.cos(p)
        a, b, c = rr * np.cos(t), rr * np.sin(t), small_r * np.sin(p)
        if plane == "xz":
            pts = np.stack([a, c, b], axis=1)
        elif plane == "yz":
            pts = np.stack([c, a, b], axis=1)
        else:
            pts = np.stack([a, b, c], axis=1)
        return pts + center
    return sample


def box_surface(size, center, skip: Sequence[str] = ()) -> Sampler:
    """Faces of an axis-aligned box; ``skip`` drops faces like '+z' or '-y'."""
    size = np.asarray(size, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    faces = [(ax, sgn) for ax in range(3) for sgn in (-1, 1)
             if f"{'+' if sgn > 0 else '-'}{'xyz'[ax]}" not in skip]
    areas = np.array([np.prod(np.delete(size, ax)) for ax, _ in faces])

    def sample(rng, n):
        which = rng.choice(len(faces), size=n, p=areas / areas.sum())
        pts = rng.uniform(-0.5, 0.5, (n, 3)) * size
        for i, (ax, sgn) in enumerate(faces):
            pts[which == i, ax] = sgn * size[ax] / 2
        return pts + center
    return sample


def rect(size_a, size_b, center, normal_axis) -> Sampler:
    center = np.asarray(center, dtype=np.float64)
    axes = [a for a in range(3) if a != normal_axis]

    def sample(rng, n):
        pts = np.zeros((n, 3))
        pts[:, axes[0]] = rng.uniform(-size_a / 2, size_a / 2, n)
        pts[:, axes[1]] = rng.uniform(-size_b / 2, size_b / 2, n)
        return pts + center
    return sample


def sphere(radius, center) -> Sampler:
    center = np.asarray(center, dtype=np.float64)

    def sample(rng, n):
        v = rng.normal(size=(n, 3))
        return center + radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    return sample


# ---------------------------------------------------------------- catalog

@dataclass
class Part:
    name: str
    sampler: Sampler
    area: float


@dataclass
class ObjectSpec:
    name: str
    build: Callable[[np.random.Generator], list[Part]]
    # affordance -> (part names, optional predicate on raw part-frame points)
    regions: dict[str, tuple[tuple[str, ...], Callable | None]]


def _jit(rng, x, spread=0.12):
    return x * rng.uniform(1 - spread, 1 + spread)


def _mug(rng):
    r, h = _jit(rng, 0.4), _jit(rng, 1.0)
    wall = 0.14
    hr = _jit(rng, 0.22)
    return [
        Part("body", cylinder_side(r, 0, h), 2 * np.pi * r * h),
        Part("bottom", annulus(0, r, 0), np.pi * r * r),
        Part("interior", cylinder_side(r - wall, 0.06, h), 2 * np.pi * (r - wall) * h),
        Part("interior_bottom", annulus(0, r - wall, 0.06), np.pi * (r - wall) ** 2),
        Part("rim", annulus(r - wall, r + 0.005, h), 2 * np.pi * r * 0.08),
        Part("handle", torus_arc(hr, 0.045, (r + 0.02, 0, h / 2), -np.pi / 2, np.pi / 2, "xz"),
             np.pi * hr * 2 * np.pi * 0.045 * 2.5),
    ]


def _lip(pts):
    z = pts[:, 2]
    return z >= z.max() - 0.15


def _door(rng):
    w, h, t = _jit(rng, 1.0), _jit(rng, 2.0), 0.08
    kx = w / 2 - _jit(rng, 0.15)
    return [
        Part("slab", box_surface((w, t, h), (0, 0, h / 2)), 2 * w * h),
        Part("knob", sphere(0.06, (kx, -t / 2 - 0.06, h * 0.48)), 0.35),
        Part("knob_back", sphere(0.06, (kx, t / 2 + 0.06, h * 0.48)), 0.35),
    ]


def _microwave(rng):
    w, d, h = _jit(rng, 1.2), _jit(rng, 0.8), _jit(rng, 0.7)
    pw = w * 0.72
    return [
        Part("shell", box_surface((w, d, h), (0, 0, h / 2), skip=("-y",)), 2 * (w * d + d * h) + w * h),
        Part("panel", rect(pw, h * 0.9, (-w / 2 + pw / 2 + 0.02, -d / 2, h / 2), 1), 2 * pw * h),
        Part("controls", rect(w - pw - 0.06, h * 0.9, (w / 2 - (w - pw) / 2 + 0.01, -d / 2, h / 2), 1),
             (w - pw) * h * 0.9),
        Part("cavity", box_surface((pw * 0.9, d * 0.8, h * 0.75), (-w / 2 + pw / 2 + 0.02, 0.02, h / 2),
                                   skip=("-y",)), 1.6),
    ]


def _microwave_edge(pts):
    # outer vertical quarter of the door panel, where the handle would be
    x = pts[:, 0]
    return x > x.min() + 0.75 * (x.max() - x.min())


def _bag(rng):
    w, d, h = _jit(rng, 0.8), _jit(rng, 0.3), _jit(rng, 0.6)
    sr = _jit(rng, 0.22)
    return [
        Part("body", box_surface((w, d, h), (0, 0, h / 2), skip=("+z",)), 2 * (w * h + d * h) + w * d),
        Part("opening", rect(w * 0.95, d * 0.9, (0, 0, h), 2), w * d),
        Part("strap", torus_arc(sr, 0.03, (0, 0, h), 0, np.pi, "xz"), np.pi * sr * 0.4),
    ]


def _knife(rng):
    bl, bw = _jit(rng, 1.2), _jit(rng, 0.22)
    hl = _jit(rng, 0.55)
    return [
        Part("blade", box_surface((bl, 0.02, bw), (bl / 2, 0, 0)), 2 * bl * bw),
        Part("handle", lambda g, n: cylinder_side(0.06, -hl, 0)(g, n)[:, [2, 0, 1]], 2 * np.pi * 0.06 * hl * 1.5),
    ]


def _blade_edge(pts):
    z = pts[:, 2]
    return z < z.min() + 0.25 * (z.max() - z.min())


def _blade_tip(pts):
    x = pts[:, 0]
    return x > x.max() - 0.18 * (x.max() - x.min())


def _faucet(rng):
    bh = _jit(rng, 0.5)
    sr = _jit(rng, 0.3)
    return [
        Part("base", cylinder_side(0.08, 0, bh), 2 * np.pi * 0.08 * bh),
        Part("spout", torus_arc(sr, 0.05, (sr, 0, bh), np.pi / 2, np.pi, "xz"), np.pi * sr * 0.35),
        Part("lever", box_surface((0.05, 0.3, 0.05), (-0.02, 0.12, bh + 0.06)), 0.08),
    ]


def _earphone(rng):
    br = _jit(rng, 0.5)
    cup_r = _jit(rng, 0.16)
    return [
        Part("headband", torus_arc(br, 0.03, (0, 0, 0), 0.1, np.pi - 0.1, "yz"), np.pi * br * 0.15),
        Part("cup_left", cylinder_side(cup_r, 0, 0.1, 0, 0), 2 * np.pi * cup_r * 0.1),
        Part("pad_left", annulus(0, cup_r, 0.1), np.pi * cup_r ** 2),
        Part("cup_right", cylinder_side(cup_r, 0, 0.1, 0, 0), 2 * np.pi * cup_r * 0.1),
        Part("pad_right", annulus(0, cup_r, 0.1), np.pi * cup_r ** 2),
    ]


CATALOG: dict[str, ObjectSpec] = {
    "mug": ObjectSpec("mug", _mug, {
        "grasp": (("handle",), None),
        "contain": (("interior", "interior_bottom"), None),
        "pour": (("rim", "body", "interior"), _lip),
    }),
    "door": ObjectSpec("door", _door, {"open": (("knob", "knob_back"), None)}),
    "microwave": ObjectSpec("microwave", _microwave, {
        "open": (("panel",), _microwave_edge),
        "contain": (("cavity",), None),
    }),
    "bag": ObjectSpec("bag", _bag, {
        "grasp": (("strap",), None),
        "contain": (("opening",), None),
    }),
    "knife": ObjectSpec("knife", _knife, {
        "grasp": (("handle",), None),
        "cut": (("blade",), _blade_edge),
        "stab": (("blade",), _blade_tip),
    }),
    "faucet": ObjectSpec("faucet", _faucet, {"open": (("lever",), None)}),
    "earphone": ObjectSpec("earphone", _earphone, {
        "grasp": (("headband",), None),
        "listen": (("pad_left", "pad_right", "cup_left", "cup_right"), None),
    }),
}


# ---------------------------------------------------------------- instance sampling

@dataclass
class SynthObject:
    name: str
    cloud: PointCloud
    part_of: np.ndarray                 # part name per point
    masks: dict[str, np.ndarray]
    band: float


def _allocate(areas: np.ndarray, n: int) -> np.ndarray:
    raw = areas / areas.sum() * n
    counts = np.floor(raw).astype(int)
    counts = np.maximum(counts, 1)
    while counts.sum() > n:
        counts[np.argmax(counts)] -= 1
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    i = 0
    while counts.sum() < n:
        counts[order[i % len(order)]] += 1
        i += 1
    return counts


def _earphone_layout(pts_by_part: dict[str, np.ndarray]) -> None:
    # cups are sampled along +z at the origin; turn them so their axis runs
    # along y at both band ends with the pads facing inward
    r = np.abs(pts_by_part["headband"][:, 1]).max()
    for side, sgn in (("left", -1.0), ("right", 1.0)):
        for part in (f"cup_{side}", f"pad_{side}"):
            local = pts_by_part[part]
            pts_by_part[part] = np.stack(
                [local[:, 0], sgn * (r + 0.1 - local[:, 2]), local[:, 1] - 0.02], axis=1)


def synth_object(name: str, rng: np.random.Generator, n_points: int = 1024, band: float = 0.05,
                 rotate: bool = True, jitter: float = 0.004) -> SynthObject:
    if name not in CATALOG:
        raise KeyError(f"unknown catalog entry {name!r}; known: {sorted(CATALOG)}")
    spec = CATALOG[name]
    parts = spec.build(rng)
    counts = _allocate(np.array([p.area for p in parts]), n_points)
    pts_by_part = {p.name: p.sampler(rng, c) for p, c in zip(parts, counts)}
    if name == "earphone":
        _earphone_layout(pts_by_part)
    # region predicates act on each part's own points before any rotation
    region_members: dict[str, np.ndarray] = {}
    offsets = np.cumsum([0] + [len(pts_by_part[p.name]) for p in parts])
    for aff, (part_names, pred) in spec.regions.items():
        member = np.zeros(n_points, dtype=bool)
        for i, p in enumerate(parts):
            if p.name in part_names:
                sel = np.ones(len(pts_by_part[p.name]), dtype=bool)
                if pred is not None:
                    sel = pred(pts_by_part[p.name])
                member[offsets[i]:offsets[i + 1]] = sel
        region_members[aff] = member
    coords = np.concatenate([pts_by_part[p.name] for p in parts], axis=0)
    part_of = np.concatenate([[p.name] * len(pts_by_part[p.name]) for p in parts])
    coords = coords + rng.normal(0.0, jitter, coords.shape)
    if rotate:
        t = rng.uniform(-np.pi, np.pi)
        c, s = np.cos(t), np.sin(t)
        coords = coords @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
    cloud = normalize(PointCloud(coords))
    tree_pts = cloud.coords
    masks = {aff: soft_mask(tree_pts, member, band) for aff, member in region_members.items()}
    return SynthObject(name, cloud, part_of, masks, band)


def soft_mask(points: np.ndarray, member: np.ndarray, band: float) -> np.ndarray:
    """1 on member points, cosine falloff with distance out to ``band``, else 0."""
    mask = np.zeros(len(points))
    if not member.any():
        return mask
    d, _ = cKDTree(points[member]).query(points)
    d[member] = 0.0
    inside = d < band
    mask[inside] = 0.5 * (1.0 + np.cos(np.pi * d[inside] / band))
    return np.clip(mask, 0.0, 1.0)


# ---------------------------------------------------------------- instructions

PHRASES = {
    "grasp": ["grasp the {obj}", "pick up the {obj} and carry it", "where should i hold the {obj}",
              "hold the {obj} firmly"],
    "contain": ["put the food into the {obj}", "fill the {obj} with something",
                "where does the {obj} hold things", "store items inside the {obj}"],
    "pour": ["pour water out of the {obj}", "tip the {obj} to pour", "empty the {obj} by pouring"],
    "open": ["open the {obj}", "where do i touch to open the {obj}", "pull the {obj} open"],
    "cut": ["cut the bread with the {obj}", "slice an apple using the {obj}", "which part of the {obj} cuts"],
    "stab": ["stab the meat with the {obj}", "pierce the foil using the {obj}", "poke a hole with the {obj}"],
    "listen": ["listen to music with the {obj}", "which part of the {obj} goes on the ears",
               "hear the sound through the {obj}"],
}

SEQ_JOINERS = [
    ("first {0}, then {1}", "first {0}, then {1}, finally {2}"),
    ("{0} and then {1}", "{0}, then {1} and then {2}"),
    ("to finish the job {0}, next {1}", "to finish the job {0}, next {1}, lastly {2}"),
]


def _phrase(rng, aff, obj):
    bank = PHRASES[aff]
    return bank[rng.integers(len(bank))].format(obj=obj)


def _affordances(name: str, exclude: set) -> list[str]:
    return [a for a in CATALOG[name].regions if (name, a) not in exclude]


def synth_generate(seed: int, n: int, catalog: Sequence[str] | None = None, n_points: int = 1024,
                   kind: str = "single", seq_fraction: float = 0.5, band: float = 0.05,
                   rotate: bool = True, exclude: Sequence[tuple[str, str]] = ()) -> list[InstructionSample]:
    """Generate ``n`` samples; ``kind`` is 'single', 'sequential' or 'mixed'."""
    names = list(catalog) if catalog is not None else sorted(CATALOG)
    if not names:
        raise ValueError("synth_generate: empty catalog")
    for name in names:
        if name not in CATALOG:
            raise KeyError(f"unknown catalog entry {name!r}; known: {sorted(CATALOG)}")
    if kind not in ("single", "sequential", "mixed"):
        raise ValueError(f"unknown sample kind {kind!r}")
    excl = {tuple(p) for p in exclude}
    rng = np.random.default_rng(seed)
    multi = [m for m in names if len(_affordances(m, excl)) >= 2]
    out = []
    for i in range(n):
        sequential = kind == "sequential" or (kind == "mixed" and rng.uniform() < seq_fraction)
        sid = f"synth-{seed}-{i:05d}"
        if not sequential:
            choices = [(m, a) for m in names for a in _affordances(m, excl)]
            obj, aff = choices[rng.integers(len(choices))]
            so = synth_object(obj, rng, n_points, band, rotate)
            text = _phrase(rng, aff, obj)
            out.append(InstructionSample(sid, Instruction(text, (obj,)), {obj: so.cloud},
                                         [Step(obj, aff, so.masks[aff])], "single", obj, []))
            continue
        n_steps = int(rng.integers(2, 4))
        steps = None
        if len(names) >= 2 and (not multi or rng.uniform() < 0.5):
            o1, o2 = (str(o) for o in rng.choice(names, size=2, replace=False))
            a1, a2 = _affordances(o1, excl), _affordances(o2, excl)
            if a1 and a2:
                steps = [(o1, a1[rng.integers(len(a1))]), (o2, a2[rng.integers(len(a2))])]
                rest = [(o, a) for o in (o1, o2) for a in _affordances(o, excl) if (o, a) not in steps]
                if n_steps == 3 and rest:
                    extra = rest[rng.integers(len(rest))]
                    # steps stay grouped by object
                    steps.insert(1 if extra[0] == o1 else 2, extra)
        if steps is None:
            if not multi:
                raise ValueError("synth_generate: no catalog entry supports a sequential task")
            obj = multi[rng.integers(len(multi))]
            affs = _affordances(obj, excl)
            steps = [(obj, str(a)) for a in rng.permutation(affs)[:min(n_steps, len(affs))]]
        step_objs = [o for o, _ in steps]
        uniq = list(dict.fromkeys(step_objs))
        clouds = {o: synth_object(o, rng, n_points, band, rotate) for o in uniq}
        phrases = [_phrase(rng, a, o) for o, a in steps]
        joiner = SEQ_JOINERS[rng.integers(len(SEQ_JOINERS))][len(steps) - 2]
        text = joiner.format(*phrases)
        out.append(InstructionSample(
            sid, Instruction(text, tuple(step_objs)), {o: c.cloud for o, c in clouds.items()},
            [Step(o, a, clouds[o].masks[a]) for o, a in steps], "sequential", step_objs[0], []))
    return out
