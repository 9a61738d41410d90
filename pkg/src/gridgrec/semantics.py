"""Referring-expression semantics over block scenes.

Holds the closed expression grammar (AST, surface realization, parsing), the
geometric substructure detectors and the denotation function that every
synthesis tier relies on to prove an expression picks out exactly its target.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import MalformedExpr
from .render import CameraPose
from .scene import DEFAULT_PALETTE, Block, BlockColor, BlockId, GridCoord, Scene

AXES = ("vertical", "x-horizontal", "z-horizontal")
_AXIS_STEP = {"vertical": (0, 1, 0), "x-horizontal": (1, 0, 0), "z-horizontal": (0, 0, 1)}

STRUCTURE_KINDS = ("column", "row", "bar", "arch", "L-shape", "scatter-group")
ATOMIC_KINDS = ("column", "row", "bar", "scatter-group")

FORMS = ("color-plural", "color-shape", "ordinal-in-shape", "canonical-i", "canonical-ii")
TEMPLATE_FORMS = FORMS[:3]
CANONICAL_FORMS = FORMS[3:]

ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth",
            "ninth", "tenth", "eleventh", "twelfth", "thirteenth", "fourteenth", "fifteenth",
            "sixteenth", "seventeenth", "eighteenth", "nineteenth", "twentieth")
POSITIONS = ("top", "bottom", "left", "right", "front", "back")
PERSPECTIVES = ("close to you", "far from you", "on your left", "on your right")

# surface noun per structure kind; "structure" names the whole build
KIND_NOUNS = {"column": "column", "row": "row", "bar": "bar", "arch": "arch",
              "L-shape": "L-shape", "scatter-group": "group", "structure": "structure"}
NOUN_KINDS = {v: k for k, v in KIND_NOUNS.items()}
REFERENCE_KINDS = tuple(KIND_NOUNS)

_KEY_DECIMALS = 9


# --------------------------------------------------------------------------
# segments and structures


@dataclass(frozen=True)
class Segment:
    blocks: tuple[Block, ...]
    axis: str
    color: BlockColor

    def __len__(self) -> int:
        return len(self.blocks)


def detect_segments(scene: Scene) -> list[Segment]:
    """All maximal same-color contiguous runs along each axis (length 1 included)."""
    at = scene.by_coord()
    out = []
    for axis in AXES:
        step = _AXIS_STEP[axis]
        back = tuple(-s for s in step)
        for b in scene.blocks:
            prev = at.get(b.coord.offset(*back))
            if prev is not None and prev.color == b.color:
                continue
            run = [b]
            nxt = at.get(b.coord.offset(*step))
            while nxt is not None and nxt.color == b.color:
                run.append(nxt)
                nxt = at.get(nxt.coord.offset(*step))
            out.append(Segment(tuple(run), axis, b.color))
    return out


@dataclass(frozen=True)
class Structure:
    kind: str
    member_ids: frozenset
    anchor: GridCoord
    color: BlockColor | None = None
    members: tuple[Block, ...] = field(default=(), compare=False, repr=False)

    @classmethod
    def of(cls, kind: str, blocks: Iterable[Block]) -> "Structure":
        blocks = tuple(sorted(set(blocks), key=lambda b: b.coord.sort_key()))
        colors = {b.color for b in blocks}
        color = next(iter(colors)) if len(colors) == 1 else None
        return cls(kind, frozenset(b.id for b in blocks), blocks[0].coord, color, blocks)

    def centroid(self) -> np.ndarray:
        return np.mean([[b.coord.x, b.coord.y, b.coord.z] for b in self.members], axis=0)


def _arches(scene: Scene) -> list[Structure]:
    at = scene.by_coord()
    occ = set(at)
    found: dict[frozenset, Structure] = {}
    for axis, step in (("x", (1, 0, 0)), ("z", (0, 0, 1))):
        for b in scene.blocks:
            c = b.coord
            if c.y < 1 or c.offset(*(-s for s in step)) in occ:
                continue
            run = [c]
            while run[-1].offset(*step) in occ:
                run.append(run[-1].offset(*step))
            if len(run) < 3:
                continue
            legs = []
            for end in (run[0], run[-1]):
                stack = []
                y = end.y - 1
                while y >= 0 and GridCoord(end.x, y, end.z) in occ:
                    stack.append(GridCoord(end.x, y, end.z))
                    y -= 1
                legs.append(stack)
            if not legs[0] or not legs[1]:
                continue
            base0, base1 = legs[0][-1].y, legs[1][-1].y
            if base0 != base1:
                continue
            opening = [GridCoord(p.x, y, p.z) for p in run[1:-1] for y in range(base0, c.y)]
            if any(o in occ for o in opening):
                continue
            cells = set(run) | set(legs[0]) | set(legs[1])
            s = Structure.of("arch", (at[q] for q in cells))
            found.setdefault(s.member_ids, s)
    return list(found.values())


def _lshapes(segments: Sequence[Segment]) -> list[Structure]:
    vertical = [s for s in segments if s.axis == "vertical" and len(s) >= 2]
    horizontal = [s for s in segments if s.axis != "vertical" and len(s) >= 2]
    out = []
    for v in vertical:
        vends = {v.blocks[0], v.blocks[-1]}
        for h in horizontal:
            if h.color != v.color:
                continue
            shared = vends & {h.blocks[0], h.blocks[-1]}
            if len(shared) == 1 and len(set(v.blocks) & set(h.blocks)) == 1:
                out.append(Structure.of("L-shape", v.blocks + h.blocks))
    return out


def detect_structures(scene: Scene) -> list[Structure]:
    """Substructures of the scene, composite kinds first, scatter groups last.

    Every block ends up in at least one structure: blocks that fit no shape
    are pooled by color into one scatter group per color.
    """
    return list(_detect_structures(scene))


@lru_cache(maxsize=256)
def _detect_structures(scene: Scene) -> tuple[Structure, ...]:
    if not scene.has_ids:
        raise ValueError("structure detection needs a scene with assigned ids")
    segments = detect_segments(scene)
    out: list[Structure] = []
    out.extend(sorted(_arches(scene), key=lambda s: (s.anchor.sort_key(), sorted(s.member_ids))))
    out.extend(sorted(_lshapes(segments), key=lambda s: (s.anchor.sort_key(), sorted(s.member_ids))))
    for seg in segments:
        if seg.axis == "vertical" and len(seg) >= 2:
            out.append(Structure.of("column", seg.blocks))
    for seg in segments:
        if seg.axis == "vertical":
            continue
        y = seg.blocks[0].coord.y
        if y == 0 and len(seg) >= 2:
            out.append(Structure.of("row", seg.blocks))
        elif y > 0 and len(seg) >= 3:
            out.append(Structure.of("bar", seg.blocks))
    covered = set().union(*(s.member_ids for s in out)) if out else set()
    loose: dict[BlockColor, list[Block]] = {}
    for b in scene.blocks:
        if b.id not in covered:
            loose.setdefault(b.color, []).append(b)
    for color in sorted(loose):
        out.append(Structure.of("scatter-group", loose[color]))
    return tuple(out)


# --------------------------------------------------------------------------
# expression AST and surface grammar


@dataclass(frozen=True)
class StructureRef:
    kind: str
    color: str | None = None

    def __post_init__(self):
        if self.kind not in REFERENCE_KINDS:
            raise MalformedExpr(f"unknown structure kind {self.kind!r}")
        if self.kind == "structure" and self.color is not None:
            raise MalformedExpr("the whole structure takes no color")

    def noun_phrase(self) -> str:
        noun = KIND_NOUNS[self.kind]
        return f"{self.color} {noun}" if self.color else noun


@dataclass(frozen=True)
class RefExpr:
    form: str
    color: str | None = None
    ordinal: int | None = None
    position: str | None = None
    reference: StructureRef | None = None
    perspective: str | None = None
    plural: bool = False
    surface: str = ""
    intended: frozenset = field(default=frozenset(), compare=False)

    def with_surface(self) -> "RefExpr":
        return replace(self, surface=render_surface(self))

    @property
    def noun_phrase(self) -> str:
        """Surface text without the closing period (for embedding in utterances)."""
        s = self.surface or render_surface(self)
        return s[:-1] if s.endswith(".") else s


def make_expr(form: str, intended: Iterable[BlockId] = (), **slots) -> RefExpr:
    expr = RefExpr(form, intended=frozenset(intended), **slots)
    check_arity(expr)
    return expr.with_surface()


def check_arity(expr: RefExpr) -> None:
    """Raise :class:`MalformedExpr` unless the slots fit the form's template."""
    f = expr.form
    has = {k for k in ("color", "ordinal", "position", "reference", "perspective")
           if getattr(expr, k) is not None}

    def need(required: set, allowed: set):
        if not required <= has or not has <= allowed:
            raise MalformedExpr(f"{f}: slots {sorted(has)} do not fit the template")

    if f == "color-plural":
        need({"color"}, {"color"})
    elif f == "color-shape":
        need({"reference"}, {"reference"})
        if expr.reference.kind == "structure":
            raise MalformedExpr("color-shape needs a concrete shape")
    elif f == "ordinal-in-shape":
        if expr.reference is None:
            need({"ordinal", "color", "position"}, {"ordinal", "color", "position"})
        else:
            need({"ordinal", "reference"}, {"ordinal", "reference", "position"})
    elif f == "canonical-i":
        need({"color", "reference", "perspective"}, {"color", "reference", "perspective"})
    elif f == "canonical-ii":
        full = {"ordinal", "color", "position", "reference", "perspective"}
        need(full, full)
    else:
        raise MalformedExpr(f"unknown form {f!r}")
    if f != "color-plural" and expr.plural:
        raise MalformedExpr("only the color-plural form may be plural")
    if expr.ordinal is not None and not 1 <= expr.ordinal <= len(ORDINALS):
        raise MalformedExpr(f"ordinal {expr.ordinal} outside 1..{len(ORDINALS)}")
    if expr.position is not None and expr.position not in POSITIONS:
        raise MalformedExpr(f"unknown position {expr.position!r}")
    if expr.perspective is not None and expr.perspective not in PERSPECTIVES:
        raise MalformedExpr(f"unknown perspective {expr.perspective!r}")


def render_surface(expr: RefExpr) -> str:
    check_arity(expr)
    f = expr.form
    if f == "color-plural":
        return f"the {expr.color} block{'s' if expr.plural else ''}."
    if f == "color-shape":
        return f"the {expr.reference.noun_phrase()}."
    ord_word = ORDINALS[expr.ordinal - 1] if expr.ordinal else None
    if f == "ordinal-in-shape":
        if expr.reference is None:
            return f"the {ord_word} {expr.color} block from the {expr.position}."
        pos = f" from the {expr.position}" if expr.position else ""
        return f"the {ord_word} block{pos} of the {expr.reference.noun_phrase()}."
    if f == "canonical-i":
        return (f"the center {expr.color} block of the {expr.reference.noun_phrase()}, "
                f"{expr.perspective}.")
    return (f"the {ord_word} {expr.color} block from the {expr.position} of the "
            f"{expr.reference.noun_phrase()}, {expr.perspective}.")


def _alt(words: Iterable[str]) -> str:
    return "|".join(re.escape(w) for w in sorted(words, key=len, reverse=True))


@lru_cache(maxsize=8)
def _grammar(colors: tuple[str, ...]) -> list[tuple[str, re.Pattern]]:
    C = f"(?P<color>{_alt(colors)})"
    O = f"(?P<ordinal>{_alt(ORDINALS)})"
    P = f"(?P<position>{_alt(POSITIONS)})"
    R = f"(?:(?P<rcolor>{_alt(colors)}) )?(?P<noun>{_alt(NOUN_KINDS)})"
    V = f"(?P<perspective>{_alt(PERSPECTIVES)})"
    rules = [
        ("color-plural", rf"the {C} block(?P<plural>s?)\."),
        ("color-shape", rf"the {R}\."),
        ("ordinal-in-shape", rf"the {O} {C} block from the {P}\."),
        ("ordinal-in-shape", rf"the {O} block(?: from the {P})? of the {R}\."),
        ("canonical-i", rf"the center {C} block of the {R}, {V}\."),
        ("canonical-ii", rf"the {O} {C} block from the {P} of the {R}, {V}\."),
    ]
    return [(form, re.compile(rx)) for form, rx in rules]


def _normalize(text: str) -> str:
    text = " ".join(text.strip().split())
    return text[:1].lower() + text[1:]


def parse_expression(text: str, forms: Sequence[str] = FORMS,
                     colors: Sequence[str] | None = None) -> RefExpr:
    """Parse surface text back into a :class:`RefExpr` (closed grammar only)."""
    colors = tuple(colors or (c.name for c in DEFAULT_PALETTE))
    norm = _normalize(text)
    hits = []
    for form, rx in _grammar(colors):
        if form not in forms:
            continue
        m = rx.fullmatch(norm)
        if m:
            hits.append((form, m))
    if len(hits) != 1:
        raise MalformedExpr(f"text does not match exactly one pattern: {text!r}")
    form, m = hits[0]
    g = m.groupdict()
    ref = None
    if g.get("noun"):
        ref = StructureRef(NOUN_KINDS[g["noun"]], g.get("rcolor"))
    expr = RefExpr(
        form,
        color=g.get("color"),
        ordinal=ORDINALS.index(g["ordinal"]) + 1 if g.get("ordinal") else None,
        position=g.get("position"),
        reference=ref,
        perspective=g.get("perspective"),
        plural=bool(g.get("plural")),
    )
    check_arity(expr)
    return replace(expr, surface=render_surface(expr))


def expr_to_dict(expr: RefExpr) -> dict:
    ref = None if expr.reference is None else {"kind": expr.reference.kind, "color": expr.reference.color}
    return {
        "form": expr.form,
        "slots": {"color": expr.color, "ordinal": expr.ordinal, "position": expr.position,
                  "reference": ref, "perspective": expr.perspective, "plural": expr.plural},
        "surface": expr.surface,
        "intended": sorted(str(i) for i in expr.intended),
    }


def expr_from_dict(d: dict) -> RefExpr:
    s = d["slots"]
    ref = None if s.get("reference") is None else StructureRef(s["reference"]["kind"], s["reference"].get("color"))
    expr = RefExpr(d["form"], s.get("color"), s.get("ordinal"), s.get("position"), ref,
                   s.get("perspective"), bool(s.get("plural", False)), d.get("surface", ""),
                   frozenset(BlockId.parse(i) for i in d.get("intended", ())))
    check_arity(expr)
    return expr


# --------------------------------------------------------------------------
# denotation


@dataclass(frozen=True, eq=False)
class _View:
    """Camera-dependent per-block quantities, keyed by block id."""

    screen_u: dict
    depth: dict
    distance: dict


@lru_cache(maxsize=256)
def _view(scene: Scene, camera: CameraPose) -> _View:
    centers = np.array([[b.coord.x + 0.5, b.coord.y + 0.5, b.coord.z + 0.5] for b in scene.blocks])
    if len(centers) == 0:
        return _View({}, {}, {})
    u, _, depth = camera.project(centers)
    dist = np.linalg.norm(centers - np.asarray(camera.position), axis=1)
    ids = [b.id for b in scene.blocks]
    rnd = lambda a: [round(float(x), _KEY_DECIMALS) for x in a]  # noqa: E731
    return _View(dict(zip(ids, rnd(u))), dict(zip(ids, rnd(depth))), dict(zip(ids, rnd(dist))))


def direction_key(position: str, block: Block, view: _View):
    """Ordering key for "from the <position>": smaller comes first."""
    if position == "top":
        return -block.coord.y
    if position == "bottom":
        return block.coord.y
    if position == "left":
        return view.screen_u[block.id]
    if position == "right":
        return -view.screen_u[block.id]
    if position == "front":
        return view.depth[block.id]
    if position == "back":
        return -view.depth[block.id]
    raise MalformedExpr(f"unknown position {position!r}")


def default_position(kind: str | None) -> str:
    return "left" if kind in ("row", "bar", "scatter-group") else "top"


def bindings(ref: StructureRef | None, scene: Scene) -> list[tuple[Block, ...]]:
    """Member tuples of every structure the reference slot can bind to."""
    if ref is None or ref.kind == "structure":
        return [scene.blocks]
    out = []
    for s in _detect_structures(scene):
        if s.kind != ref.kind:
            continue
        if ref.color is not None and (s.color is None or s.color.name != ref.color):
            continue
        out.append(s.members)
    return out


def _select_rank(blocks: Sequence[Block], position: str, k: int, view: _View) -> list[Block]:
    keys = sorted({direction_key(position, b, view) for b in blocks})
    if k > len(keys):
        return []
    want = keys[k - 1]
    return [b for b in blocks if direction_key(position, b, view) == want]


def _select_center(blocks: Sequence[Block], members: Sequence[Block]) -> list[Block]:
    if not blocks:
        return []
    cen = np.mean([[m.coord.x, m.coord.y, m.coord.z] for m in members], axis=0)
    d = {b: round(float(np.linalg.norm(np.array(b.coord.as_tuple(), float) - cen)), _KEY_DECIMALS)
         for b in blocks}
    best = min(d.values())
    return [b for b in blocks if d[b] == best]


def _select_perspective(blocks: Sequence[Block], phrase: str, view: _View) -> list[Block]:
    if not blocks:
        return []
    if phrase == "close to you":
        key = lambda b: view.distance[b.id]  # noqa: E731
    elif phrase == "far from you":
        key = lambda b: -view.distance[b.id]  # noqa: E731
    elif phrase == "on your left":
        key = lambda b: view.screen_u[b.id]  # noqa: E731
    elif phrase == "on your right":
        key = lambda b: -view.screen_u[b.id]  # noqa: E731
    else:
        raise MalformedExpr(f"unknown perspective {phrase!r}")
    best = min(key(b) for b in blocks)
    return [b for b in blocks if key(b) == best]


def _denote_binding(expr: RefExpr, members: Sequence[Block], view: _View) -> frozenset:
    if expr.form == "color-shape":
        return frozenset(b.id for b in members)
    dom = list(members)
    if expr.color is not None:
        dom = [b for b in dom if b.color.name == expr.color]
    if expr.form in ("ordinal-in-shape", "canonical-ii"):
        pos = expr.position or default_position(expr.reference.kind if expr.reference else None)
        dom = _select_rank(dom, pos, expr.ordinal, view)
    elif expr.form == "canonical-i":
        dom = _select_center(dom, members)
    if expr.perspective is not None:
        dom = _select_perspective(dom, expr.perspective, view)
    return frozenset(b.id for b in dom)


def denote_per_binding(expr: RefExpr, scene: Scene, camera: CameraPose) -> list[frozenset]:
    check_arity(expr)
    view = _view(scene, camera)
    return [_denote_binding(expr, members, view) for members in bindings(expr.reference, scene)]


def denote(expr: RefExpr, scene: Scene, camera: CameraPose) -> frozenset:
    """Blocks satisfying the expression, unioned over all reference bindings.

    May be empty (the no-target case). Always a subset of the scene's ids.
    """
    out: frozenset = frozenset()
    for part in denote_per_binding(expr, scene, camera):
        out |= part
    return out


def is_unambiguous(expr: RefExpr, scene: Scene, camera: CameraPose) -> bool:
    try:
        parts = denote_per_binding(expr, scene, camera)
    except MalformedExpr:
        return False
    intended = frozenset(expr.intended)
    if not intended:
        return False
    union = frozenset().union(*parts) if parts else frozenset()
    if union != intended:
        return False
    if any(p and p != intended for p in parts):
        return False
    if expr.form == "color-plural":
        return expr.plural == (len(intended) > 1)
    if expr.form != "color-shape":
        return len(intended) == 1
    return True
