"""Tier 1: template expressions that are unambiguous by construction.

Three templates are instantiated over detected structures and colors::

    the <color> block(s).
    the <color> <shape>.
    the <ordinal> block [from the <position>] of the <color> <shape>.
    the <ordinal> <color> block from the <position>.      (no shape named)

Only instantiations that the denotation oracle proves unique survive.
"""
from __future__ import annotations

import hashlib
import json
from typing import Iterable, Sequence

import numpy as np

from .errors import NoExpressible, TargetInvisible
from .render import CameraPose, RenderedImage, annotate, render
from .samples import Target, TrainingSample, single_utterance
from .scene import Scene
from .semantics import (
    ORDINALS,
    TEMPLATE_FORMS,
    RefExpr,
    Structure,
    StructureRef,
    default_position,
    denote_per_binding,
    detect_structures,
    expr_to_dict,
    is_unambiguous,
    make_expr,
)


def camera_tag(camera: CameraPose) -> str:
    blob = json.dumps(camera.to_dict(), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:8]


def image_name(scene: Scene, camera: CameraPose) -> str:
    return f"images/{scene.scene_id}_{camera_tag(camera)}.png"


def _short_hash(text: str) -> str:
    return hashlib.sha1(text.encode()).hexdigest()[:10]


def _positions_for(s: Structure, camera: CameraPose) -> tuple[str, ...]:
    if s.kind == "column":
        return ("top", "bottom")
    if s.kind in ("row", "bar"):
        a, b = s.members[0].coord, s.members[-1].coord
        axis = np.array([b.x - a.x, 0.0, b.z - a.z])
        _, right, _ = camera.basis()
        across = abs(float(axis @ right)) / (np.linalg.norm(axis) or 1.0)
        return ("left", "right") if across >= 0.5 else ("front", "back")
    return ("top", "bottom", "left", "right")


def _refs_for(s: Structure) -> list[StructureRef]:
    refs = []
    if s.color is not None:
        refs.append(StructureRef(s.kind, s.color.name))
    if s.kind == "arch":
        refs.append(StructureRef("arch"))
    return refs


def candidate_expressions(scene: Scene, camera: CameraPose,
                          forms: Sequence[str] = TEMPLATE_FORMS) -> dict[str, list[RefExpr]]:
    """Every unambiguous template instantiation for the scene, grouped by form.

    Each expression's ``intended`` set is its (verified unique) denotation.
    """
    structures = detect_structures(scene)
    seen: set[str] = set()
    pools: dict[str, list[RefExpr]] = {f: [] for f in forms}

    def offer(form: str, **slots):
        probe = make_expr(form, **slots)
        if probe.surface in seen:
            return
        seen.add(probe.surface)
        parts = [p for p in denote_per_binding(probe, scene, camera) if p]
        if len(set(parts)) != 1:
            return
        expr = make_expr(form, parts[0], **slots)
        if form == "color-plural" and expr.plural != (len(parts[0]) > 1):
            return
        if is_unambiguous(expr, scene, camera):
            pools[form].append(expr)

    colors = sorted({b.color.name for b in scene.blocks})
    if "color-plural" in forms:
        counts = {c: sum(b.color.name == c for b in scene.blocks) for c in colors}
        for c in colors:
            offer("color-plural", color=c, plural=counts[c] > 1)
    if "color-shape" in forms:
        for s in structures:
            for ref in _refs_for(s):
                offer("color-shape", reference=ref)
    if "ordinal-in-shape" in forms:
        for s in structures:
            for ref in _refs_for(s):
                positions = _positions_for(s, camera)
                n = min(len(s.members), len(ORDINALS))
                for k in range(1, n + 1):
                    if default_position(s.kind) in positions:
                        offer("ordinal-in-shape", ordinal=k, reference=ref)
                    for pos in positions:
                        offer("ordinal-in-shape", ordinal=k, position=pos, reference=ref)
        for c in colors:
            n = min(sum(b.color.name == c for b in scene.blocks), len(ORDINALS))
            for pos in ("top", "bottom", "left", "right", "front", "back"):
                for k in range(1, n + 1):
                    offer("ordinal-in-shape", ordinal=k, color=c, position=pos)
    return pools


def generate_template_expressions(scene: Scene, camera: CameraPose, budget: int, seed: int,
                                  forms: Sequence[str] = TEMPLATE_FORMS,
                                  visible: Iterable | None = None) -> list[RefExpr]:
    """Up to ``budget`` unique-denotation expressions, balanced across forms.

    Forms are served round-robin from independently shuffled pools, so per-form
    counts differ by at most one whenever the pools are deep enough. With
    ``visible`` given, expressions whose targets are not all visible are dropped.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    pools = candidate_expressions(scene, camera, forms)
    if visible is not None:
        vis = frozenset(visible)
        pools = {f: [e for e in p if e.intended <= vis] for f, p in pools.items()}
    if not any(pools.values()):
        raise NoExpressible(f"scene {scene.scene_id} admits no unambiguous template expression")
    rng = np.random.default_rng(seed)
    queues = []
    for f in forms:
        pool = pools.get(f, [])
        queues.append([pool[int(i)] for i in rng.permutation(len(pool))])
    out: list[RefExpr] = []
    while len(out) < budget and any(queues):
        for q in queues:
            if q and len(out) < budget:
                out.append(q.pop(0))
    return out


def build_short_sample(expr: RefExpr, scene: Scene, camera: CameraPose,
                       image: RenderedImage | None = None, *, tier: str = "template",
                       seed: int | None = None, sample_id: str | None = None,
                       backend: str | None = None) -> TrainingSample:
    """Pair a short expression with its image and the boxes of its targets."""
    triplets = image.annotations if image is not None and image.annotations else annotate(scene, camera)
    by_id = {t.id: t for t in triplets}
    missing = sorted(str(i) for i in expr.intended if i not in by_id)
    if missing:
        raise TargetInvisible(f"{expr.surface!r}: targets not visible: {', '.join(missing)}")
    targets = tuple(Target(i, by_id[i].bbox) for i in sorted(expr.intended))
    tag = camera_tag(camera)
    prefix = {"template": "tpl", "prompted": "gen", "dialogue": "dlg"}[tier]
    sid = sample_id or f"{prefix}_{scene.scene_id}_{tag}_{_short_hash(expr.surface)}"
    provenance = {"generator": f"tier-{tier}", "scene_id": scene.scene_id, "seed": seed,
                  "camera": camera.to_dict(), "backend": backend, "expression": expr_to_dict(expr)}
    return TrainingSample(sid, image_name(scene, camera), single_utterance(expr.surface), targets,
                          tier, provenance, image=image)


def synthesize_templates(scenes: Sequence[Scene], cameras: Sequence[CameraPose], n: int, seed: int,
                         per_view: int | None = None) -> list[TrainingSample]:
    """Template samples over every (scene, camera) view until ``n`` are collected.

    Views are visited in order; each contributes at most ``per_view`` samples
    (default: an even share of ``n``). Per-view seeds derive from ``seed``.
    """
    views = [(s, c) for s in scenes for c in cameras]
    if not views:
        return []
    share = per_view or -(-n // len(views))
    ss = np.random.SeedSequence(seed)
    child = ss.spawn(len(views))
    out: list[TrainingSample] = []
    leftovers: list[list[RefExpr]] = []
    for (scene, cam), cs in zip(views, child):
        view_seed = int(cs.generate_state(1, np.uint64)[0])
        image = render(scene, cam)
        vis = {t.id for t in image.annotations}
        try:
            exprs = generate_template_expressions(scene, cam, 10 ** 6, view_seed, visible=vis)
        except NoExpressible:
            exprs = []
        for e in exprs[:share]:
            out.append(build_short_sample(e, scene, cam, image, seed=view_seed))
        leftovers.append([(scene, cam, image, view_seed, e) for e in exprs[share:]])
    # top up from the unused tails, round-robin over views
    while len(out) < n and any(leftovers):
        for tail in leftovers:
            if tail and len(out) < n:
                scene, cam, image, view_seed, e = tail.pop(0)
                out.append(build_short_sample(e, scene, cam, image, seed=view_seed))
    return out[:n]
