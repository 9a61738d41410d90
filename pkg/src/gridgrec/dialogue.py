"""Tier 3: substructure decomposition and coreference-bearing dialogues.

A scene is split into substructures that each carry a verified expression.
The rule composer then writes a short Architect/Builder exchange that
introduces one target by its full expression and ends on a pronoun that
chains back to it.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CompositionRejected, MalformedExpr, MisalignedTargets
from .render import CameraPose, PixelBBox, RenderedImage, annotate, render
from .samples import (
    ARCHITECT,
    BUILDER,
    Dialogue,
    DialogueTurn,
    FinalMention,
    Mention,
    MentionRef,
    Target,
    TrainingSample,
    dialogue_from_dict,
)
from .scene import BlockId, Scene
from .semantics import ATOMIC_KINDS, FORMS, RefExpr, denote, detect_structures, parse_expression
from .template import camera_tag, candidate_expressions

MIN_TURNS, MAX_TURNS = 4, 10
ANAPHORS = ("it", "them", "those", "that one")
_FORM_PREFERENCE = {"color-shape": 0, "color-plural": 1, "ordinal-in-shape": 2,
                    "canonical-i": 3, "canonical-ii": 4}


@dataclass(frozen=True)
class SubstructureExpr:
    expr: RefExpr
    member_ids: frozenset
    member_bboxes: tuple[PixelBBox, ...]

    def __post_init__(self):
        if frozenset(self.expr.intended) != self.member_ids:
            raise ValueError("expression must denote exactly the member ids")
        if len(self.member_bboxes) != len(self.member_ids):
            raise ValueError("one bbox per member id")

    @property
    def sorted_ids(self) -> list[BlockId]:
        return sorted(self.member_ids)


# --------------------------------------------------------------------------
# decomposition


def _best_by_target(scene: Scene, camera: CameraPose) -> dict:
    best: dict = {}
    for pool in candidate_expressions(scene, camera).values():
        for e in pool:
            key = (_FORM_PREFERENCE[e.form], len(e.surface), e.surface)
            cur = best.get(e.intended)
            if cur is None or key < cur[0]:
                best[e.intended] = (key, e)
    return {k: v[1] for k, v in best.items()}


def _canonical_singleton(scene: Scene, camera: CameraPose, bid: BlockId) -> RefExpr | None:
    from .prompted import canonical_candidates

    cands = canonical_candidates(scene, camera, bid)
    return min(cands, key=lambda e: (len(e.surface), e.surface)) if cands else None


def _sub(expr: RefExpr, bboxes: dict) -> SubstructureExpr:
    ids = sorted(expr.intended)
    return SubstructureExpr(expr, frozenset(ids), tuple(bboxes[i] for i in ids))


def decompose(scene: Scene, camera: CameraPose, backend=None,
              image: RenderedImage | None = None) -> list[SubstructureExpr]:
    """Disjoint substructures covering the visible blocks, each with a
    uniquely denoting expression.

    Atomic structures (columns, rows, bars, color groups) are taken largest
    first when fully visible and expressible; the remaining visible blocks
    become singletons. With a ``backend``, its proposals are validated and used
    first, and the rule path fills whatever they leave uncovered. A visible
    block that no closed-grammar expression can single out stays uncovered.
    """
    triplets = image.annotations if image is not None and image.annotations else annotate(scene, camera)
    bboxes = {t.id: t.bbox for t in triplets}
    visible = frozenset(bboxes)
    covered: set = set()
    out: list[SubstructureExpr] = []

    if backend is not None:
        for e in _backend_proposals(scene, camera, backend, image or render(scene, camera)):
            if e.intended <= visible and not (e.intended & covered):
                out.append(_sub(e, bboxes))
                covered |= e.intended

    best = _best_by_target(scene, camera)
    order = {k: i for i, k in enumerate(ATOMIC_KINDS)}
    structs = [s for s in detect_structures(scene) if s.kind in order]
    structs.sort(key=lambda s: (-len(s.member_ids), order[s.kind], s.anchor.sort_key()))
    for s in structs:
        ids = s.member_ids
        if len(ids) < 2 or not ids <= visible or ids & covered or ids not in best:
            continue
        out.append(_sub(best[ids], bboxes))
        covered |= ids
    for bid in sorted(visible - covered):
        e = best.get(frozenset({bid})) or _canonical_singleton(scene, camera, bid)
        if e is not None:
            out.append(_sub(e, bboxes))
            covered.add(bid)
    out.sort(key=lambda s: s.sorted_ids[0])
    return out


def build_decompose_prompt(colors: Sequence[str]) -> str:
    return (
        "Decompose the block scene in the image into distinct substructures.\n"
        "For each, list the ids of its blocks and one referring expression that "
        "denotes exactly those blocks, ending with a period.\n"
        f"Colors: {', '.join(colors)}.\n"
        'Emit only JSON: {"substructures": [{"ids": ["A1", ...], "expression": "..."}]}\n'
    )


def _backend_proposals(scene: Scene, camera: CameraPose, backend, image: RenderedImage) -> list[RefExpr]:
    from .prompted import extract_json

    colors = sorted({b.color.name for b in scene.blocks})
    raw = backend.complete(build_decompose_prompt(colors), [image])
    obj = extract_json(raw) or {}
    out = []
    for item in obj.get("substructures", []) if isinstance(obj.get("substructures"), list) else []:
        try:
            ids = frozenset(BlockId.parse(i) for i in item["ids"])
            expr = parse_expression(item["expression"], forms=FORMS, colors=colors)
        except (KeyError, TypeError, ValueError, MalformedExpr):
            continue
        if ids and denote(expr, scene, camera) == ids:
            out.append(RefExpr(expr.form, expr.color, expr.ordinal, expr.position, expr.reference,
                               expr.perspective, expr.plural, expr.surface, ids))
    return out


# --------------------------------------------------------------------------
# composition


class _Builder:
    def __init__(self):
        self.turns: list[DialogueTurn] = []
        self.chains: dict[str, list[MentionRef]] = {}

    def say(self, speaker: str, pieces: Sequence) -> list[MentionRef]:
        """``pieces`` mixes plain strings and (text, chain_id) mention tuples."""
        text, mentions, refs = "", [], []
        for p in pieces:
            if isinstance(p, tuple):
                span, cid = p
                m = Mention(len(text), len(text) + len(span), cid)
                ref = MentionRef(len(self.turns), m.start, m.end)
                mentions.append(m)
                refs.append(ref)
                self.chains.setdefault(cid, []).append(ref)
                text += span
            else:
                text += p
        self.turns.append(DialogueTurn(speaker, text, tuple(mentions)))
        return refs


class RuleComposer:
    """Deterministic template dialogues; a pure function of inputs and seed."""

    kind = "rule-composer"

    def compose(self, substructures: Sequence[SubstructureExpr], target: SubstructureExpr,
                seed: int) -> Dialogue:
        rng = np.random.default_rng(seed)
        n = int(rng.integers(MIN_TURNS, MAX_TURNS + 1))
        n_arch = (n + 1) // 2
        plural = len(target.member_ids) > 1
        pron = ("them", "those")[int(rng.integers(2))] if plural else "it"
        others = [s for s in substructures if s is not target and s.member_ids != target.member_ids]
        tnp = target.expr.noun_phrase
        b = _Builder()
        dis = 0

        def builder_turn(i: int, last: bool):
            if last:
                b.say(BUILDER, [str(rng.choice(["Done.", "Okay, done.", "Finished."]))])
            elif i == 1 and rng.random() < 0.5:
                b.say(BUILDER, ["Which one?"])
            elif rng.random() < 0.4:
                b.say(BUILDER, ["I see ", ("them" if plural else "it", "t"), "."])
            else:
                b.say(BUILDER, [str(rng.choice(["Okay.", "Got it.", "Sure."]))])

        intro = str(rng.choice(["Look at ", "Find ", "Focus on ", "Do you see "]))
        b.say(ARCHITECT, [intro, (tnp, "t"), "?" if intro == "Do you see " else "."])
        for a in range(1, n_arch):
            builder_turn(2 * a - 1, False)
            if a == n_arch - 1:
                verb = str(rng.choice(["Now remove ", "Now move ", "Put a block on top of ", "Now pick up "]))
                tail = " one space to the left." if verb == "Now move " else "."
                final = b.say(ARCHITECT, [verb, (pron, "t"), tail])[0]
            elif others and rng.random() < 0.5 and a < n_arch - 2:
                d = others[int(rng.integers(len(others)))]
                b.say(ARCHITECT, ["Leave ", (d.expr.noun_phrase, f"d{dis}"), " where it is."])
                dis += 1
            else:
                options = [
                    ["Yes, ", ("those" if plural else "that one", "t"), "."],
                    ["Keep ", ("them" if plural else "it", "t"), " in view."],
                ]
                b.say(ARCHITECT, options[int(rng.integers(len(options)))])
        if n % 2 == 0:
            builder_turn(n - 1, True)
        chains = {cid: tuple(refs) for cid, refs in b.chains.items()}
        singles = frozenset(cid for cid, refs in chains.items() if len(refs) == 1)
        return Dialogue(tuple(b.turns), chains, FinalMention(final.turn, final.start, final.end, "t"), singles)


def compose_dialogue(substructures: Sequence[SubstructureExpr], target: SubstructureExpr,
                     composer=None, seed: int = 0) -> Dialogue:
    """A validated dialogue whose final mention refers to ``target``.

    ``composer`` is a :class:`RuleComposer` (default) or a generator backend
    whose ``complete`` returns dialogue JSON; backend output is validated and
    raises :class:`CompositionRejected` when malformed.
    """
    if target not in substructures:
        raise ValueError("target must be one of the substructures")
    composer = composer or RuleComposer()
    if hasattr(composer, "compose"):
        d = composer.compose(substructures, target, seed)
    else:
        d = _backend_dialogue(composer, substructures, target, seed)
    validate_dialogue(d, target)
    return d


def _backend_dialogue(backend, substructures, target, seed) -> Dialogue:
    from .prompted import extract_json

    listing = "\n".join(f"- {s.expr.surface}" for s in substructures)
    prompt = (
        f"Write a {MIN_TURNS}-{MAX_TURNS} turn dialogue between an Architect and a Builder about these "
        f"substructures:\n{listing}\nThe Architect must first name \"{target.expr.noun_phrase}\" in full "
        "and end on a pronoun referring to it. Annotate mention spans and chains. "
        f"Seed: {seed}. Emit only JSON in the dialogue schema.\n"
    )
    obj = extract_json(backend.complete(prompt, []))
    if obj is None:
        raise CompositionRejected("schema", "no JSON object in backend output")
    try:
        return dialogue_from_dict(obj)
    except (KeyError, TypeError, ValueError) as e:
        raise CompositionRejected("schema", f"dialogue JSON malformed: {e}")


def validate_dialogue(d: Dialogue, target: SubstructureExpr | None = None,
                      scene: Scene | None = None, camera: CameraPose | None = None) -> None:
    """Structural checks; raises :class:`CompositionRejected` on the first failure.

    With ``scene`` and ``camera`` the antecedent is also re-parsed and its
    denotation compared against the target set.
    """
    if not MIN_TURNS <= len(d.turns) <= MAX_TURNS:
        raise CompositionRejected("turn-count", f"{len(d.turns)} turns")
    for i, t in enumerate(d.turns):
        want = ARCHITECT if i % 2 == 0 else BUILDER
        if t.speaker != want:
            raise CompositionRejected("alternation", f"turn {i} is {t.speaker!r}, expected {want}")
        end = -1
        for m in sorted(t.mentions, key=lambda m: m.start):
            if not 0 <= m.start < m.end <= len(t.text) or m.start < end:
                raise CompositionRejected("span", f"turn {i} span {m.start}:{m.end}")
            if m.chain_id not in d.chains:
                raise CompositionRejected("chain", f"undeclared chain {m.chain_id!r}")
            end = m.end
    declared = {(i, m.start, m.end, m.chain_id) for i, t in enumerate(d.turns) for m in t.mentions}
    for cid, refs in d.chains.items():
        if not refs:
            raise CompositionRejected("chain", f"chain {cid!r} is empty")
        if len(refs) < 2 and cid not in d.singletons:
            raise CompositionRejected("chain", f"chain {cid!r} has one mention but is not a singleton")
        if list(refs) != sorted(refs, key=lambda r: (r.turn, r.start)):
            raise CompositionRejected("chain", f"chain {cid!r} is out of dialogue order")
        for r in refs:
            if (r.turn, r.start, r.end, cid) not in declared:
                raise CompositionRejected("chain", f"chain {cid!r} cites an undeclared span")
    fm = d.final_mention
    if fm.chain_id not in d.chains or fm.ref() not in d.chains[fm.chain_id]:
        raise CompositionRejected("final-anaphor", "final mention is not in its chain")
    if not 0 <= fm.turn < len(d.turns) or d.turns[fm.turn].speaker != ARCHITECT:
        raise CompositionRejected("final-anaphor", "final mention must sit in an Architect turn")
    if d.final_text.lower() not in ANAPHORS:
        raise CompositionRejected("final-anaphor", f"final mention {d.final_text!r} is not an anaphor")
    if fm.ref() == d.antecedent() or d.antecedent_text().lower() in ANAPHORS:
        raise CompositionRejected("antecedent", "chain does not start with a full expression")
    if target is not None:
        if d.antecedent_text() != target.expr.noun_phrase:
            raise CompositionRejected("antecedent", "antecedent is not the target's expression")
        plural = len(target.member_ids) > 1
        if (d.final_text.lower() == "it") == plural:
            raise CompositionRejected("final-anaphor", "pronoun number disagrees with the target")
    if scene is not None and camera is not None:
        try:
            expr = parse_expression(d.antecedent_text() + ".", colors=sorted({b.color.name for b in scene.blocks}))
        except MalformedExpr as e:
            raise CompositionRejected("antecedent", str(e))
        if target is not None and denote(expr, scene, camera) != target.member_ids:
            raise CompositionRejected("antecedent", "antecedent does not denote the target set")


# --------------------------------------------------------------------------
# integration


def integrate_sample(dialogue: Dialogue, image: RenderedImage, substructure: SubstructureExpr,
                     seed: int | None = None, sample_id: str | None = None,
                     composer_kind: str = RuleComposer.kind) -> TrainingSample:
    by_id = {t.id: t.bbox for t in image.annotations}
    targets = []
    for bid, box in zip(substructure.sorted_ids, substructure.member_bboxes):
        if by_id.get(bid) != box:
            raise MisalignedTargets(f"member {bid} has no matching box in the render annotation")
        targets.append(Target(bid, box))
    if image.camera is None:
        raise MisalignedTargets("image carries no camera")
    tag = camera_tag(image.camera)
    key = ",".join(map(str, substructure.sorted_ids)) + f"|{seed}"
    sid = sample_id or f"dlg_{image.scene_id}_{tag}_{hashlib.sha1(key.encode()).hexdigest()[:10]}"
    provenance = {"generator": "tier-dialogue", "scene_id": image.scene_id, "seed": seed,
                  "camera": image.camera.to_dict(), "backend": composer_kind,
                  "antecedent": substructure.expr.surface}
    return TrainingSample(sid, f"images/{image.scene_id}_{tag}.png", dialogue, tuple(targets),
                          "dialogue", provenance, image=image)


def synthesize_dialogues(scene: Scene, camera: CameraPose, n: int, seed: int,
                         composer=None, image: RenderedImage | None = None) -> list[TrainingSample]:
    """``n`` dialogue samples, cycling over reshuffled substructure targets."""
    image = image or render(scene, camera)
    subs = decompose(scene, camera, image=image)
    if not subs:
        return []
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    order: list = []
    while len(order) < n:
        order.extend(int(i) for i in rng.permutation(len(subs)))
    out = []
    for k, (i, cs) in enumerate(zip(order[:n], ss.spawn(n))):
        s = subs[i]
        dseed = int(cs.generate_state(1, np.uint64)[0])
        d = compose_dialogue(subs, s, composer, dseed)
        sample = integrate_sample(d, image, s, seed=dseed)
        sample.sample_id = f"{sample.sample_id}_{k}"
        out.append(sample)
    return out


def dialogue_fingerprint(d: Dialogue) -> str:
    from .samples import dialogue_to_dict
    return hashlib.sha1(json.dumps(dialogue_to_dict(d), sort_keys=True).encode()).hexdigest()
