import dataclasses
import json

import pytest

import oracle
from gridgrec.dialogue import (
    ANAPHORS,
    MAX_TURNS,
    MIN_TURNS,
    RuleComposer,
    SubstructureExpr,
    compose_dialogue,
    decompose,
    dialogue_fingerprint,
    integrate_sample,
    synthesize_dialogues,
    validate_dialogue,
)
from gridgrec.errors import CompositionRejected, MisalignedTargets
from gridgrec.render import PixelBBox, annotate, render
from gridgrec.samples import ARCHITECT, BUILDER, dialogue_from_dict, dialogue_to_dict


def test_decompose_arch_covers_visible_blocks(arch_scene, camera):
    subs = decompose(arch_scene, camera)
    visible = {t.id for t in annotate(arch_scene, camera)}
    members = [s.member_ids for s in subs]
    assert set().union(*members) == visible
    assert sum(len(m) for m in members) == len(visible)
    surf = {s.expr.surface for s in subs}
    assert "the red bar." in surf
    for s in subs:
        assert oracle.uniquely_denotes(s.expr.surface, {str(i) for i in s.member_ids}, arch_scene, camera)


def test_decompose_generated_scenes_are_disjoint(scenes, camera):
    for sc in scenes:
        subs = decompose(sc, camera)
        seen = set()
        for s in subs:
            assert not (s.member_ids & seen)
            seen |= s.member_ids
        assert [s.sorted_ids[0] for s in subs] == sorted(s.sorted_ids[0] for s in subs)


def test_substructure_validation(arch_scene, camera):
    s = decompose(arch_scene, camera)[0]
    with pytest.raises(ValueError):
        SubstructureExpr(s.expr, s.member_ids, s.member_bboxes + (PixelBBox(0, 0, 1, 1),))
    with pytest.raises(ValueError):
        SubstructureExpr(s.expr, frozenset(), ())


def test_backend_proposals_used_first(arch_scene, camera):
    class Proposer:
        kind = "mock"

        def complete(self, prompt, images):
            return json.dumps({"substructures": [
                {"ids": ["A1", "A3", "A5"], "expression": "the blue blocks."},
                {"ids": ["A6"], "expression": "the red bar."},  # wrong denotation: dropped
            ]})

    subs = decompose(arch_scene, camera, backend=Proposer())
    first = next(s for s in subs if "A1" in map(str, s.member_ids))
    assert first.expr.surface == "the blue blocks."
    assert not any(s.member_ids == {arch_scene.by_id()["A6"].id} and s.expr.surface == "the red bar."
                   for s in subs)


def _rule_dialogues(sc, camera, seeds=range(20)):
    subs = decompose(sc, camera)
    for k in seeds:
        t = subs[k % len(subs)]
        yield subs, t, compose_dialogue(subs, t, seed=k)


def test_rule_dialogues_validate(arch_scene, camera):
    for subs, t, d in _rule_dialogues(arch_scene, camera):
        validate_dialogue(d, t, arch_scene, camera)
        assert MIN_TURNS <= len(d.turns) <= MAX_TURNS
        assert [x.speaker for x in d.turns] == [ARCHITECT, BUILDER] * (len(d.turns) // 2) + [ARCHITECT] * (len(d.turns) % 2)
        assert d.final_text.lower() in ANAPHORS
        assert d.antecedent_text() == t.expr.noun_phrase
        assert (d.final_text == "it") == (len(t.member_ids) == 1)
        assert d.final_mention.turn == max(i for i, x in enumerate(d.turns) if x.speaker == ARCHITECT)


def test_turn_counts_span_range(arch_scene, camera):
    lens = {len(d.turns) for _, _, d in _rule_dialogues(arch_scene, camera, range(200))}
    assert lens == set(range(MIN_TURNS, MAX_TURNS + 1))


def test_composition_is_seeded(arch_scene, camera):
    subs = decompose(arch_scene, camera)
    a = compose_dialogue(subs, subs[0], seed=3)
    b = compose_dialogue(subs, subs[0], seed=3)
    assert dialogue_fingerprint(a) == dialogue_fingerprint(b)
    assert dialogue_from_dict(dialogue_to_dict(a)) == a


def test_target_must_be_listed(arch_scene, camera):
    subs = decompose(arch_scene, camera)
    with pytest.raises(ValueError):
        compose_dialogue(subs[1:], subs[0])


class JsonComposer:
    kind = "mock-backend"

    def __init__(self, payload):
        self.payload = payload

    def complete(self, prompt, images):
        return "Here is the dialogue: " + json.dumps(self.payload)


def test_backend_dialogue_accepted_when_valid(arch_scene, camera):
    subs = decompose(arch_scene, camera)
    good = dialogue_to_dict(RuleComposer().compose(subs, subs[0], 1))
    d = compose_dialogue(subs, subs[0], JsonComposer(good))
    assert d.final_text.lower() in ANAPHORS


def test_non_alternating_backend_dialogue_rejected(arch_scene, camera):
    subs = decompose(arch_scene, camera)
    bad = dialogue_to_dict(RuleComposer().compose(subs, subs[0], 1))
    bad["turns"][1]["speaker"] = ARCHITECT
    with pytest.raises(CompositionRejected) as ei:
        compose_dialogue(subs, subs[0], JsonComposer(bad))
    assert ei.value.reason == "alternation"


def test_malformed_backend_dialogue_rejected(arch_scene, camera):
    subs = decompose(arch_scene, camera)
    with pytest.raises(CompositionRejected) as ei:
        compose_dialogue(subs, subs[0], JsonComposer({"turns": "nope"}))
    assert ei.value.reason == "schema"


@pytest.mark.parametrize("mutate,reason", [
    (lambda d: d.update(turns=d["turns"][:2]), "turn-count"),
    (lambda d: d["final_mention"].update(start=0, end=3), "final-anaphor"),
    (lambda d: d["turns"][0]["mentions"][0].update(end=10_000), "span"),
])
def test_structural_failures(arch_scene, camera, mutate, reason):
    subs = decompose(arch_scene, camera)
    raw = dialogue_to_dict(RuleComposer().compose(subs, subs[0], 2))
    mutate(raw)
    with pytest.raises(CompositionRejected) as ei:
        validate_dialogue(dialogue_from_dict(raw), subs[0])
    assert ei.value.reason == reason


def test_number_agreement_checked(arch_scene, camera):
    subs = decompose(arch_scene, camera)
    plural = next(s for s in subs if len(s.member_ids) > 1)
    d = compose_dialogue(subs, plural, seed=0)
    fm = d.final_mention
    turn = d.turns[fm.turn]
    text = turn.text[:fm.start] + "it" + turn.text[fm.end:]
    shift = 2 - (fm.end - fm.start)
    raw = dialogue_to_dict(d)
    raw["turns"][fm.turn]["text"] = text
    for m in raw["turns"][fm.turn]["mentions"]:
        if m["start"] == fm.start:
            m["end"] = fm.start + 2
    for c in raw["chains"]:
        for m in c["mentions"]:
            if m["turn"] == fm.turn and m["start"] == fm.start:
                m["end"] = fm.start + 2
    raw["final_mention"]["end"] = fm.start + 2
    assert shift <= 0
    with pytest.raises(CompositionRejected) as ei:
        validate_dialogue(dialogue_from_dict(raw), plural)
    assert ei.value.reason == "final-anaphor"


def test_integrate_sample_boxes(arch_scene, camera):
    img = render(arch_scene, camera)
    subs = decompose(arch_scene, camera, image=img)
    d = compose_dialogue(subs, subs[0], seed=0)
    s = integrate_sample(d, img, subs[0], seed=0)
    assert s.tier == "dialogue" and s.target_ids == subs[0].member_ids
    assert s.mention_only_text() == subs[0].expr.noun_phrase
    moved = dataclasses.replace(subs[0], member_bboxes=tuple(
        PixelBBox(b.x + 5, b.y, b.w, b.h) for b in subs[0].member_bboxes))
    with pytest.raises(MisalignedTargets):
        integrate_sample(d, img, moved)


def test_synthesize_dialogues(scenes, camera):
    out = synthesize_dialogues(scenes[0], camera, 25, seed=1)
    assert len(out) == 25 and len({s.sample_id for s in out}) == 25
    for s in out:
        validate_dialogue(s.dialogue, None, scenes[0], camera)


def test_dialogue_sample_round_trip(arch_scene, camera):
    from gridgrec.samples import loads_sample, dumps_sample, sample_to_dict
    img = render(arch_scene, camera)
    subs = decompose(arch_scene, camera, image=img)
    bridge = next(s for s in subs if s.expr.surface == "the red bar.")
    s = integrate_sample(compose_dialogue(subs, bridge, seed=5), img, bridge, seed=5)
    assert len(s.targets) == 3
    assert sample_to_dict(loads_sample(dumps_sample(s))) == sample_to_dict(s)
