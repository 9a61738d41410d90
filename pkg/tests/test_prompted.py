import io
import json
import urllib.error
from collections import Counter
from pathlib import Path

import pytest

import oracle
from gridgrec.errors import BackendUnavailable, DegenerateCrop
from gridgrec.prompted import (
    PATTERN_I,
    PATTERN_II,
    AdversarialBackend,
    RemoteHTTPBackend,
    Rejection,
    RuleBackend,
    build_prompt,
    canonical_candidates,
    crop_rect,
    extract_json,
    identify_target,
    make_crop,
    parse_and_validate,
    synthesize_prompted,
)
from gridgrec.render import AnnotationTriplet, PixelBBox, render
from gridgrec.scene import BlockId, GridCoord

DATA = Path(__file__).parent / "data"


def _target(img, bid):
    return next(t for t in img.annotations if str(t.id) == bid)


def test_crop_margin_scales_size(arch_scene, camera):
    img = render(arch_scene, camera)
    t = _target(img, "A7")
    a = make_crop(img, t, 0.0)
    b = make_crop(img, t, 0.5)
    assert abs(b.width - 2 * a.width) <= 2 and abs(b.height - 2 * a.height) <= 2
    x0, y0 = b.origin
    assert x0 <= t.bbox.x and x0 + b.width >= t.bbox.x + t.bbox.w


def test_crop_clamps_to_image():
    assert crop_rect(PixelBBox(0, 0, 10, 10), 100, 100, 0.5) == (0, 0, 15, 15)
    with pytest.raises(ValueError):
        crop_rect(PixelBBox(0, 0, 10, 10), 100, 100, 1.5)


def test_degenerate_crop(arch_scene, camera):
    img = render(arch_scene, camera)
    tiny = AnnotationTriplet(GridCoord(0, 0, 5), PixelBBox(0, 0, 2, 2), BlockId("A", 1))
    with pytest.raises(DegenerateCrop):
        make_crop(img, tiny, 0.0)


def test_prompt_is_golden_and_image_independent(arch_scene, scenes, camera):
    a = render(arch_scene, camera)
    b = render(scenes[0], camera)
    p = build_prompt(a, make_crop(a, _target(a, "A7")))
    assert p == (DATA / "prompt_v1.txt").read_text()
    assert p == build_prompt(b, make_crop(b, b.annotations[0]))
    assert build_prompt(a, a, "2") == (DATA / "prompt_v2.txt").read_text()
    assert PATTERN_I in p and PATTERN_II in p
    with pytest.raises(ValueError):
        build_prompt(a, a, "3")


def test_extract_json_skips_leaked_reasoning():
    raw = 'I think {"id": "A1"} no wait... {"id": "A2", "expression": "x."}'
    assert extract_json(raw) == {"id": "A2", "expression": "x."}
    assert extract_json("no json here") is None
    assert extract_json('{"id": "A1", "expr') is None


@pytest.mark.parametrize("raw,reason", [
    ("garbage", "SchemaError"),
    ('{"id": 3, "expression": "x."}', "SchemaError"),
    ('{"id": "7Q", "expression": "x."}', "SchemaError"),
    ('{"id": "A1", "expression": "the center red block of the red bar, close to you."}', "IdMismatch"),
    ('{"id": "A7", "expression": "the center red block of the red bar, close to you"}', "GrammarError"),
    ('{"id": "A7", "expression": "the red bar."}', "GrammarError"),
    ('{"id": "A7", "pattern": "ii", "expression": "the center red block of the red bar, close to you."}',
     "SchemaError"),
    ('{"id": "A7", "expression": "the center yellow block of the structure, close to you."}', "EmptyDenotation"),
    ('{"id": "A7", "expression": "the first red block from the left of the red bar, on your left."}',
     "WrongDenotation"),
])
def test_validation_reasons(arch_scene, camera, raw, reason):
    img = render(arch_scene, camera)
    res = parse_and_validate(raw, _target(img, "A7"), arch_scene, camera)
    assert isinstance(res, Rejection) and res.reason == reason


def test_ambiguous_denotation(camera):
    from gridgrec.scene import make_scene
    s = make_scene([((1, y, 1), "red") for y in range(3)] + [((8, y, 8), "red") for y in range(3)])
    img = render(s, camera)
    top = next(t for t in img.annotations if t.coord.as_tuple() == (1, 2, 1))
    # the perspective applies inside each binding, so both column tops survive
    raw = json.dumps({"id": str(top.id),
                      "expression": "the first red block from the top of the red column, close to you."})
    res = parse_and_validate(raw, top, s, camera)
    assert isinstance(res, Rejection) and res.reason == "AmbiguousDenotation"


def test_valid_output_accepted(arch_scene, camera):
    img = render(arch_scene, camera)
    raw = '{"id": "A7", "pattern": "i", "expression": "The center red block of the red bar, close to you."}'
    res = parse_and_validate(raw, _target(img, "A7"), arch_scene, camera)
    assert not isinstance(res, Rejection)
    assert res.surface == "the center red block of the red bar, close to you."
    assert res.intended == {BlockId("A", 7)}


def test_canonical_candidates_verified_by_oracle(scenes, camera):
    for s in scenes[:3]:
        for t in render(s, camera).annotations[:6]:
            for e in canonical_candidates(s, camera, t.id):
                assert oracle.uniquely_denotes(e.surface, {str(t.id)}, s, camera)


def test_identify_target_from_crop(arch_scene, camera):
    img = render(arch_scene, camera)
    for t in img.annotations:
        found = identify_target(arch_scene, img, make_crop(img, t))
        assert found is not None
        assert found.id == t.id or make_crop(img, found).origin == make_crop(img, t).origin
    assert identify_target(arch_scene, img, make_crop(img, _target(img, "A7"))).id == BlockId("A", 7)


def test_rule_backend_accepts_every_call(scenes, camera):
    s = scenes[0]
    samples, stats = synthesize_prompted(s, camera, RuleBackend(s), 100, seed=0)
    assert stats.calls == 100 and stats.accepted == 100 and len(samples) == 100
    assert not stats.reasons
    assert len({x.sample_id for x in samples}) == 100
    keys = [(x.targets[0].id, int(x.sample_id.rsplit("_", 1)[1])) for x in samples]
    assert keys == sorted(keys)
    for x in samples:
        assert x.tier == "prompted"
        assert oracle.uniquely_denotes(x.dialogue.turns[0].text, {str(x.targets[0].id)}, s, camera)


def test_parallel_calls_give_same_output(scenes, camera):
    s = scenes[1]
    a, _ = synthesize_prompted(s, camera, RuleBackend(s), 30, seed=4)
    b, _ = synthesize_prompted(s, camera, RuleBackend(s), 30, seed=4, max_in_flight=4)
    assert [x.sample_id for x in a] == [x.sample_id for x in b]
    assert [x.dialogue.turns[0].text for x in a] == [x.dialogue.turns[0].text for x in b]


class AlwaysMalformed:
    kind = "broken"

    def complete(self, prompt, images):
        return "Let me think step by step about the blocks {\"id\": \"A1\", \"expr"


def test_all_malformed_backend_yields_nothing(scenes, camera):
    samples, stats = synthesize_prompted(scenes[0], camera, AlwaysMalformed(), 100, seed=0)
    assert samples == []
    assert stats.calls == 100 and stats.reasons == Counter({"SchemaError": 100})
    assert len(stats.log) == 100 and all(r["reason"] == "SchemaError" for r in stats.log)


def test_adversarial_counts_line_up(scenes, camera):
    s = scenes[2]
    adv = AdversarialBackend(RuleBackend(s), s, seed=1, p_flip=0.2, p_malformed=0.2, p_ambiguous=0.2)
    if not adv.can_inject_ambiguity(s, camera):
        pytest.skip("scene admits no ambiguous canonical expression")
    samples, stats = synthesize_prompted(s, camera, adv, 120, seed=0)
    assert stats.reasons["IdMismatch"] == adv.injected["id-flip"]
    assert stats.reasons["SchemaError"] == adv.injected["malformed"]
    assert stats.reasons["AmbiguousDenotation"] == adv.injected["ambiguous"]
    assert stats.accepted == adv.injected["clean"] == len(samples)


class _Resp(io.BytesIO):
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


def test_remote_retries_then_succeeds(arch_scene, camera):
    img = render(arch_scene, camera)
    calls, slept = [], []

    def opener(req, timeout):
        calls.append(json.loads(req.data))
        assert req.get_header("Authorization") == "Bearer tok"
        if len(calls) < 3:
            raise urllib.error.URLError("down")
        return _Resp(b'{"id": "A7", "expression": "x."}')

    be = RemoteHTTPBackend("http://example.invalid", "tok", sleep=slept.append, opener=opener)
    out = be.complete("prompt", [img, img])
    assert json.loads(out)["id"] == "A7"
    assert slept == [1.0, 2.0] and len(calls) == 3
    assert calls[0]["prompt"] == "prompt" and len(calls[0]["images"]) == 2


def test_remote_gives_up(arch_scene, camera, monkeypatch):
    img = render(arch_scene, camera)
    slept = []

    def opener(req, timeout):
        raise urllib.error.URLError("down")

    be = RemoteHTTPBackend("http://example.invalid", sleep=slept.append, opener=opener)
    with pytest.raises(BackendUnavailable):
        be.complete("p", [img, img])
    assert slept == [1.0, 2.0, 4.0]
    monkeypatch.delenv("GREC_BACKEND_URL", raising=False)
    with pytest.raises(BackendUnavailable):
        RemoteHTTPBackend().complete("p", [img, img])


def test_remote_reads_environment(monkeypatch):
    monkeypatch.setenv("GREC_BACKEND_URL", "http://h.invalid/x")
    monkeypatch.setenv("GREC_BACKEND_TOKEN", "s3")
    be = RemoteHTTPBackend()
    assert be.url == "http://h.invalid/x" and be.token == "s3"
    assert "s3" not in json.dumps(be.describe())


def test_adversarial_parallel_matches_serial(scenes, camera):
    s = scenes[2]

    def go(jobs):
        adv = AdversarialBackend(RuleBackend(s), s, seed=2, p_flip=0.3, p_malformed=0.3, p_ambiguous=0.3)
        samples, stats = synthesize_prompted(s, camera, adv, 60, seed=1, max_in_flight=jobs)
        return [x.sample_id for x in samples], stats.log, adv.injected

    assert go(1) == go(4)


def test_adversarial_repeats_draw_independently(arch_scene, camera):
    img = render(arch_scene, camera)
    crop = make_crop(img, _target(img, "A7"))
    adv = AdversarialBackend(RuleBackend(arch_scene), arch_scene, seed=0,
                             p_flip=0.5, p_malformed=0.0, p_ambiguous=0.0)
    outs = {adv.complete(build_prompt(img, crop), [img, crop]) for _ in range(40)}
    assert len(outs) > 1
