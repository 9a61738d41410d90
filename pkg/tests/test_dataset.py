import json

import pytest

from gridgrec.dataset import (
    dataset_stats,
    ingest_mdcr,
    load_manifest,
    mix_tiers,
    read_dataset,
    read_scenes,
    validate_sample_record,
    verify_manifest,
    write_dataset,
)
from gridgrec.dialogue import synthesize_dialogues
from gridgrec.errors import DuplicateSampleId, ManifestMismatch, QuotaUnsatisfiable, SchemaMismatch
from gridgrec.evaluation import evaluate, perfect_predictions, PredictionSet
from gridgrec.prompted import RuleBackend, synthesize_prompted
from gridgrec.samples import sample_to_dict
from gridgrec.template import synthesize_templates


@pytest.fixture(scope="module")
def tiers(scenes):
    from gridgrec.render import default_camera
    cam = default_camera()
    tpl = synthesize_templates(scenes[:2], [cam], 20, seed=0)
    gen, _ = synthesize_prompted(scenes[0], cam, RuleBackend(scenes[0]), 12, seed=0)
    dlg = synthesize_dialogues(scenes[1], cam, 12, seed=0)
    return tpl, gen, dlg


def test_round_trip(tiers, scenes, tmp_path):
    tpl, _, _ = tiers
    m = write_dataset(tpl, tmp_path / "d", name="t", seed=0, scenes=scenes[:2])
    assert m.n_samples == 20 and m.tiers["template"] == 20
    m2, back = read_dataset(tmp_path / "d")
    assert load_manifest(tmp_path / "d").files == m.files
    assert m2.to_dict() == m.to_dict()
    assert [sample_to_dict(s) for s in back] == [sample_to_dict(s) for s in sorted(tpl, key=lambda s: s.sample_id)]
    assert set(read_scenes(tmp_path / "d")) == {s.scene_id for s in scenes[:2]}
    for s in back:
        assert (tmp_path / "d" / s.image_ref).exists()


def test_output_bytes_are_deterministic(tiers, tmp_path):
    tpl, _, _ = tiers
    write_dataset(tpl, tmp_path / "a", seed=0)
    write_dataset(list(reversed(tpl)), tmp_path / "b", seed=0)
    for name in ("manifest.json", "samples.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_tamper_detected(tiers, tmp_path):
    tpl, _, _ = tiers
    write_dataset(tpl, tmp_path / "d")
    p = tmp_path / "d" / "samples.jsonl"
    p.write_text(p.read_text().replace("the", "teh", 1))
    with pytest.raises(ManifestMismatch):
        verify_manifest(tmp_path / "d")
    with pytest.raises(ManifestMismatch):
        read_dataset(tmp_path / "d")
    read_dataset(tmp_path / "d", verify=False)


def test_duplicate_ids_rejected(tiers, tmp_path):
    tpl, _, _ = tiers
    with pytest.raises(DuplicateSampleId):
        write_dataset(tpl + tpl[:1], tmp_path / "d")


def test_mix_quotas(tiers, tmp_path):
    tpl, gen, dlg = tiers
    ms = [write_dataset(x, tmp_path / n, name=n) for x, n in ((tpl, "tpl"), (gen, "gen"), (dlg, "dlg"))]
    m = mix_tiers(ms, {"template": 10, "prompted": 5, "dialogue": 5}, seed=3, out_dir=tmp_path / "mix")
    assert m.tiers == {"template": 10, "prompted": 5, "dialogue": 5} and m.n_samples == 20
    assert m.extra["mixed_from"] == ["tpl", "gen", "dlg"]
    _, back = read_dataset(tmp_path / "mix")
    assert len(back) == 20
    m_again = mix_tiers(ms, {"template": 10, "prompted": 5, "dialogue": 5}, seed=3, out_dir=tmp_path / "mix2")
    assert m_again.files == m.files
    with pytest.raises(QuotaUnsatisfiable):
        mix_tiers(ms, {"prompted": 13}, seed=0, out_dir=tmp_path / "bad")
    with pytest.raises(QuotaUnsatisfiable):
        mix_tiers(ms, {"bogus": 1}, seed=0, out_dir=tmp_path / "bad2")


def test_record_validation(tiers):
    good = sample_to_dict(tiers[0][0])
    validate_sample_record(good)
    for mutate in (
        lambda d: d.pop("targets"),
        lambda d: d.update(tier="other"),
        lambda d: d["targets"][0].update(bbox=[0, 0, -1, 2]),
        lambda d: d["targets"][0].update(id="??"),
        lambda d: d["dialogue"].update(turns=[]),
    ):
        bad = json.loads(json.dumps(good))
        mutate(bad)
        with pytest.raises(SchemaMismatch):
            validate_sample_record(bad)


def _write_mdcr(root, records):
    root.mkdir()
    (root / "records.jsonl").write_text("\n".join(json.dumps(r) for r in records) + "\n")


MDCR = [
    {"sample_id": "m1", "image": "img/1.png",
     "dialogue": [{"speaker": "Architect", "text": "Find the red bar."}, {"speaker": "Builder", "text": "Got it."},
                  {"speaker": "Architect", "text": "Now remove it."}],
     "mention": "it", "bboxes": [[10, 10, 5, 5], [20, 10, 5, 5]]},
    {"sample_id": "m2", "image": "img/2.png", "dialogue": "Architect: see the blue one", "mention": "that one",
     "bboxes": [[0, 0, 3, 3]]},
]


def test_mdcr_ingest_and_eval(tmp_path):
    _write_mdcr(tmp_path / "m", MDCR)
    recs = ingest_mdcr(tmp_path / "m")
    assert [r.sample_id for r in recs] == ["m1", "m2"]
    assert recs[0].dialogue_text.startswith("Architect: Find the red bar.")
    assert len(recs[0].gt_boxes) == 2
    rep = evaluate(perfect_predictions(recs), recs)
    assert rep.mean_f1 == 1.0
    half = [PredictionSet("m1", recs[0].gt_boxes[:1]), PredictionSet("m2", ())]
    assert evaluate(half, recs).mean_f1 == pytest.approx((2 / 3 + 0) / 2)


def test_mdcr_missing_bbox(tmp_path):
    bad = [dict(MDCR[0])]
    del bad[0]["bboxes"]
    _write_mdcr(tmp_path / "m", bad)
    with pytest.raises(SchemaMismatch):
        ingest_mdcr(tmp_path / "m")
    with pytest.raises(SchemaMismatch):
        ingest_mdcr(tmp_path / "nowhere")


def test_stats(tiers):
    tpl, gen, dlg = tiers
    st = dataset_stats(tpl + gen + dlg)
    assert st["tiers"] == {"template": 20, "prompted": 12, "dialogue": 12}
    assert st["n_samples"] == 44 and st["mean_turns"] > 1
