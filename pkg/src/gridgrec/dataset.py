"""On-disk datasets: JSONL samples, PNG images, a checksummed manifest.

Layout of a dataset directory::

    manifest.json      name, tier counts, seed, toolkit version, sha256 per file
    samples.jsonl      one TrainingSample per line, sorted by sample_id
    images/*.png       renders referenced by the samples' "image" field
    scenes/*.json      ground-truth scenes the samples were built from (optional)
"""
from __future__ import annotations

import hashlib
import json
import shutil
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .errors import DuplicateSampleId, ManifestMismatch, QuotaUnsatisfiable, SchemaMismatch
from .render import PixelBBox
from .samples import TIERS, TrainingSample, dumps_sample, loads_sample
from .scene import BlockId, Scene, dumps_scene

MANIFEST = "manifest.json"
SAMPLES = "samples.jsonl"


@dataclass
class DatasetManifest:
    name: str
    tiers: dict
    n_samples: int
    seed: int | None
    toolkit_version: str = __version__
    files: dict = field(default_factory=dict)
    path: Path | None = field(default=None, compare=False)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "tiers": {t: self.tiers.get(t, 0) for t in TIERS},
            "n_samples": self.n_samples,
            "seed": self.seed,
            "toolkit_version": self.toolkit_version,
            **({"extra": self.extra} if self.extra else {}),
            "files": {k: self.files[k] for k in sorted(self.files)},
        }

    @classmethod
    def from_dict(cls, d: dict, path: Path | None = None) -> "DatasetManifest":
        return cls(d["name"], dict(d["tiers"]), int(d["n_samples"]), d.get("seed"),
                   d.get("toolkit_version", ""), dict(d.get("files", {})), path, dict(d.get("extra", {})))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(samples: Sequence[TrainingSample], directory, name: str = "dataset",
                  seed: int | None = None, scenes: Iterable[Scene] = (),
                  image_sources: Mapping[str, Path] | None = None,
                  extra: dict | None = None) -> DatasetManifest:
    """Write samples, their images and a manifest. Output bytes depend only on
    the inputs (samples are sorted by id, JSON keys are ordered).

    Images come from each sample's in-memory render, else from
    ``image_sources[image_ref]`` (a file to copy).
    """
    root = Path(directory)
    counts = Counter(s.sample_id for s in samples)
    dup = sorted(k for k, v in counts.items() if v > 1)
    if dup:
        raise DuplicateSampleId(f"duplicate sample ids: {', '.join(dup[:5])}")
    (root / "images").mkdir(parents=True, exist_ok=True)
    ordered = sorted(samples, key=lambda s: s.sample_id)
    written = set()
    for s in ordered:
        if s.image_ref in written:
            continue
        dest = root / s.image_ref
        dest.parent.mkdir(parents=True, exist_ok=True)
        if s.image is not None:
            s.image.save_png(dest)
        elif image_sources and s.image_ref in image_sources:
            src = Path(image_sources[s.image_ref])
            if src.resolve() != dest.resolve():
                shutil.copyfile(src, dest)
        elif not dest.exists():
            raise FileNotFoundError(f"no image available for {s.image_ref}")
        written.add(s.image_ref)
    with open(root / SAMPLES, "w", encoding="utf-8", newline="\n") as f:
        for s in ordered:
            f.write(dumps_sample(s) + "\n")
    scenes = sorted(scenes, key=lambda sc: sc.scene_id)
    if scenes:
        (root / "scenes").mkdir(exist_ok=True)
        for sc in scenes:
            (root / "scenes" / f"{sc.scene_id}.json").write_text(dumps_scene(sc) + "\n", encoding="utf-8")
    files = {SAMPLES: _sha256(root / SAMPLES)}
    for ref in sorted(written):
        files[ref] = _sha256(root / ref)
    for sc in scenes:
        rel = f"scenes/{sc.scene_id}.json"
        files[rel] = _sha256(root / rel)
    tiers = Counter(s.tier for s in ordered)
    manifest = DatasetManifest(name, {t: tiers.get(t, 0) for t in TIERS}, len(ordered), seed,
                               files=files, path=root, extra=dict(extra or {}))
    (root / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return manifest


def load_manifest(directory) -> DatasetManifest:
    root = Path(directory)
    return DatasetManifest.from_dict(json.loads((root / MANIFEST).read_text(encoding="utf-8")), root)


def verify_manifest(directory) -> DatasetManifest:
    """Recompute every checksum; raise :class:`ManifestMismatch` on any difference."""
    m = load_manifest(directory)
    root = Path(directory)
    bad = []
    for rel, digest in m.files.items():
        p = root / rel
        if not p.exists():
            bad.append(f"{rel} (missing)")
        elif _sha256(p) != digest:
            bad.append(f"{rel} (modified)")
    if bad:
        raise ManifestMismatch(f"{root}: {', '.join(bad)}")
    if sum(m.tiers.values()) != m.n_samples:
        raise ManifestMismatch(f"{root}: tier counts do not sum to n_samples")
    return m


def read_dataset(directory, verify: bool = True) -> tuple[DatasetManifest, list[TrainingSample]]:
    root = Path(directory)
    m = verify_manifest(root) if verify else load_manifest(root)
    samples = []
    for n, line in enumerate((root / SAMPLES).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        d = json.loads(line)
        validate_sample_record(d, where=f"{SAMPLES}:{n}")
        samples.append(loads_sample(line))
    if len(samples) != m.n_samples:
        raise ManifestMismatch(f"{root}: manifest lists {m.n_samples} samples, found {len(samples)}")
    return m, samples


def read_scenes(directory) -> dict[str, Scene]:
    from .scene import loads_scene

    out = {}
    for p in sorted((Path(directory) / "scenes").glob("*.json")):
        sc = loads_scene(p.read_text(encoding="utf-8"))
        out[sc.scene_id] = sc
    return out


# --------------------------------------------------------------------------
# schema


def _need(d: dict, key: str, kind, where: str):
    if key not in d:
        raise SchemaMismatch(f"{where}: missing field {key!r}")
    if not isinstance(d[key], kind):
        raise SchemaMismatch(f"{where}: field {key!r} has type {type(d[key]).__name__}")
    return d[key]


def _box(b, where: str) -> None:
    if not (isinstance(b, list) and len(b) == 4 and all(isinstance(v, (int, float)) for v in b)):
        raise SchemaMismatch(f"{where}: bbox must be [x, y, w, h]")
    if not (b[2] > 0 and b[3] > 0):
        raise SchemaMismatch(f"{where}: bbox must have positive extent")


def validate_sample_record(d: dict, where: str = "sample") -> None:
    """Check a decoded JSONL record against the training-sample schema."""
    if not isinstance(d, dict):
        raise SchemaMismatch(f"{where}: record is not an object")
    _need(d, "sample_id", str, where)
    _need(d, "image", str, where)
    tier = _need(d, "tier", str, where)
    if tier not in TIERS:
        raise SchemaMismatch(f"{where}: unknown tier {tier!r}")
    _need(d, "provenance", dict, where)
    targets = _need(d, "targets", list, where)
    if not targets and not d.get("no_target"):
        raise SchemaMismatch(f"{where}: empty targets without no_target flag")
    for t in targets:
        if not isinstance(t, dict):
            raise SchemaMismatch(f"{where}: target is not an object")
        try:
            BlockId.parse(_need(t, "id", str, where))
        except ValueError:
            raise SchemaMismatch(f"{where}: bad target id {t['id']!r}")
        _box(_need(t, "bbox", list, where), where)
    dia = _need(d, "dialogue", dict, where)
    turns = _need(dia, "turns", list, where)
    if not turns:
        raise SchemaMismatch(f"{where}: dialogue has no turns")
    ids = set()
    for c in _need(dia, "chains", list, where):
        ids.add(_need(c, "chain_id", str, where))
        for m in _need(c, "mentions", list, where):
            for k in ("turn", "start", "end"):
                _need(m, k, int, where)
    for i, t in enumerate(turns):
        _need(t, "speaker", str, where)
        text = _need(t, "text", str, where)
        for m in _need(t, "mentions", list, where):
            if not (0 <= m.get("start", -1) < m.get("end", -1) <= len(text)):
                raise SchemaMismatch(f"{where}: turn {i} mention span out of bounds")
            if m.get("chain_id") not in ids:
                raise SchemaMismatch(f"{where}: turn {i} mention cites undeclared chain")
    fm = _need(dia, "final_mention", dict, where)
    for k in ("turn", "start", "end"):
        _need(fm, k, int, where)
    if _need(fm, "chain_id", str, where) not in ids:
        raise SchemaMismatch(f"{where}: final mention cites undeclared chain")


# --------------------------------------------------------------------------
# mixing


def mix_tiers(datasets: Sequence[DatasetManifest], quotas: Mapping[str, int], seed: int,
              out_dir, name: str = "mix") -> DatasetManifest:
    """Stratified draw of ``quotas[tier]`` samples per tier from the pooled inputs.

    The draw is a pure function of the inputs, quotas and seed. Samples keep
    their provenance; the manifest records which datasets were mixed.
    """
    pools: dict[str, list] = {t: [] for t in TIERS}
    sources: dict[str, Path] = {}
    all_scenes: dict[str, Scene] = {}
    for m in datasets:
        if m.path is None:
            raise ValueError(f"manifest {m.name!r} has no directory")
        _, samples = read_dataset(m.path)
        for s in sorted(samples, key=lambda s: s.sample_id):
            pools[s.tier].append(s)
            sources.setdefault(s.image_ref, m.path / s.image_ref)
        all_scenes.update(read_scenes(m.path))
    rng = np.random.default_rng(seed)
    chosen = []
    for tier in TIERS:
        q = int(quotas.get(tier, 0))
        if q < 0:
            raise QuotaUnsatisfiable(f"negative quota for {tier}")
        if q > len(pools[tier]):
            raise QuotaUnsatisfiable(f"{tier}: quota {q} exceeds pool of {len(pools[tier])}")
        idx = np.sort(rng.choice(len(pools[tier]), size=q, replace=False)) if q else []
        chosen.extend(pools[tier][int(i)] for i in idx)
    unknown = set(quotas) - set(TIERS)
    if unknown:
        raise QuotaUnsatisfiable(f"unknown tiers in quotas: {sorted(unknown)}")
    used_scenes = {s.provenance.get("scene_id") for s in chosen}
    scenes = [sc for sid, sc in sorted(all_scenes.items()) if sid in used_scenes]
    extra = {"mixed_from": [m.name for m in datasets], "quotas": {t: int(quotas.get(t, 0)) for t in TIERS}}
    return write_dataset(chosen, out_dir, name=name, seed=seed, scenes=scenes,
                         image_sources=sources, extra=extra)


# --------------------------------------------------------------------------
# external benchmark ingestion


@dataclass(frozen=True)
class MdcrRecord:
    """One evaluation instance of an external dialogue benchmark."""

    sample_id: str
    image_ref: str
    dialogue_text: str
    mention_text: str
    gt_boxes: tuple[PixelBBox, ...]


def ingest_mdcr(directory) -> list[MdcrRecord]:
    """Read a benchmark split laid out as ``records.jsonl`` plus an image folder.

    Each line holds ``{"sample_id": str, "image": str, "dialogue": [{"speaker":
    str, "text": str}, ...], "mention": str, "bboxes": [[x, y, w, h], ...]}``;
    ``dialogue`` may also be a single pre-joined string. Records are returned
    in file order. The first non-conforming record raises
    :class:`SchemaMismatch`.
    """
    path = Path(directory) / "records.jsonl"
    if not path.exists():
        raise SchemaMismatch(f"{directory}: records.jsonl not found")
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        where = f"records.jsonl:{n}"
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaMismatch(f"{where}: invalid JSON ({e.msg})")
        if not isinstance(d, dict):
            raise SchemaMismatch(f"{where}: record is not an object")
        sid = _need(d, "sample_id", str, where)
        image = _need(d, "image", str, where)
        mention = _need(d, "mention", str, where)
        if "dialogue" not in d:
            raise SchemaMismatch(f"{where}: missing field 'dialogue'")
        dia = d["dialogue"]
        if isinstance(dia, str):
            text = dia
        elif isinstance(dia, list) and all(isinstance(t, dict) and "speaker" in t and "text" in t for t in dia):
            text = "\n".join(f"{t['speaker']}: {t['text']}" for t in dia)
        else:
            raise SchemaMismatch(f"{where}: dialogue must be a string or a list of turns")
        boxes = _need(d, "bboxes", list, where)
        for b in boxes:
            _box(b, where)
        out.append(MdcrRecord(sid, image, text, mention, tuple(PixelBBox.from_list(b) for b in boxes)))
    return out


# --------------------------------------------------------------------------
# statistics


def dataset_stats(samples: Sequence[TrainingSample]) -> dict:
    tiers = Counter(s.tier for s in samples)
    forms = Counter(s.provenance.get("expression", {}).get("form", "dialogue") for s in samples)
    n = len(samples)
    return {
        "n_samples": n,
        "tiers": {t: tiers.get(t, 0) for t in TIERS},
        "forms": dict(sorted(forms.items())),
        "scenes": len({s.provenance.get("scene_id") for s in samples}),
        "images": len({s.image_ref for s in samples}),
        "mean_targets": round(sum(len(s.targets) for s in samples) / n, 6) if n else 0.0,
        "mean_turns": round(sum(len(s.dialogue.turns) for s in samples) / n, 6) if n else 0.0,
        "multi_target_fraction": round(sum(len(s.targets) > 1 for s in samples) / n, 6) if n else 0.0,
    }

