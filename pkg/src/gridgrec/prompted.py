"""Tier 2: prompted expressions under a closed grammar with id verification.

A generator backend sees the full scene image and a crop around one target.
It must return JSON naming the target id and one expression in either of two
canonical patterns. Nothing is repaired: an output is accepted only when it
parses, names the right id, and denotes exactly the target.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import BackendUnavailable, DegenerateCrop, MalformedExpr
from .render import AnnotationTriplet, CameraPose, RenderedImage, annotate, render
from .scene import BlockId, Scene
from .semantics import (
    CANONICAL_FORMS,
    PERSPECTIVES,
    POSITIONS,
    RefExpr,
    StructureRef,
    _select_rank,
    _view,
    denote_per_binding,
    detect_structures,
    direction_key,
    is_unambiguous,
    make_expr,
    parse_expression,
)

PATTERN_I = "the center <color> block of the <reference>, <perspective>."
PATTERN_II = "the <ordinal> <color> block from the <position> of the <reference>, <perspective>."
SCHEMA_VERSION = "1"
DEFAULT_MARGIN = 0.35
MIN_CROP_AREA = 64
REASONS = ("SchemaError", "IdMismatch", "GrammarError", "AmbiguousDenotation",
           "EmptyDenotation", "WrongDenotation")


class GeneratorBackend(Protocol):
    kind: str

    def complete(self, prompt: str, images: Sequence[RenderedImage]) -> str: ...


# --------------------------------------------------------------------------
# crop and prompt


def crop_rect(bbox, width: int, height: int, margin_fraction: float) -> tuple[int, int, int, int]:
    if not 0.0 <= margin_fraction <= 1.0:
        raise ValueError("margin_fraction must lie in [0, 1]")
    mx, my = margin_fraction * bbox.w, margin_fraction * bbox.h
    x0 = max(0, math.floor(bbox.x - mx))
    y0 = max(0, math.floor(bbox.y - my))
    x1 = min(width, math.ceil(bbox.x + bbox.w + mx))
    y1 = min(height, math.ceil(bbox.y + bbox.h + my))
    return x0, y0, x1, y1


def make_crop(image: RenderedImage, target: AnnotationTriplet,
              margin_fraction: float = DEFAULT_MARGIN) -> RenderedImage:
    """Crop around the target's box grown by ``margin_fraction`` of its size per side."""
    x0, y0, x1, y1 = crop_rect(target.bbox, image.width, image.height, margin_fraction)
    if (x1 - x0) * (y1 - y0) < MIN_CROP_AREA:
        raise DegenerateCrop(f"crop for {target.id} is {x1 - x0}x{y1 - y0} px")
    return image.crop(x0, y0, x1, y1)


_PROMPT_HEAD = """\
You are given two images of a block-building scene.
Image 1 shows the full scene from the builder's viewpoint.
Image 2 is a crop centered on one target block.

Task:
1. Read the identifier printed on the target block in image 2 (a letter followed by digits, e.g. A1).
2. Write one referring expression that picks out exactly that block in image 1.

The expression must instantiate exactly one of these two patterns and end with a period:
(i) {pattern_i}
(ii) {pattern_ii}

Slot constraints:
- color: the color of the target block, one of: {colors}.
- reference: the larger structure that contains the target, one of: {references}; it may be preceded by a color.
- position: where the target sits inside the reference, one of: {positions}.
- ordinal: the target's rank from that position inside the reference, one of: {ordinals}.
- perspective: exactly one modifier relative to the builder's viewpoint, one of: {perspectives}.

Verification: the id you report must be the id printed on the target block.

Reason step by step internally, but emit only the final JSON object.
"""

_SCHEMA_BLOCK = {
    "1": """\
Output schema (version 1):
{"id": "<block id>", "expression": "<referring expression>"}
""",
    "2": """\
Output schema (version 2):
{"id": "<block id>", "pattern": "i" | "ii", "expression": "<referring expression>"}
""",
}


def build_prompt(scene_image: RenderedImage, crop: RenderedImage, schema_version: str = SCHEMA_VERSION,
                 colors: Sequence[str] | None = None) -> str:
    """The constrained instruction for one target. Pure: depends only on the
    vocabulary and schema version, never on image content."""
    from .scene import DEFAULT_PALETTE
    from .semantics import NOUN_KINDS, ORDINALS

    if schema_version not in _SCHEMA_BLOCK:
        raise ValueError(f"unknown schema version {schema_version!r}")
    colors = list(colors or (c.name for c in DEFAULT_PALETTE))
    head = _PROMPT_HEAD.format(
        pattern_i=PATTERN_I, pattern_ii=PATTERN_II,
        colors=", ".join(colors), references=", ".join(NOUN_KINDS),
        positions=", ".join(POSITIONS), ordinals=", ".join(ORDINALS),
        perspectives=", ".join(f'"{p}"' for p in PERSPECTIVES),
    )
    return head + "\n" + _SCHEMA_BLOCK[schema_version]


# --------------------------------------------------------------------------
# parsing and validation


@dataclass(frozen=True)
class Rejection:
    reason: str
    detail: str = ""

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValueError(f"unknown reason {self.reason!r}")


def extract_json(raw: str) -> dict | None:
    """The last well-formed JSON object in ``raw`` (leaked reasoning is skipped)."""
    dec = json.JSONDecoder()
    found = None
    i = raw.find("{")
    while i != -1:
        try:
            obj, end = dec.raw_decode(raw, i)
        except json.JSONDecodeError:
            i = raw.find("{", i + 1)
            continue
        if isinstance(obj, dict):
            found = obj
        i = raw.find("{", end)
    return found


def parse_and_validate(raw: str, target: AnnotationTriplet, scene: Scene,
                       camera: CameraPose) -> RefExpr | Rejection:
    obj = extract_json(raw)
    if obj is None:
        return Rejection("SchemaError", "no JSON object found")
    if not isinstance(obj.get("id"), str) or not isinstance(obj.get("expression"), str):
        return Rejection("SchemaError", "fields 'id' and 'expression' must be strings")
    try:
        claimed = BlockId.parse(obj["id"].strip())
    except ValueError:
        return Rejection("SchemaError", f"malformed id {obj['id']!r}")
    if claimed != target.id:
        return Rejection("IdMismatch", f"claimed {claimed}, target {target.id}")
    text = obj["expression"].strip()
    if not text.endswith("."):
        return Rejection("GrammarError", "expression must end with a period")
    palette = tuple(sorted({b.color.name for b in scene.blocks} | _palette_names()))
    try:
        expr = parse_expression(text, forms=CANONICAL_FORMS, colors=palette)
    except MalformedExpr as e:
        return Rejection("GrammarError", str(e))
    if "pattern" in obj and obj["pattern"] != {"canonical-i": "i", "canonical-ii": "ii"}[expr.form]:
        return Rejection("SchemaError", "declared pattern disagrees with the expression")
    parts = denote_per_binding(expr, scene, camera)
    union = frozenset().union(*parts) if parts else frozenset()
    if not union:
        return Rejection("EmptyDenotation", expr.surface)
    if len(union) > 1:
        return Rejection("AmbiguousDenotation", f"{expr.surface} -> {sorted(map(str, union))}")
    if union != {target.id}:
        return Rejection("WrongDenotation", f"{expr.surface} -> {next(iter(union))}")
    return RefExpr(expr.form, expr.color, expr.ordinal, expr.position, expr.reference,
                   expr.perspective, False, expr.surface, frozenset({target.id}))


def _palette_names() -> set:
    from .scene import DEFAULT_PALETTE
    return {c.name for c in DEFAULT_PALETTE}


# --------------------------------------------------------------------------
# backends


def canonical_candidates(scene: Scene, camera: CameraPose, target: BlockId) -> list[RefExpr]:
    """All canonical-pattern expressions that uniquely denote ``target``."""
    block = scene.by_id()[str(target)]
    refs = [StructureRef("structure")]
    for s in detect_structures(scene):
        if target in s.member_ids and s.color is not None:
            refs.append(StructureRef(s.kind, s.color.name))
        if target in s.member_ids and s.kind == "arch":
            refs.append(StructureRef("arch"))
    view = _view(scene, camera)
    out, seen = [], set()

    def offer(form, **slots):
        e = make_expr(form, {target}, **slots)
        if e.surface not in seen and is_unambiguous(e, scene, camera):
            seen.add(e.surface)
            out.append(e)

    c = block.color.name
    for ref in dict.fromkeys(refs):
        for persp in PERSPECTIVES:
            offer("canonical-i", color=c, reference=ref, perspective=persp)
        from .semantics import bindings
        for members in bindings(ref, scene):
            if block not in members:
                continue
            dom = [b for b in members if b.color.name == c]
            for pos in POSITIONS:
                keys = sorted({direction_key(pos, b, view) for b in dom})
                k = keys.index(direction_key(pos, block, view)) + 1
                if k > 20 or block not in _select_rank(dom, pos, k, view):
                    continue
                for persp in PERSPECTIVES:
                    offer("canonical-ii", ordinal=k, color=c, position=pos, reference=ref, perspective=persp)
    return out


def _digest(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(8, "little"))
        h.update(p)
    return h.digest()


def identify_target(scene: Scene, scene_image: RenderedImage, crop: RenderedImage,
                    margin_fraction: float = DEFAULT_MARGIN) -> AnnotationTriplet | None:
    """The visible block whose margin crop is exactly ``crop``'s rectangle."""
    x0, y0 = crop.origin
    rect = (x0, y0, x0 + crop.width, y0 + crop.height)
    triplets = scene_image.annotations or tuple(annotate(scene, scene_image.camera))
    hits = [t for t in triplets
            if crop_rect(t.bbox, scene_image.width, scene_image.height, margin_fraction) == rect]
    if not hits:
        return None
    # identical rectangles: the block whose box is largest dominates the crop centre
    return max(hits, key=lambda t: (t.bbox.w * t.bbox.h, [-ord(ch) for ch in str(t.id)]))


class RuleBackend:
    """Offline backend that fills the canonical slots from scene ground truth.

    It locates the target from the crop rectangle, enumerates every canonical
    expression that uniquely denotes it and picks one by a seeded hash, so the
    output is a pure function of its inputs.
    """

    kind = "deterministic-rule"

    def __init__(self, scenes: Scene | Sequence[Scene], seed: int = 0,
                 margin_fraction: float = DEFAULT_MARGIN):
        scenes = [scenes] if isinstance(scenes, Scene) else list(scenes)
        self.scenes = {s.scene_id: s for s in scenes}
        self.seed = seed
        self.margin_fraction = margin_fraction

    def describe(self) -> dict:
        return {"kind": self.kind, "seed": self.seed}

    def complete(self, prompt: str, images: Sequence[RenderedImage]) -> str:
        full, crop = images
        scene = self.scenes[full.scene_id]
        t = identify_target(scene, full, crop, self.margin_fraction)
        if t is None:
            return json.dumps({"id": "", "expression": ""})
        cands = canonical_candidates(scene, full.camera, t.id)
        if not cands:
            return json.dumps({"id": str(t.id), "expression": ""})
        h = _digest(str(self.seed).encode(), full.scene_id.encode(), str(t.id).encode(),
                    json.dumps(full.camera.to_dict(), sort_keys=True).encode())
        pick = cands[int.from_bytes(h[:8], "little") % len(cands)]
        return json.dumps({"id": str(t.id), "expression": pick.surface})


class AdversarialBackend:
    """Wraps a backend and corrupts its outputs at fixed rates.

    Per call, one uniform draw keyed on (seed, prompt, crop, how often that
    exact call was seen before) decides: id flip, malformed JSON, ambiguous
    expression, or a faithful pass-through.
    """

    kind = "adversarial-mock"

    def __init__(self, inner: GeneratorBackend, scenes: Scene | Sequence[Scene], seed: int = 0,
                 p_flip: float = 0.1, p_malformed: float = 0.1, p_ambiguous: float = 0.1):
        self.inner = inner
        scenes = [scenes] if isinstance(scenes, Scene) else list(scenes)
        self.scenes = {s.scene_id: s for s in scenes}
        self.seed = seed
        self.rates = (p_flip, p_malformed, p_ambiguous)
        self._ambiguous_cache: dict = {}
        self.injected: Counter = Counter()
        self._seen: Counter = Counter()
        self._lock = threading.Lock()

    def describe(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "rates": list(self.rates)}

    def _note(self, what: str) -> None:
        with self._lock:
            self.injected[what] += 1

    def can_inject_ambiguity(self, scene: Scene, camera: CameraPose) -> bool:
        return bool(self._ambiguous(scene, camera))

    def _ambiguous(self, scene: Scene, camera: CameraPose) -> list[str]:
        key = (scene.scene_id, json.dumps(camera.to_dict(), sort_keys=True))
        if key not in self._ambiguous_cache:
            out = []
            for c in sorted({b.color.name for b in scene.blocks}):
                for persp in PERSPECTIVES[:2]:
                    for ref in [StructureRef("structure")] + [
                            StructureRef(s.kind, s.color.name) for s in detect_structures(scene) if s.color]:
                        e = make_expr("canonical-i", color=c, reference=ref, perspective=persp)
                        parts = denote_per_binding(e, scene, camera)
                        if len(frozenset().union(*parts) if parts else ()) > 1:
                            out.append(e.surface)
            self._ambiguous_cache[key] = sorted(set(out))
        return self._ambiguous_cache[key]

    def complete(self, prompt: str, images: Sequence[RenderedImage]) -> str:
        full, crop = images
        h = _digest(str(self.seed).encode(), prompt.encode(), repr(crop.origin).encode(),
                    crop.tobytes(), full.scene_id.encode())
        # repeated identical calls draw independently, in call order
        with self._lock:
            occurrence = self._seen[h]
            self._seen[h] += 1
        h = _digest(h, occurrence.to_bytes(8, "little"))
        rng = np.random.default_rng(int.from_bytes(h[:8], "little"))
        u = rng.random()
        raw = self.inner.complete(prompt, images)
        p1, p2, p3 = self.rates
        if u < p1:
            obj = json.loads(raw)
            scene = self.scenes[full.scene_id]
            others = [i for i in scene.ids() if i != obj["id"]]
            obj["id"] = others[int(rng.integers(len(others)))] if others else "Z99"
            self._note("id-flip")
            return json.dumps(obj)
        if u < p1 + p2:
            self._note("malformed")
            return "Thinking about the scene... " + raw[: max(1, len(raw) // 2)]
        if u < p1 + p2 + p3:
            obj = json.loads(raw)
            amb = self._ambiguous(self.scenes[full.scene_id], full.camera)
            if amb:
                obj["expression"] = amb[int(rng.integers(len(amb)))]
                self._note("ambiguous")
            return json.dumps(obj)
        self._note("clean")
        return raw


class RemoteHTTPBackend:
    """JSON-over-HTTP backend. Endpoint and token come from the environment
    (``GREC_BACKEND_URL``, ``GREC_BACKEND_TOKEN``) unless passed explicitly.

    Transport failures are retried after each delay in ``backoff`` and then
    surface as :class:`BackendUnavailable`.
    """

    kind = "remote-http"

    def __init__(self, url: str | None = None, token: str | None = None, timeout: float = 60.0,
                 backoff: Sequence[float] = (1.0, 2.0, 4.0),
                 sleep: Callable[[float], None] = time.sleep, opener=None):
        self.url = url or os.environ.get("GREC_BACKEND_URL")
        self.token = token if token is not None else os.environ.get("GREC_BACKEND_TOKEN")
        self.timeout = timeout
        self.backoff = tuple(backoff)
        self.sleep = sleep
        self.opener = opener or urllib.request.urlopen

    def describe(self) -> dict:
        return {"kind": self.kind, "url": self.url}

    def complete(self, prompt: str, images: Sequence[RenderedImage]) -> str:
        if not self.url:
            raise BackendUnavailable("GREC_BACKEND_URL is not set")
        body = json.dumps({
            "prompt": prompt,
            "images": [base64.b64encode(im.png_bytes()).decode("ascii") for im in images],
        }).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last = None
        for attempt in range(len(self.backoff) + 1):
            if attempt:
                self.sleep(self.backoff[attempt - 1])
            req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
            try:
                with self.opener(req, timeout=self.timeout) as resp:
                    return resp.read().decode("utf-8", errors="replace")
            except (urllib.error.URLError, OSError, TimeoutError) as e:
                last = e
        raise BackendUnavailable(f"backend at {self.url} failed after {len(self.backoff) + 1} attempts: {last}")


# --------------------------------------------------------------------------
# synthesis


@dataclass
class RejectionStats:
    calls: int = 0
    accepted: int = 0
    reasons: Counter = field(default_factory=Counter)
    log: list = field(default_factory=list)

    def add(self, other: "RejectionStats") -> None:
        self.calls += other.calls
        self.accepted += other.accepted
        self.reasons.update(other.reasons)
        self.log.extend(other.log)

    def rate(self, reason: str) -> float:
        return self.reasons[reason] / self.calls if self.calls else 0.0

    def to_dict(self) -> dict:
        return {"calls": self.calls, "accepted": self.accepted,
                "reasons": {r: self.reasons.get(r, 0) for r in REASONS}}


def _croppable(image: RenderedImage, t: AnnotationTriplet, margin_fraction: float) -> bool:
    x0, y0, x1, y1 = crop_rect(t.bbox, image.width, image.height, margin_fraction)
    return (x1 - x0) * (y1 - y0) >= MIN_CROP_AREA


def target_sequence(triplets: Sequence[AnnotationTriplet], n: int, seed: int) -> list[AnnotationTriplet]:
    """``n`` targets: reshuffled passes over the visible blocks (uniform per pass)."""
    rng = np.random.default_rng(seed)
    out: list = []
    while len(out) < n:
        out.extend(triplets[int(i)] for i in rng.permutation(len(triplets)))
    return out[:n]


def synthesize_prompted(scene: Scene, camera: CameraPose, backend: GeneratorBackend, n: int, seed: int,
                        max_in_flight: int = 1, image: RenderedImage | None = None,
                        margin_fraction: float = DEFAULT_MARGIN):
    """One backend call per drawn target, ``n`` calls in all.

    Returns ``(samples, stats)``. Samples are ordered by (target id, draw index)
    whatever the completion order; rejected outputs are logged, never repaired.
    """
    from .template import build_short_sample

    if n < 1:
        raise ValueError("n must be at least 1")
    image = image or render(scene, camera)
    # blocks too small to crop are not drawable targets
    triplets = [t for t in image.annotations if _croppable(image, t, margin_fraction)]
    stats = RejectionStats()
    if not triplets:
        return [], stats
    targets = target_sequence(triplets, n, seed)

    def call(t: AnnotationTriplet):
        crop = make_crop(image, t, margin_fraction)
        return t, backend.complete(build_prompt(image, crop), [image, crop])

    if max_in_flight > 1:
        # one task per target runs that target's draws in order, so stateful
        # backends see the same call sequence whatever the thread schedule
        slots: dict = {}
        for k, t in enumerate(targets):
            slots.setdefault(t.id, []).append(k)
        outputs: list = [None] * len(targets)

        def run(ks):
            for k in ks:
                outputs[k] = call(targets[k])

        with ThreadPoolExecutor(max_in_flight) as pool:
            list(pool.map(run, slots.values()))
    else:
        outputs = [call(t) for t in targets]

    accepted = []
    per_target: Counter = Counter()
    desc = getattr(backend, "describe", lambda: {"kind": getattr(backend, "kind", "unknown")})()
    for k, (t, raw) in enumerate(outputs):
        stats.calls += 1
        res = parse_and_validate(raw, t, scene, camera)
        if isinstance(res, Rejection):
            stats.reasons[res.reason] += 1
            stats.log.append({"scene_id": scene.scene_id, "target": str(t.id), "call": k,
                              "reason": res.reason, "detail": res.detail})
            continue
        stats.accepted += 1
        j = per_target[t.id]
        per_target[t.id] += 1
        sample = build_short_sample(res, scene, camera, image, tier="prompted", seed=seed,
                                    backend=desc["kind"])
        sample.sample_id = f"{sample.sample_id.rsplit('_', 1)[0]}_{t.id}_{j}"
        sample.provenance["backend_descriptor"] = desc
        accepted.append((t.id, j, sample))
    accepted.sort(key=lambda r: (r[0], r[1]))
    return [s for _, _, s in accepted], stats
