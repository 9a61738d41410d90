"""Dialogue and training-sample records shared by all three synthesis tiers."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .render import PixelBBox, RenderedImage
from .scene import BlockId

ARCHITECT, BUILDER = "Architect", "Builder"
TIERS = ("template", "prompted", "dialogue")


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    chain_id: str


@dataclass(frozen=True)
class DialogueTurn:
    speaker: str
    text: str
    mentions: tuple[Mention, ...] = ()


@dataclass(frozen=True)
class MentionRef:
    turn: int
    start: int
    end: int


@dataclass(frozen=True)
class FinalMention:
    turn: int
    start: int
    end: int
    chain_id: str

    def ref(self) -> MentionRef:
        return MentionRef(self.turn, self.start, self.end)


@dataclass(frozen=True)
class Dialogue:
    turns: tuple[DialogueTurn, ...]
    chains: dict  # chain_id -> tuple[MentionRef, ...] in dialogue order
    final_mention: FinalMention
    singletons: frozenset = frozenset()

    __hash__ = None  # chains is a dict

    def text_of(self, ref: MentionRef) -> str:
        return self.turns[ref.turn].text[ref.start:ref.end]

    @property
    def final_text(self) -> str:
        return self.text_of(self.final_mention.ref())

    def antecedent(self) -> MentionRef:
        """First mention of the final mention's chain."""
        return self.chains[self.final_mention.chain_id][0]

    def antecedent_text(self) -> str:
        return self.text_of(self.antecedent())

    def full_text(self) -> str:
        return "\n".join(f"{t.speaker}: {t.text}" for t in self.turns)


def single_utterance(surface: str) -> Dialogue:
    """A one-turn Architect dialogue whose only mention is the whole expression."""
    end = len(surface) - 1 if surface.endswith(".") else len(surface)
    turn = DialogueTurn(ARCHITECT, surface, (Mention(0, end, "c0"),))
    return Dialogue((turn,), {"c0": (MentionRef(0, 0, end),)}, FinalMention(0, 0, end, "c0"),
                    frozenset({"c0"}))


@dataclass(frozen=True)
class Target:
    id: BlockId
    bbox: PixelBBox


@dataclass
class TrainingSample:
    sample_id: str
    image_ref: str
    dialogue: Dialogue
    targets: tuple[Target, ...]
    tier: str
    provenance: dict = field(default_factory=dict)
    no_target: bool = False
    image: RenderedImage | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        if not self.targets and not self.no_target:
            raise ValueError("targets may only be empty for an explicit no-target sample")

    @property
    def target_ids(self) -> frozenset:
        return frozenset(t.id for t in self.targets)

    @property
    def gt_boxes(self) -> list[PixelBBox]:
        return [t.bbox for t in self.targets]

    def mention_only_text(self) -> str:
        """The text a Mention-Only model sees: the full antecedent expression."""
        return self.dialogue.antecedent_text()


# --------------------------------------------------------------------------
# serialization


def dialogue_to_dict(d: Dialogue) -> dict:
    return {
        "turns": [
            {"speaker": t.speaker, "text": t.text,
             "mentions": [{"start": m.start, "end": m.end, "chain_id": m.chain_id} for m in t.mentions]}
            for t in d.turns
        ],
        "chains": [
            {"chain_id": cid, "singleton": cid in d.singletons,
             "mentions": [{"turn": r.turn, "start": r.start, "end": r.end} for r in refs]}
            for cid, refs in d.chains.items()
        ],
        "final_mention": {"turn": d.final_mention.turn, "start": d.final_mention.start,
                          "end": d.final_mention.end, "chain_id": d.final_mention.chain_id},
    }


def dialogue_from_dict(data: dict) -> Dialogue:
    turns = tuple(
        DialogueTurn(t["speaker"], t["text"],
                     tuple(Mention(m["start"], m["end"], m["chain_id"]) for m in t.get("mentions", ())))
        for t in data["turns"]
    )
    chains = {c["chain_id"]: tuple(MentionRef(m["turn"], m["start"], m["end"]) for m in c["mentions"])
              for c in data["chains"]}
    singles = frozenset(c["chain_id"] for c in data["chains"] if c.get("singleton"))
    fm = data["final_mention"]
    return Dialogue(turns, chains, FinalMention(fm["turn"], fm["start"], fm["end"], fm["chain_id"]), singles)


def sample_to_dict(s: TrainingSample) -> dict:
    out = {
        "sample_id": s.sample_id,
        "image": s.image_ref,
        "dialogue": dialogue_to_dict(s.dialogue),
        "targets": [{"id": str(t.id), "bbox": t.bbox.as_list()} for t in s.targets],
        "tier": s.tier,
        "provenance": s.provenance,
    }
    if s.no_target:
        out["no_target"] = True
    return out


def sample_from_dict(d: dict) -> TrainingSample:
    return TrainingSample(
        d["sample_id"], d["image"], dialogue_from_dict(d["dialogue"]),
        tuple(Target(BlockId.parse(t["id"]), PixelBBox.from_list(t["bbox"])) for t in d["targets"]),
        d["tier"], d.get("provenance", {}), bool(d.get("no_target", False)),
    )


def dumps_sample(s: TrainingSample) -> str:
    return json.dumps(sample_to_dict(s), ensure_ascii=False, sort_keys=False, separators=(",", ":"))


def loads_sample(line: str) -> TrainingSample:
    return sample_from_dict(json.loads(line))


def sort_samples(samples: Sequence[TrainingSample]) -> list[TrainingSample]:
    return sorted(samples, key=lambda s: s.sample_id)
