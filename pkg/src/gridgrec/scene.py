"""Grid-world model: blocks, colors, identifiers and procedural scene generation.

The world is an 11 x 11 footprint with a configurable height limit. Each block
sits on an integer cell, carries one of seven palette colors and an identifier
of the form ``<letter><digits>`` (``A1``, ``C17``).
"""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigInfeasible

FOOTPRINT = 11
DEFAULT_HEIGHT = 9
LETTERS = string.ascii_uppercase
DIGITS_PER_LETTER = 26

ARCHETYPES = ("column", "row", "bar", "arch", "L-shape", "scatter")


@dataclass(frozen=True, order=True)
class GridCoord:
    x: int
    y: int
    z: int

    def sort_key(self) -> tuple[int, int, int]:
        # row-major: layer, then row, then column
        return (self.y, self.z, self.x)

    def offset(self, dx: int = 0, dy: int = 0, dz: int = 0) -> "GridCoord":
        return GridCoord(self.x + dx, self.y + dy, self.z + dz)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.x, self.y, self.z)

    def in_bounds(self, height: int = DEFAULT_HEIGHT) -> bool:
        return 0 <= self.x < FOOTPRINT and 0 <= self.z < FOOTPRINT and 0 <= self.y < height


@dataclass(frozen=True, order=True)
class BlockColor:
    name: str
    rgb: tuple[int, int, int] = field(compare=False)


DEFAULT_PALETTE: tuple[BlockColor, ...] = (
    BlockColor("red", (200, 40, 40)),
    BlockColor("orange", (230, 130, 30)),
    BlockColor("yellow", (230, 210, 50)),
    BlockColor("green", (60, 170, 60)),
    BlockColor("blue", (50, 80, 200)),
    BlockColor("purple", (140, 60, 170)),
    BlockColor("white", (235, 235, 235)),
)


def validate_palette(palette: Sequence[BlockColor]) -> None:
    names = [c.name for c in palette]
    if len(names) != 7 or len(set(names)) != 7:
        raise ValueError("palette must hold exactly 7 distinct colors")
    for name in names:
        if not (name.isalpha() and name.islower()):
            raise ValueError(f"color name {name!r} must be a lowercase single word")


def palette_lookup(palette: Sequence[BlockColor] = DEFAULT_PALETTE) -> dict[str, BlockColor]:
    return {c.name: c for c in palette}


@dataclass(frozen=True, order=True)
class BlockId:
    letter: str
    digit: int

    def __post_init__(self):
        if len(self.letter) != 1 or self.letter not in LETTERS:
            raise ValueError(f"bad id letter {self.letter!r}")
        if self.digit < 1:
            raise ValueError("id digit must be positive")

    def __str__(self) -> str:
        return f"{self.letter}{self.digit}"

    @classmethod
    def parse(cls, text: str) -> "BlockId":
        text = text.strip()
        if len(text) < 2 or not text[1:].isdigit():
            raise ValueError(f"bad block id {text!r}")
        return cls(text[0], int(text[1:]))


def policy_id(index: int) -> BlockId:
    """Identifier for the ``index``-th block in row-major order.

    Digits run 1..26 under each letter (A1..A26, B1, ...). Past Z26 the letters
    wrap and the digit range shifts by 26 so identifiers stay unique.
    """
    cycle, rem = divmod(index, DIGITS_PER_LETTER * len(LETTERS))
    letter_idx, digit = divmod(rem, DIGITS_PER_LETTER)
    return BlockId(LETTERS[letter_idx], digit + 1 + cycle * DIGITS_PER_LETTER)


@dataclass(frozen=True)
class Block:
    coord: GridCoord
    color: BlockColor
    id: BlockId | None = None


@dataclass(frozen=True)
class Scene:
    """An immutable set of blocks. ``blocks`` is stored in row-major coord order."""

    blocks: tuple[Block, ...]
    seed: int = 0
    scene_id: str = "scene"
    height: int = DEFAULT_HEIGHT
    floating_allowed: bool = True

    def __post_init__(self):
        ordered = tuple(sorted(self.blocks, key=lambda b: b.coord.sort_key()))
        object.__setattr__(self, "blocks", ordered)
        coords = [b.coord for b in ordered]
        if len(set(coords)) != len(coords):
            raise ValueError("two blocks share a coordinate")
        for c in coords:
            if not c.in_bounds(self.height):
                raise ValueError(f"block {c} outside the grid")
        ids = [b.id for b in ordered if b.id is not None]
        if len(set(ids)) != len(ids):
            raise ValueError("two blocks share an id")
        if not self.floating_allowed:
            occupied = set(coords)
            for c in coords:
                if c.y > 0 and c.offset(dy=-1) not in occupied:
                    raise ValueError(f"unsupported block at {c}")

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def has_ids(self) -> bool:
        return all(b.id is not None for b in self.blocks)

    def by_coord(self) -> dict[GridCoord, Block]:
        return {b.coord: b for b in self.blocks}

    def by_id(self) -> dict[str, Block]:
        return {str(b.id): b for b in self.blocks if b.id is not None}

    def ids(self) -> list[str]:
        return [str(b.id) for b in self.blocks]


def assign_ids(scene: Scene) -> Scene:
    """Give every block its row-major policy identifier."""
    blocks = tuple(replace(b, id=policy_id(i)) for i, b in enumerate(scene.blocks))
    return replace(scene, blocks=blocks)


def strip_ids(scene: Scene) -> Scene:
    return replace(scene, blocks=tuple(replace(b, id=None) for b in scene.blocks))


def blocks_by_color(scene: Scene) -> dict[BlockColor, frozenset[Block]]:
    groups: dict[BlockColor, set[Block]] = {}
    for b in scene.blocks:
        groups.setdefault(b.color, set()).add(b)
    return {c: frozenset(g) for c, g in groups.items()}


def make_scene(cells: Iterable[tuple[tuple[int, int, int], str]], *, palette=DEFAULT_PALETTE,
               scene_id: str = "fixture", seed: int = 0, height: int = DEFAULT_HEIGHT) -> Scene:
    """Build an id-assigned scene from ``((x, y, z), color_name)`` pairs."""
    lookup = palette_lookup(palette)
    blocks = tuple(Block(GridCoord(*xyz), lookup[name]) for xyz, name in cells)
    return assign_ids(Scene(blocks, seed=seed, scene_id=scene_id, height=height))


# --------------------------------------------------------------------------
# procedural generation


@dataclass(frozen=True)
class SceneConfig:
    archetypes: tuple[str, ...] = ARCHETYPES
    colors: int = 7
    palette: tuple[BlockColor, ...] = DEFAULT_PALETTE
    min_blocks: int = 12
    max_blocks: int = 48
    min_structures: int = 3
    max_structures: int = 7
    height: int = DEFAULT_HEIGHT
    require_support: bool = False
    max_attempts: int = 400

    def __post_init__(self):
        if not self.archetypes:
            raise ValueError("at least one structure archetype must be enabled")
        unknown = set(self.archetypes) - set(ARCHETYPES)
        if unknown:
            raise ValueError(f"unknown archetypes: {sorted(unknown)}")
        if not 1 <= self.colors <= len(self.palette):
            raise ValueError("colors must be between 1 and the palette size")
        validate_palette(self.palette)

    @property
    def capacity(self) -> int:
        return FOOTPRINT * FOOTPRINT * self.height


Cells = dict[GridCoord, str]


def _line(start: GridCoord, axis: str, length: int) -> list[GridCoord]:
    step = {"x": (1, 0, 0), "y": (0, 1, 0), "z": (0, 0, 1)}[axis]
    return [start.offset(*(s * i for s in step)) for i in range(length)]


def _rand_ground(rng, margin: int = 0) -> tuple[int, int]:
    return int(rng.integers(0, FOOTPRINT - margin)), int(rng.integers(0, FOOTPRINT - margin))


def _build(kind: str, rng: np.random.Generator, colors: Sequence[str], height: int) -> Cells:
    pick = lambda: colors[int(rng.integers(len(colors)))]  # noqa: E731
    axis = "x" if rng.random() < 0.5 else "z"
    cells: Cells = {}
    if kind == "column":
        x, z = _rand_ground(rng)
        h = int(rng.integers(3, min(6, height) + 1))
        color = pick()
        for c in _line(GridCoord(x, 0, z), "y", h):
            cells[c] = color
    elif kind == "row":
        length = int(rng.integers(2, 7))
        x, z = _rand_ground(rng)
        color = pick()
        for c in _line(GridCoord(x, 0, z), axis, length):
            cells[c] = color
    elif kind == "bar":
        length = int(rng.integers(3, 6))
        x, z = _rand_ground(rng)
        y = int(rng.integers(1, min(4, height - 1) + 1))
        color = pick()
        for c in _line(GridCoord(x, y, z), axis, length):
            cells[c] = color
    elif kind == "arch":
        h = int(rng.integers(2, 5))
        gap = int(rng.integers(1, 4))
        capped = rng.random() < 0.5
        x, z = _rand_ground(rng)
        start = GridCoord(x, 0, z)
        far = start.offset(**{"d" + axis: gap + 1})
        left, right, bridge = pick(), pick(), pick()
        for c in _line(start, "y", h):
            cells[c] = left
        for c in _line(far, "y", h):
            cells[c] = right
        if capped:
            for c in _line(start.offset(dy=h), axis, gap + 2):
                cells[c] = bridge
        else:
            for c in _line(start.offset(dy=h - 1, **{"d" + axis: 1}), axis, gap):
                cells[c] = bridge
    elif kind == "L-shape":
        x, z = _rand_ground(rng)
        color = pick()
        v = int(rng.integers(2, 5))
        hlen = int(rng.integers(2, 5))
        sign = 1 if rng.random() < 0.5 else -1
        corner = GridCoord(x, 0, z)
        for c in _line(corner, "y", v):
            cells[c] = color
        for i in range(1, hlen):
            cells[corner.offset(**{"d" + axis: sign * i})] = color
    elif kind == "scatter":
        for _ in range(int(rng.integers(2, 5))):
            x, z = _rand_ground(rng)
            cells[GridCoord(x, 0, z)] = pick()
    else:  # pragma: no cover - guarded by SceneConfig
        raise ValueError(kind)
    return cells


def _has_pair_segment(cells: Cells) -> bool:
    for c, color in cells.items():
        for d in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            if cells.get(c.offset(*d)) == color:
                return True
    return False


def _add_support(cells: Cells) -> Cells:
    out = dict(cells)
    for c in sorted(cells, key=lambda c: -c.y):
        y = c.y - 1
        while y >= 0 and GridCoord(c.x, y, c.z) not in out:
            out[GridCoord(c.x, y, c.z)] = cells[c]
            y -= 1
    return out


def generate_scene(seed: int, config: SceneConfig = SceneConfig(), scene_id: str | None = None) -> Scene:
    """Procedurally build a scene; a pure function of ``(seed, config)``."""
    if config.min_blocks > config.capacity:
        raise ConfigInfeasible(
            f"min_blocks={config.min_blocks} exceeds grid capacity {config.capacity}")
    if config.min_blocks > config.max_blocks:
        raise ConfigInfeasible("min_blocks exceeds max_blocks")
    rng = np.random.default_rng(seed)
    colors = [c.name for c in config.palette[: config.colors]]
    lookup = palette_lookup(config.palette)
    cells: Cells = {}
    n_target = int(rng.integers(config.min_structures, config.max_structures + 1))
    placed = attempts = 0
    while attempts < config.max_attempts and (placed < n_target or len(cells) < config.min_blocks):
        attempts += 1
        kind = config.archetypes[int(rng.integers(len(config.archetypes)))]
        new = _build(kind, rng, colors, config.height)
        if config.require_support:
            new = _add_support(new)
        if any(not c.in_bounds(config.height) or c in cells for c in new):
            continue
        if len(cells) + len(new) > config.max_blocks:
            continue
        cells.update(new)
        placed += 1

    if len(cells) < config.min_blocks:
        # fill layer by layer so that support holds for free
        for y in range(config.height):
            layer = [GridCoord(x, y, z) for z in range(FOOTPRINT) for x in range(FOOTPRINT)]
            layer = [c for c in layer if c not in cells]
            for i in rng.permutation(len(layer)):
                if len(cells) >= config.min_blocks:
                    break
                c = layer[int(i)]
                if config.require_support and y > 0 and c.offset(dy=-1) not in cells:
                    continue
                cells[c] = colors[int(rng.integers(len(colors)))]

    if not _has_pair_segment(cells) and len(cells) + 2 <= config.max_blocks:
        for x in range(FOOTPRINT):
            for z in range(FOOTPRINT):
                a, b = GridCoord(x, 0, z), GridCoord(x, 1, z)
                if a not in cells and b not in cells and config.height > 1:
                    color = colors[int(rng.integers(len(colors)))]
                    cells[a] = cells[b] = color
                    break
            else:
                continue
            break

    blocks = tuple(Block(c, lookup[name]) for c, name in cells.items())
    scene = Scene(blocks, seed=seed, scene_id=scene_id or f"scene_{seed}", height=config.height,
                  floating_allowed=not config.require_support)
    return assign_ids(scene)


# --------------------------------------------------------------------------
# serialization


def scene_to_dict(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "seed": int(scene.seed),
        "grid": [
            {"x": b.coord.x, "y": b.coord.y, "z": b.coord.z, "color": b.color.name,
             "id": None if b.id is None else str(b.id)}
            for b in scene.blocks
        ],
    }


def scene_from_dict(data: dict, palette: Sequence[BlockColor] = DEFAULT_PALETTE,
                    height: int = DEFAULT_HEIGHT) -> Scene:
    lookup = palette_lookup(palette)
    blocks = tuple(
        Block(GridCoord(g["x"], g["y"], g["z"]), lookup[g["color"]],
              None if g.get("id") is None else BlockId.parse(g["id"]))
        for g in data["grid"]
    )
    return Scene(blocks, seed=int(data["seed"]), scene_id=data["scene_id"], height=height)


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), ensure_ascii=False, separators=(",", ":"))


def loads_scene(text: str, palette: Sequence[BlockColor] = DEFAULT_PALETTE) -> Scene:
    return scene_from_dict(json.loads(text), palette)
