"""Block letter recovery by render-and-compare.

For a target block and each candidate letter, only that block is re-rendered
with the candidate glyph (geometry and colors fixed) and the mean absolute
error against the observed image is taken over the block's pixel mask. The
candidate with the lowest error wins; ties go to the alphabetically first.
Digits are not read optically: they follow from the row-major id policy.
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyCandidates, TargetOccluded
from .render import MIN_VISIBLE_PIXELS, RenderedImage, block_pixels, rasterize
from .scene import BlockId, GridCoord, Scene, policy_id

DEFAULT_CANDIDATES = tuple(string.ascii_uppercase)


@dataclass(frozen=True)
class RecoveryResult:
    block_coord: GridCoord
    recovered_letter: str
    per_candidate_mae: dict
    margin: float
    digit: int
    legible: bool = True

    @property
    def recovered_id(self) -> BlockId:
        return BlockId(self.recovered_letter, self.digit)

    def to_dict(self) -> dict:
        return {
            "coord": list(self.block_coord.as_tuple()),
            "recovered_letter": self.recovered_letter,
            "recovered_id": str(self.recovered_id),
            "margin": self.margin,
            "legible": self.legible,
            "per_candidate_mae": {k: self.per_candidate_mae[k] for k in sorted(self.per_candidate_mae)},
        }


class SkippedBlock(NamedTuple):
    coord: GridCoord
    reason: str  # "occluded" or "illegible"


class SceneRecovery(NamedTuple):
    results: list[RecoveryResult]
    skipped: list[SkippedBlock]


def add_uniform_noise(image: RenderedImage, amplitude: float, rng: np.random.Generator) -> RenderedImage:
    """Additive uniform noise in [-amplitude, amplitude] (byte units), rounded and clipped."""
    noisy = image.pixels.astype(np.float64) + rng.uniform(-amplitude, amplitude, image.pixels.shape)
    pixels = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    return RenderedImage(image.width, image.height, pixels, image.scene_id, image.camera,
                         image.origin, image.annotations)


def _locate(scene: Scene, target: GridCoord) -> int:
    for i, b in enumerate(scene.blocks):
        if b.coord == target:
            return i
    raise ValueError(f"no block at {target}")


def recover_letter(image: RenderedImage, scene_geometry: Scene, target: GridCoord,
                   candidates: Sequence[str] = DEFAULT_CANDIDATES) -> RecoveryResult:
    if not candidates:
        raise EmptyCandidates("candidate letter set is empty")
    if image.origin != (0, 0) or (image.width, image.height) != (
            image.camera.image_width, image.camera.image_height):
        raise ValueError("recovery needs the full frame, not a crop")
    index = _locate(scene_geometry, target)
    raster = rasterize(scene_geometry, image.camera)
    if raster.count(index) == 0:
        raise TargetOccluded(f"block at {target} has no visible pixels")
    block = scene_geometry.blocks[index]
    digit = policy_id(index).digit
    pix = raster.pixels_of(index)
    observed = image.pixels.reshape(-1, 3)[pix].astype(np.int64)

    maes: dict[str, float] = {}
    renders = set()
    for letter in sorted(set(candidates)):
        _, colors = block_pixels(raster, index, block, f"{letter}{digit}")
        renders.add(colors.tobytes())
        maes[letter] = float(np.abs(observed - colors).mean())
    ranked = sorted(maes.items(), key=lambda kv: (kv[1], kv[0]))
    margin = ranked[1][1] - ranked[0][1] if len(ranked) > 1 else 0.0
    return RecoveryResult(target, ranked[0][0], maes, margin, digit, legible=len(renders) == len(maes))


def recover_scene_ids(image: RenderedImage, scene_geometry: Scene,
                      candidates: Sequence[str] = DEFAULT_CANDIDATES,
                      min_pixels: int = MIN_VISIBLE_PIXELS) -> SceneRecovery:
    """Recover letters for every visible block.

    Blocks under ``min_pixels`` front-most pixels are skipped as occluded. A
    block whose visible pixels cannot tell the candidate glyphs apart (every
    letter cell it shows is shared) is skipped as illegible; that test uses
    geometry only, never the true letter.
    """
    raster = rasterize(scene_geometry, image.camera)
    results, skipped = [], []
    for i, block in enumerate(scene_geometry.blocks):
        if raster.count(i) < min_pixels:
            skipped.append(SkippedBlock(block.coord, "occluded"))
            continue
        res = recover_letter(image, scene_geometry, block.coord, candidates)
        if not res.legible:
            skipped.append(SkippedBlock(block.coord, "illegible"))
            continue
        results.append(res)
    return SceneRecovery(results, skipped)
