"""Embedded 5x7 bitmap font for block identifiers (A-Z, 0-9)."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

GLYPH_W, GLYPH_H = 5, 7

_GLYPHS = {
    "A": ".###. #...# #...# ##### #...# #...# #...#",
    "B": "####. #...# #...# ####. #...# #...# ####.",
    "C": ".###. #...# #.... #.... #.... #...# .###.",
    "D": "###.. #..#. #...# #...# #...# #..#. ###..",
    "E": "##### #.... #.... ####. #.... #.... #####",
    "F": "##### #.... #.... ####. #.... #.... #....",
    "G": ".###. #...# #.... #.### #...# #...# .####",
    "H": "#...# #...# #...# ##### #...# #...# #...#",
    "I": ".###. ..#.. ..#.. ..#.. ..#.. ..#.. .###.",
    "J": "..### ...#. ...#. ...#. ...#. #..#. .##..",
    "K": "#...# #..#. #.#.. ##... #.#.. #..#. #...#",
    "L": "#.... #.... #.... #.... #.... #.... #####",
    "M": "#...# ##.## #.#.# #.#.# #...# #...# #...#",
    "N": "#...# #...# ##..# #.#.# #..## #...# #...#",
    "O": ".###. #...# #...# #...# #...# #...# .###.",
    "P": "####. #...# #...# ####. #.... #.... #....",
    "Q": ".###. #...# #...# #...# #.#.# #..#. .##.#",
    "R": "####. #...# #...# ####. #.#.. #..#. #...#",
    "S": ".#### #.... #.... .###. ....# ....# ####.",
    "T": "##### ..#.. ..#.. ..#.. ..#.. ..#.. ..#..",
    "U": "#...# #...# #...# #...# #...# #...# .###.",
    "V": "#...# #...# #...# #...# #...# .#.#. ..#..",
    "W": "#...# #...# #...# #.#.# #.#.# #.#.# .#.#.",
    "X": "#...# #...# .#.#. ..#.. .#.#. #...# #...#",
    "Y": "#...# #...# .#.#. ..#.. ..#.. ..#.. ..#..",
    "Z": "##### ....# ...#. ..#.. .#... #.... #####",
    "0": ".###. #...# #..## #.#.# ##..# #...# .###.",
    "1": "..#.. .##.. ..#.. ..#.. ..#.. ..#.. .###.",
    "2": ".###. #...# ....# ...#. ..#.. .#... #####",
    "3": "##### ...#. ..#.. ...#. ....# #...# .###.",
    "4": "...#. ..##. .#.#. #..#. ##### ...#. ...#.",
    "5": "##### #.... ####. ....# ....# #...# .###.",
    "6": "..##. .#... #.... ####. #...# #...# .###.",
    "7": "##### ....# ...#. ..#.. .#... .#... .#...",
    "8": ".###. #...# #...# .###. #...# #...# .###.",
    "9": ".###. #...# #...# .#### ....# ...#. .##..",
}


@lru_cache(maxsize=None)
def glyph(char: str) -> np.ndarray:
    """Boolean (7, 5) bitmap for one character."""
    rows = _GLYPHS[char.upper()].split()
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)


@lru_cache(maxsize=4096)
def text_bitmap(text: str) -> np.ndarray:
    """Bitmap for an id label: the leading letter at double scale, the digits
    after it at unit scale and bottom-aligned, 1-texel border all round.

    The letter dominates the label because it is the part that gets read back
    optically; small faces must still sample every one of its cells.
    """
    head, tail = text[0], text[1:]
    tail_w = len(tail) * (GLYPH_W + 1)
    height = 2 * GLYPH_H + 2
    out = np.zeros((height, 1 + 2 * GLYPH_W + tail_w + 1), dtype=bool)
    out[1:1 + 2 * GLYPH_H, 1:1 + 2 * GLYPH_W] = np.kron(glyph(head), np.ones((2, 2), dtype=bool))
    for i, ch in enumerate(tail):
        x0 = 2 + 2 * GLYPH_W + i * (GLYPH_W + 1)
        out[1 + GLYPH_H:1 + 2 * GLYPH_H, x0:x0 + GLYPH_W] = glyph(ch)
    out.setflags(write=False)
    return out
