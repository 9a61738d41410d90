"""Brute-force reference implementations used to cross-check the library.

Nothing here imports gridgrec's semantics, template or render internals: the
structure predicates, camera projection and denotation are re-derived from
their definitions and evaluated exhaustively (every block, every binding).
"""
from __future__ import annotations

import math
import re
from itertools import permutations

import numpy as np

ORDINAL_WORDS = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth",
                 "ninth", "tenth", "eleventh", "twelfth", "thirteenth", "fourteenth", "fifteenth",
                 "sixteenth", "seventeenth", "eighteenth", "nineteenth", "twentieth"]
NOUNS = {"column": "column", "row": "row", "bar": "bar", "arch": "arch", "L-shape": "L-shape",
         "group": "scatter-group", "structure": "structure"}
TOL = 1e-9


# --------------------------------------------------------------------------
# scene as plain tuples: {(x, y, z): (color, id)}


def cells(scene) -> dict:
    return {(b.coord.x, b.coord.y, b.coord.z): (b.color.name, str(b.id)) for b in scene.blocks}


def runs(cellmap: dict, step: tuple, same_color: bool) -> list[list[tuple]]:
    """Maximal runs along ``step`` by scanning every line of the grid."""
    out = []
    seen = set()
    for c in sorted(cellmap):
        if c in seen:
            continue
        prev = (c[0] - step[0], c[1] - step[1], c[2] - step[2])
        if prev in cellmap and (not same_color or cellmap[prev][0] == cellmap[c][0]):
            continue
        run = [c]
        while True:
            n = (run[-1][0] + step[0], run[-1][1] + step[1], run[-1][2] + step[2])
            if n in cellmap and (not same_color or cellmap[n][0] == cellmap[c][0]):
                run.append(n)
            else:
                break
        seen.update(run)
        out.append(run)
    return out


def segments(cellmap: dict) -> list[tuple[str, list]]:
    out = []
    for axis, step in (("vertical", (0, 1, 0)), ("x-horizontal", (1, 0, 0)), ("z-horizontal", (0, 0, 1))):
        for r in runs(cellmap, step, True):
            out.append((axis, r))
    return out


def structures(cellmap: dict) -> list[tuple[str, frozenset, str | None]]:
    """(kind, member coords, color or None) for every structure."""
    out = []

    def color_of(members):
        cs = {cellmap[m][0] for m in members}
        return cs.pop() if len(cs) == 1 else None

    # arches: an occupied horizontal run (any colors) of length >= 3 above ground,
    # solid legs under both ends reaching the same base, nothing underneath between
    arch_sets = set()
    for step in ((1, 0, 0), (0, 0, 1)):
        for r in runs(cellmap, step, False):
            if r[0][1] < 1 or len(r) < 3:
                continue
            legs = []
            for end in (r[0], r[-1]):
                leg = []
                y = end[1] - 1
                while y >= 0 and (end[0], y, end[2]) in cellmap:
                    leg.append((end[0], y, end[2]))
                    y -= 1
                legs.append(leg)
            if not legs[0] or not legs[1] or legs[0][-1][1] != legs[1][-1][1]:
                continue
            base = legs[0][-1][1]
            if any((p[0], y, p[2]) in cellmap for p in r[1:-1] for y in range(base, r[0][1])):
                continue
            arch_sets.add(frozenset(r) | frozenset(legs[0]) | frozenset(legs[1]))
    for m in arch_sets:
        out.append(("arch", m, color_of(m)))

    segs = segments(cellmap)
    for av, v in segs:
        if av != "vertical" or len(v) < 2:
            continue
        for ah, h in segs:
            if ah == "vertical" or len(h) < 2 or cellmap[h[0]][0] != cellmap[v[0]][0]:
                continue
            common = set(v) & set(h)
            if len(common) == 1 and common <= {v[0], v[-1]} and common <= {h[0], h[-1]}:
                m = frozenset(v) | frozenset(h)
                out.append(("L-shape", m, color_of(m)))
    for axis, r in segs:
        if axis == "vertical":
            if len(r) >= 2:
                out.append(("column", frozenset(r), cellmap[r[0]][0]))
        elif r[0][1] == 0 and len(r) >= 2:
            out.append(("row", frozenset(r), cellmap[r[0]][0]))
        elif r[0][1] > 0 and len(r) >= 3:
            out.append(("bar", frozenset(r), cellmap[r[0]][0]))
    covered = set().union(*(m for _, m, _ in out)) if out else set()
    by_color: dict = {}
    for c, (col, _) in cellmap.items():
        if c not in covered:
            by_color.setdefault(col, set()).add(c)
    for col, m in by_color.items():
        out.append(("scatter-group", frozenset(m), col))
    return out


# --------------------------------------------------------------------------
# camera


def camera_frame(cam):
    cy, sy = math.cos(cam.yaw), math.sin(cam.yaw)
    cp, sp = math.cos(cam.pitch), math.sin(cam.pitch)
    fwd = np.array([cp * sy, sp, cp * cy])
    # right = forward x world-up, worked out by hand
    right = np.array([-fwd[2], 0.0, fwd[0]])
    right = right / np.linalg.norm(right)
    up = np.array([right[1] * fwd[2] - right[2] * fwd[1],
                   right[2] * fwd[0] - right[0] * fwd[2],
                   right[0] * fwd[1] - right[1] * fwd[0]])
    return fwd, right, up


def project_point(cam, p):
    fwd, right, up = camera_frame(cam)
    d = np.asarray(p, float) - np.asarray(cam.position, float)
    depth = float(d @ fwd)
    focal = (cam.image_height / 2) / math.tan(cam.fov / 2)
    u = cam.image_width / 2 + focal * float(d @ right) / depth
    v = cam.image_height / 2 - focal * float(d @ up) / depth
    return u, v, depth


def cast_ray(cam, px: float, py: float, cellmap: dict):
    """Nearest cube hit by the ray through pixel (px, py): (coord, t, second_t)."""
    fwd, right, up = camera_frame(cam)
    focal = (cam.image_height / 2) / math.tan(cam.fov / 2)
    d = fwd + (px - cam.image_width / 2) / focal * right - (py - cam.image_height / 2) / focal * up
    o = np.asarray(cam.position, float)
    hits = []
    for c in cellmap:
        lo = np.array(c, float)
        hi = lo + 1
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tmin = np.nanmax(np.minimum(t1, t2))
        tmax = np.nanmin(np.maximum(t1, t2))
        if tmax >= tmin and tmax > 0:
            hits.append((tmin, c))
    hits.sort()
    if not hits:
        return None, math.inf, math.inf
    return hits[0][1], hits[0][0], hits[1][0] if len(hits) > 1 else math.inf


# --------------------------------------------------------------------------
# expressions


def parse_surface(text: str, colors) -> dict:
    """Slots from surface text, by word-level pattern matching."""
    c = "|".join(sorted(colors, key=len, reverse=True))
    o = "|".join(ORDINAL_WORDS)
    n = "|".join(sorted(NOUNS, key=len, reverse=True))
    p = "top|bottom|left|right|front|back"
    v = "close to you|far from you|on your left|on your right"
    ref = rf"(?:({c}) )?({n})"
    pats = [
        ("color-plural", rf"the ({c}) block(s?)\.", ("color", "plural")),
        ("color-shape", rf"the {ref}\.", ("rcolor", "noun")),
        ("ordinal-in-shape", rf"the ({o}) ({c}) block from the ({p})\.", ("ordinal", "color", "position")),
        ("ordinal-in-shape", rf"the ({o}) block(?: from the ({p}))? of the {ref}\.",
         ("ordinal", "position", "rcolor", "noun")),
        ("canonical-i", rf"the center ({c}) block of the {ref}, ({v})\.", ("color", "rcolor", "noun", "perspective")),
        ("canonical-ii", rf"the ({o}) ({c}) block from the ({p}) of the {ref}, ({v})\.",
         ("ordinal", "color", "position", "rcolor", "noun", "perspective")),
    ]
    found = []
    for form, rx, names in pats:
        m = re.fullmatch(rx, text)
        if m:
            found.append((form, dict(zip(names, m.groups()))))
    assert len(found) == 1, f"{text!r} matched {len(found)} patterns"
    form, g = found[0]
    return {
        "form": form,
        "color": g.get("color"),
        "plural": bool(g.get("plural")),
        "ordinal": ORDINAL_WORDS.index(g["ordinal"]) + 1 if g.get("ordinal") else None,
        "position": g.get("position"),
        "ref_kind": NOUNS[g["noun"]] if g.get("noun") else None,
        "ref_color": g.get("rcolor"),
        "perspective": g.get("perspective"),
    }


def _keys(cam, cellmap):
    fwd, right, _ = camera_frame(cam)
    o = np.asarray(cam.position, float)
    out = {}
    for c in cellmap:
        p = np.array(c, float) + 0.5
        u, _, depth = project_point(cam, p)
        out[c] = {"u": u, "depth": depth, "dist": float(np.linalg.norm(p - o))}
    return out


def _direction(position, c, k):
    return {"top": -c[1], "bottom": c[1], "left": k[c]["u"], "right": -k[c]["u"],
            "front": k[c]["depth"], "back": -k[c]["depth"]}[position]


def _rank(value, values) -> int:
    """Dense rank (1-based) of ``value`` among ``values`` with tolerance."""
    distinct = []
    for x in sorted(values):
        if not distinct or x - distinct[-1] > TOL:
            distinct.append(x)
    return 1 + sum(1 for x in distinct if x < value - TOL)


def _is_extreme(value, values) -> bool:
    return all(value <= x + TOL for x in values)


def denote_per_binding(slots: dict, scene, cam) -> list[frozenset]:
    """Exhaustive denotation: each block is tested against the predicate
    under each binding of the reference slot."""
    cm = cells(scene)
    k = _keys(cam, cm)
    form = slots["form"]
    if slots["ref_kind"] in (None, "structure"):
        binds = [frozenset(cm)]
    else:
        binds = [m for kind, m, col in structures(cm)
                 if kind == slots["ref_kind"] and (slots["ref_color"] is None or col == slots["ref_color"])]
    # de-duplicate identical member sets of the same kind (arches found from two scan directions)
    binds = list(dict.fromkeys(binds))
    default = "left" if slots["ref_kind"] in ("row", "bar", "scatter-group") else "top"
    out = []
    for members in binds:
        if form == "color-shape":
            out.append(frozenset(cm[c][1] for c in members))
            continue
        dom = [c for c in members if slots["color"] is None or cm[c][0] == slots["color"]]
        chosen = []
        for c in cm:  # every block in the scene
            if c not in dom:
                continue
            if form in ("ordinal-in-shape", "canonical-ii"):
                pos = slots["position"] or default
                if _rank(_direction(pos, c, k), [_direction(pos, d, k) for d in dom]) != slots["ordinal"]:
                    continue
            if form == "canonical-i":
                cen = np.mean(np.array(sorted(members), float), axis=0)
                dist = lambda q: float(np.linalg.norm(np.array(q, float) - cen))  # noqa: E731
                if not _is_extreme(dist(c), [dist(d) for d in dom]):
                    continue
            chosen.append(c)
        if slots["perspective"]:
            key = {"close to you": lambda q: k[q]["dist"], "far from you": lambda q: -k[q]["dist"],
                   "on your left": lambda q: k[q]["u"], "on your right": lambda q: -k[q]["u"]}[slots["perspective"]]
            vals = [key(q) for q in chosen]
            chosen = [q for q in chosen if _is_extreme(key(q), vals)]
        out.append(frozenset(cm[c][1] for c in chosen))
    return out


def uniquely_denotes(surface: str, intended, scene, cam) -> bool:
    """True iff the expression picks out exactly ``intended`` under every
    binding that picks anything, and number agreement holds."""
    colors = {b.color.name for b in scene.blocks} | {"red", "orange", "yellow", "green", "blue", "purple", "white"}
    slots = parse_surface(surface, colors)
    want = frozenset(str(i) for i in intended)
    parts = denote_per_binding(slots, scene, cam)
    union = frozenset().union(*parts) if parts else frozenset()
    if not want or union != want or any(p and p != want for p in parts):
        return False
    if slots["form"] == "color-plural":
        return slots["plural"] == (len(want) > 1)
    return slots["form"] == "color-shape" or len(want) == 1


# --------------------------------------------------------------------------
# matching


def brute_force_matches(ious: np.ndarray, threshold: float) -> int:
    """Largest one-to-one matching at IoU >= threshold, by trying every assignment."""
    n, m = ious.shape
    if n == 0 or m == 0:
        return 0
    best = 0
    if n <= m:
        for cols in permutations(range(m), n):
            best = max(best, sum(ious[i, j] >= threshold for i, j in enumerate(cols)))
    else:
        for rows in permutations(range(n), m):
            best = max(best, sum(ious[i, j] >= threshold for j, i in enumerate(rows)))
    return best


def box_iou(a, b) -> float:
    """IoU of [x, y, w, h] boxes with integer corners, by counting unit cells."""
    ax0, ay0, ax1, ay1 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx0, by0, bx1, by1 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    inter = max(0, min(ax1, bx1) - max(ax0, bx0)) * max(0, min(ay1, by1) - max(ay0, by0))
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)
