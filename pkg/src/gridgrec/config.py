"""Key-value run configuration.

The file holds one ``key = value`` pair per line; ``#`` starts a comment.
Values are read as int, float, boolean (true/false/yes/no) or, failing
those, string. Comma-separated values become lists where a key expects one.

Recognised keys and defaults::

    scene.min_blocks = 12          scene.max_blocks = 48
    scene.min_structures = 3       scene.max_structures = 7
    scene.height = 9               scene.require_support = false
    scene.archetypes = column, row, bar, arch, L-shape, scatter
    camera.count = 4               camera.radius = 13.0
    camera.elevation = 8.0         camera.width = 640
    camera.height = 480
    template.per_view = 0          (0: even share of --n over views)
    prompted.backend = rule        (rule | adversarial | remote)
    prompted.margin = 0.35
    recover.noise = 0.0

Backend endpoints and credentials are never read from this file; they come
from the GREC_BACKEND_URL and GREC_BACKEND_TOKEN environment variables.
"""
from __future__ import annotations

import configparser
from pathlib import Path

DEFAULTS = {
    "scene.min_blocks": 12,
    "scene.max_blocks": 48,
    "scene.min_structures": 3,
    "scene.max_structures": 7,
    "scene.height": 9,
    "scene.require_support": False,
    "scene.archetypes": ["column", "row", "bar", "arch", "L-shape", "scatter"],
    "camera.count": 4,
    "camera.radius": 13.0,
    "camera.elevation": 8.0,
    "camera.width": 640,
    "camera.height": 480,
    "template.per_view": 0,
    "prompted.backend": "rule",
    "prompted.margin": 0.35,
    "recover.noise": 0.0,
}
_LIST_KEYS = {"scene.archetypes"}
_FORBIDDEN = ("url", "token", "secret", "password", "endpoint")


def _coerce(raw: str):
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for kind in (int, float):
        try:
            return kind(raw)
        except ValueError:
            pass
    return raw


def parse_config(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string("[run]\n" + text)
    out = dict(DEFAULTS)
    for key, raw in cp["run"].items():
        if key not in DEFAULTS:
            if any(w in key.lower() for w in _FORBIDDEN):
                raise ValueError(f"{key}: backend settings belong in environment variables")
            raise ValueError(f"unknown config key {key!r}")
        if key in _LIST_KEYS:
            out[key] = [v.strip() for v in raw.split(",") if v.strip()]
        else:
            val = _coerce(raw.strip())
            want = type(DEFAULTS[key])
            if want is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if not isinstance(val, want):
                raise ValueError(f"{key}: expected {want.__name__}, got {raw!r}")
            out[key] = val
    return out


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return dict(DEFAULTS)
    return parse_config(Path(path).read_text(encoding="utf-8"))
