"""Software rasterizer for block scenes, ID glyph stamping and bounding boxes.

Every pixel center casts an exact ray against the exposed, camera-facing faces
of each block; the nearest hit wins (strict z-test, deterministic draw order).
No anti-aliasing and no external fonts, so re-rendering a block reproduces its
pixels bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import OutOfFrustum
from .font import text_bitmap
from .scene import FOOTPRINT, Block, BlockId, GridCoord, Scene

MIN_VISIBLE_PIXELS = 8
NEAR_PLANE = 0.05
BACKGROUND = (172, 196, 224)
INK = (16, 16, 16)

# (normal, origin offset, u axis, v axis); v runs "down" the face for glyph rows
_FACES = (
    ((1, 0, 0), (1, 1, 1), (0, 0, -1), (0, -1, 0)),
    ((-1, 0, 0), (0, 1, 0), (0, 0, 1), (0, -1, 0)),
    ((0, 1, 0), (0, 1, 0), (1, 0, 0), (0, 0, 1)),
    ((0, -1, 0), (0, 0, 1), (1, 0, 0), (0, 0, -1)),
    ((0, 0, 1), (0, 1, 1), (1, 0, 0), (0, -1, 0)),
    ((0, 0, -1), (1, 1, 0), (-1, 0, 0), (0, -1, 0)),
)
# face brightness out of 256: +x -x +y -y +z -z
_SHADE = np.array([205, 205, 256, 128, 166, 166], dtype=np.int64)


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float]
    yaw: float
    pitch: float
    fov: float = math.radians(60.0)
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(p) for p in self.position))
        if not 0.0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.image_width < 64 or self.image_height < 64:
            raise ValueError("image dimensions must be at least 64 px")

    @classmethod
    def look_at(cls, position, target, **kwargs) -> "CameraPose":
        d = np.asarray(target, float) - np.asarray(position, float)
        yaw = math.atan2(d[0], d[2])
        pitch = math.atan2(d[1], math.hypot(d[0], d[2]))
        return cls(tuple(position), yaw, pitch, **kwargs)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cp = math.cos(self.pitch)
        forward = np.array([cp * math.sin(self.yaw), math.sin(self.pitch), cp * math.cos(self.yaw)])
        right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return forward, right, up

    @property
    def focal_px(self) -> float:
        return (self.image_height / 2.0) / math.tan(self.fov / 2.0)

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates ``(u, v)`` and view depth for world points of shape (N, 3)."""
        f, r, up = self.basis()
        d = np.atleast_2d(np.asarray(points, float)) - np.asarray(self.position)
        depth = d @ f
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.image_width / 2.0 + self.focal_px * (d @ r) / depth
            v = self.image_height / 2.0 - self.focal_px * (d @ up) / depth
        return u, v, depth

    def to_dict(self) -> dict:
        return {"position": list(self.position), "yaw": self.yaw, "pitch": self.pitch,
                "fov": self.fov, "image_width": self.image_width,
                "image_height": self.image_height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(tuple(d["position"]), d["yaw"], d["pitch"], d["fov"],
                   int(d["image_width"]), int(d["image_height"]))


GRID_CENTER = (FOOTPRINT / 2.0, 1.5, FOOTPRINT / 2.0)


def default_camera(width: int = 640, height: int = 480) -> CameraPose:
    """Builder-style vantage: outside the grid on the -z side, looking slightly down."""
    return CameraPose.look_at((5.5, 8.0, -7.5), (5.5, 1.0, 5.5),
                              image_width=width, image_height=height)


def camera_ring(n: int, radius: float = 13.0, elevation: float = 8.0, width: int = 640,
                height: int = 480, start_angle: float = 0.0) -> list[CameraPose]:
    """``n`` cameras evenly spaced around the grid, all aimed at its center."""
    cams = []
    cx, _, cz = GRID_CENTER
    for k in range(n):
        a = start_angle + 2.0 * math.pi * k / n
        pos = (cx - radius * math.sin(a), elevation, cz - radius * math.cos(a))
        cams.append(CameraPose.look_at(pos, (cx, 1.0, cz), image_width=width, image_height=height))
    return cams


@dataclass(frozen=True)
class PixelBBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("bounding box must have positive extent")

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, xywh) -> "PixelBBox":
        x, y, w, h = xywh
        return cls(x, y, w, h)


@dataclass(frozen=True)
class AnnotationTriplet:
    coord: GridCoord
    bbox: PixelBBox
    id: BlockId


@dataclass(frozen=True)
class RenderOptions:
    draw_ids: bool = True
    background: tuple[int, int, int] = BACKGROUND


@dataclass(eq=False)
class RenderedImage:
    width: int
    height: int
    pixels: np.ndarray
    scene_id: str
    camera: CameraPose
    origin: tuple[int, int] = (0, 0)
    annotations: tuple[AnnotationTriplet, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValueError("pixel buffer must be uint8 of shape (height, width, 3)")

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def crop(self, x0: int, y0: int, x1: int, y1: int) -> "RenderedImage":
        return RenderedImage(x1 - x0, y1 - y0, self.pixels[y0:y1, x0:x1].copy(), self.scene_id,
                             self.camera, (self.origin[0] + x0, self.origin[1] + y0))

    def save_png(self, path) -> None:
        from PIL import Image

        Image.fromarray(self.pixels, "RGB").save(Path(path), format="PNG")

    def png_bytes(self) -> bytes:
        import io

        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(self.pixels, "RGB").save(buf, format="PNG")
        return buf.getvalue()


def load_png(path, scene_id: str, camera: CameraPose) -> RenderedImage:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8).copy()
    return RenderedImage(arr.shape[1], arr.shape[0], arr, scene_id, camera)


# --------------------------------------------------------------------------
# rasterization


@dataclass(frozen=True, eq=False)
class Raster:
    """Per-pixel geometry of one (scene, camera) pair.

    ``block`` holds the index into ``scene.blocks`` (-1 for background); ``face``
    the face index; ``fu``/``fv`` the face-local texture coordinates.
    """

    block: np.ndarray
    face: np.ndarray
    fu: np.ndarray
    fv: np.ndarray
    depth: np.ndarray
    order: np.ndarray
    starts: np.ndarray

    def pixels_of(self, index: int) -> np.ndarray:
        """Flat pixel indices (row-major) owned by block ``index``."""
        return self.order[self.starts[index]:self.starts[index + 1]]

    def count(self, index: int) -> int:
        return int(self.starts[index + 1] - self.starts[index])

    def glyph_face(self, index: int) -> int:
        pix = self.pixels_of(index)
        if pix.size == 0:
            return -1
        return int(np.bincount(self.face.ravel()[pix], minlength=6).argmax())


def _rasterize_face(camera, block_xyz, face_index, basis, zbuf, bbuf, fbuf, ubuf, vbuf, bidx):
    normal, off, a, b = _FACES[face_index]
    origin = np.asarray(block_xyz, float) + off
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    corners = np.stack([origin, origin + a, origin + b, origin + a + b])
    u, v, depth = camera.project(corners)
    if np.any(depth <= NEAR_PLANE):
        return
    W, H = camera.image_width, camera.image_height
    i0 = max(0, int(math.floor(u.min()))); i1 = min(W - 1, int(math.ceil(u.max())))
    j0 = max(0, int(math.floor(v.min()))); j1 = min(H - 1, int(math.ceil(v.max())))
    if i0 > i1 or j0 > j1:
        return
    f, r, up = basis
    F = camera.focal_px
    px = (np.arange(i0, i1 + 1) + 0.5 - W / 2.0) / F
    py = (np.arange(j0, j1 + 1) + 0.5 - H / 2.0) / F
    dirs = (f[None, None, :] + px[None, :, None] * r[None, None, :]
            - py[:, None, None] * up[None, None, :])
    k = int(np.flatnonzero(normal)[0])
    cam = np.asarray(camera.position)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (origin[k] - cam[k]) / dirs[..., k]
    rel = cam[None, None, :] + t[..., None] * dirs - origin
    fu = rel @ a
    fv = rel @ b
    inside = (t > NEAR_PLANE) & (fu >= 0) & (fu <= 1) & (fv >= 0) & (fv <= 1)
    region = (slice(j0, j1 + 1), slice(i0, i1 + 1))
    win = inside & (t < zbuf[region])
    if not win.any():
        return
    zbuf[region][win] = t[win]
    bbuf[region][win] = bidx
    fbuf[region][win] = face_index
    ubuf[region][win] = fu[win]
    vbuf[region][win] = fv[win]


def _rasterize(coords: tuple[GridCoord, ...], camera: CameraPose) -> Raster:
    W, H = camera.image_width, camera.image_height
    zbuf = np.full((H, W), np.inf)
    bbuf = np.full((H, W), -1, dtype=np.int32)
    fbuf = np.full((H, W), -1, dtype=np.int8)
    ubuf = np.zeros((H, W))
    vbuf = np.zeros((H, W))
    basis = camera.basis()
    cam = np.asarray(camera.position)
    occupied = set(coords)
    for bidx, c in enumerate(coords):
        for fi, (normal, *_rest) in enumerate(_FACES):
            if c.offset(*normal) in occupied:
                continue
            center = np.array([c.x + 0.5, c.y + 0.5, c.z + 0.5]) + 0.5 * np.asarray(normal)
            if np.dot(normal, cam - center) <= 0:
                continue
            _rasterize_face(camera, c.as_tuple(), fi, basis, zbuf, bbuf, fbuf, ubuf, vbuf, bidx)
    flat = bbuf.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat[flat >= 0], minlength=len(coords))
    n_bg = int((flat < 0).sum())
    starts = np.concatenate([[n_bg], n_bg + np.cumsum(counts)]).astype(np.int64)
    for arr in (bbuf, fbuf, ubuf, vbuf, zbuf, order, starts):
        arr.setflags(write=False)
    return Raster(bbuf, fbuf, ubuf, vbuf, zbuf, order, starts)


_rasterize_cached = lru_cache(maxsize=32)(_rasterize)


def rasterize(scene: Scene, camera: CameraPose) -> Raster:
    """Geometry pass, cached on block positions (ids and colors do not matter)."""
    return _rasterize_cached(tuple(b.coord for b in scene.blocks), camera)


def shade_pixels(rgb, face: np.ndarray, fu: np.ndarray, fv: np.ndarray,
                 text: str | None) -> np.ndarray:
    """Colors for a set of pixels of one block.

    ``face``/``fu``/``fv`` are per-pixel arrays. When ``text`` is given, the
    glyph bitmap is mapped onto the face (all supplied pixels are assumed to
    lie on the glyph face).
    """
    rgb = np.asarray(rgb, dtype=np.int64)
    out = (rgb[None, :] * _SHADE[face.astype(np.int64)][:, None]) // 256
    if text:
        ink = glyph_ink(text, fu, fv)
        out[ink] = INK
    return out.astype(np.uint8)


def glyph_ink(text: str, fu: np.ndarray, fv: np.ndarray) -> np.ndarray:
    """Boolean mask of the pixels that the glyph for ``text`` inks."""
    cells = glyph_cells(text, fu, fv)
    bitmap = text_bitmap(text)
    ink = np.zeros(fu.shape, dtype=bool)
    ok = cells[0] >= 0
    ink[ok] = bitmap[cells[0][ok], cells[1][ok]]
    return ink


def glyph_cells(text: str, fu: np.ndarray, fv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) texel index per pixel, -1 where the pixel misses the texture."""
    th, tw = text_bitmap(text).shape
    # label stretched over the whole face
    col = np.floor(fu * tw).astype(np.int64)
    row = np.floor(fv * th).astype(np.int64)
    bad = (col < 0) | (col >= tw) | (row < 0) | (row >= th)
    row[bad] = -1
    col[bad] = -1
    return row, col


def block_pixels(raster: Raster, index: int, block: Block, text: str | None):
    """Flat pixel indices and colors of one block, glyph ``text`` stamped if given."""
    pix = raster.pixels_of(index)
    face = raster.face.ravel()[pix]
    fu = raster.fu.ravel()[pix]
    fv = raster.fv.ravel()[pix]
    colors = shade_pixels(block.color.rgb, face, fu, fv, None)
    if text:
        gf = raster.glyph_face(index)
        on = face == gf
        colors[on] = shade_pixels(block.color.rgb, face[on], fu[on], fv[on], text)
    return pix, colors


def render(scene: Scene, camera: CameraPose, options: RenderOptions = RenderOptions()) -> RenderedImage:
    raster = rasterize(scene, camera)
    W, H = camera.image_width, camera.image_height
    img = np.empty((H * W, 3), dtype=np.uint8)
    img[:] = options.background
    for i, block in enumerate(scene.blocks):
        text = str(block.id) if (options.draw_ids and block.id is not None) else None
        pix, colors = block_pixels(raster, i, block, text)
        img[pix] = colors
    return RenderedImage(W, H, img.reshape(H, W, 3), scene.scene_id, camera,
                         annotations=tuple(annotate(scene, camera)) if scene.has_ids else ())


def _bbox_from_pixels(pix: np.ndarray, width: int) -> PixelBBox:
    rows, cols = np.divmod(pix, width)
    x0, x1 = int(cols.min()), int(cols.max())
    y0, y1 = int(rows.min()), int(rows.max())
    return PixelBBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _in_frustum(c: GridCoord, camera: CameraPose) -> bool:
    verts = np.array([[c.x + dx, c.y + dy, c.z + dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
                     float)
    u, v, depth = camera.project(verts)
    front = depth > NEAR_PLANE
    if not front.any():
        return False
    if not front.all():
        return True
    return not (u.max() < 0 or u.min() > camera.image_width or v.max() < 0 or v.min() > camera.image_height)


def project_bbox(block: Block, scene: Scene, camera: CameraPose,
                 min_pixels: int = MIN_VISIBLE_PIXELS) -> PixelBBox | None:
    """Tight box around the block's front-most pixels, or ``None`` when occluded.

    Raises :class:`OutOfFrustum` when the cube projects entirely off-image.
    """
    index = scene.blocks.index(block) if block in scene.blocks else None
    if index is None:
        raise ValueError("block is not part of the scene")
    if not _in_frustum(block.coord, camera):
        raise OutOfFrustum(f"block at {block.coord} projects outside the image")
    raster = rasterize(scene, camera)
    if raster.count(index) < min_pixels:
        return None
    return _bbox_from_pixels(raster.pixels_of(index), camera.image_width)


def visible_indices(scene: Scene, camera: CameraPose, min_pixels: int = MIN_VISIBLE_PIXELS) -> list[int]:
    raster = rasterize(scene, camera)
    return [i for i in range(len(scene.blocks)) if raster.count(i) >= min_pixels]


def annotate(scene: Scene, camera: CameraPose, min_pixels: int = MIN_VISIBLE_PIXELS) -> list[AnnotationTriplet]:
    """One (coord, bbox, id) triplet per visible block, ordered by id."""
    raster = rasterize(scene, camera)
    out = []
    for i in visible_indices(scene, camera, min_pixels):
        b = scene.blocks[i]
        if b.id is None:
            raise ValueError("annotate needs a scene with assigned ids")
        out.append(AnnotationTriplet(b.coord, _bbox_from_pixels(raster.pixels_of(i), camera.image_width), b.id))
    out.sort(key=lambda t: t.id)
    return out


def annotations_to_dict(scene_id: str, camera: CameraPose, triplets: Sequence[AnnotationTriplet]) -> dict:
    return {
        "scene_id": scene_id,
        "camera": camera.to_dict(),
        "annotations": [
            {"id": str(t.id), "coord": list(t.coord.as_tuple()), "bbox": t.bbox.as_list()}
            for t in triplets
        ],
    }


def annotations_from_dict(data: dict) -> list[AnnotationTriplet]:
    return [AnnotationTriplet(GridCoord(*a["coord"]), PixelBBox.from_list(a["bbox"]),
                              BlockId.parse(a["id"])) for a in data["annotations"]]
