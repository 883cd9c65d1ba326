"""Analytic binary shapes in image coordinates, sampleable at continuous points.

Points are (row, col) = (y, x). Pixel (i, j) covers [i, i + 1) x [j, j + 1)
and is rasterized by testing its center.
"""

from dataclasses import dataclass

import numpy as np
import shapely

from spsmask.errors import InputError


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float = 0.0

    def contains(self, ys, xs):
        dy = np.asarray(ys, float) - self.cy
        dx = np.asarray(xs, float) - self.cx
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0

    def to_dict(self):
        return {"type": "ellipse", "cy": self.cy, "cx": self.cx, "ry": self.ry,
                "rx": self.rx, "angle": self.angle}


@dataclass(frozen=True)
class Polygon:
    vertices: tuple  # ((y, x), ...)

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise InputError("polygon needs at least 3 vertices")
        object.__setattr__(self, "vertices", tuple((float(y), float(x)) for y, x in self.vertices))

    def contains(self, ys, xs):
        poly = shapely.Polygon([(x, y) for y, x in self.vertices])
        ys, xs = np.broadcast_arrays(np.asarray(ys, float), np.asarray(xs, float))
        return shapely.contains_xy(poly, xs, ys)

    def to_dict(self):
        return {"type": "polygon", "vertices": [list(v) for v in self.vertices]}


@dataclass(frozen=True)
class HalfPlane:
    """Points with ``col < boundary`` (or ``>=`` when ``flip``)."""

    boundary: float
    flip: bool = False

    def contains(self, ys, xs):
        ys, xs = np.broadcast_arrays(np.asarray(ys, float), np.asarray(xs, float))
        inside = xs < self.boundary
        return ~inside if self.flip else inside

    def to_dict(self):
        return {"type": "halfplane", "boundary": self.boundary, "flip": self.flip}


@dataclass(frozen=True)
class Union:
    parts: tuple

    def contains(self, ys, xs):
        out = np.zeros(np.broadcast_shapes(np.shape(ys), np.shape(xs)), dtype=bool)
        for p in self.parts:
            out |= p.contains(ys, xs)
        return out

    def to_dict(self):
        return {"type": "union", "parts": [p.to_dict() for p in self.parts]}


@dataclass(frozen=True)
class RasterMask:
    """Binary image; a point reads the pixel it falls in, outside is background."""

    mask: np.ndarray

    def contains(self, ys, xs):
        m = np.asarray(self.mask, bool)
        r = np.floor(np.asarray(ys, float)).astype(np.int64)
        c = np.floor(np.asarray(xs, float)).astype(np.int64)
        ok = (r >= 0) & (r < m.shape[0]) & (c >= 0) & (c < m.shape[1])
        return ok & m[np.where(ok, r, 0), np.where(ok, c, 0)]


def shape_from_dict(d):
    kind = d.get("type")
    if kind == "ellipse":
        return Ellipse(d["cy"], d["cx"], d["ry"], d["rx"], d.get("angle", 0.0))
    if kind == "polygon":
        return Polygon(tuple(tuple(v) for v in d["vertices"]))
    if kind == "halfplane":
        return HalfPlane(d["boundary"], d.get("flip", False))
    if kind == "union":
        return Union(tuple(shape_from_dict(p) for p in d["parts"]))
    raise InputError(f"unknown shape type {kind!r}")


def rasterize(shape, image_size):
    h, w = image_size
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return shape.contains(ys, xs)


def tight_box(mask):
    """(x1, y1, x2, y2) pixel-edge box around a non-empty binary mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise InputError("cannot box an empty mask")
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def random_ellipse(rng, image_size, min_frac=0.15, max_frac=0.4):
    h, w = image_size
    ry = rng.uniform(min_frac, max_frac) * h / 2
    rx = rng.uniform(min_frac, max_frac) * w / 2
    r = max(ry, rx)
    cy = rng.uniform(r + 1, h - r - 1)
    cx = rng.uniform(r + 1, w - r - 1)
    return Ellipse(float(cy), float(cx), float(ry), float(rx), float(rng.uniform(0, np.pi)))


def random_polygon(rng, image_size, n_vertices=7, min_frac=0.15, max_frac=0.4):
    """Star-shaped polygon with radii jittered around a random size."""
    h, w = image_size
    radius = rng.uniform(min_frac, max_frac) * min(h, w) / 2
    cy = rng.uniform(radius + 1, h - radius - 1)
    cx = rng.uniform(radius + 1, w - radius - 1)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = radius * rng.uniform(0.5, 1.0, n_vertices)
    verts = tuple((float(cy + r * np.sin(a)), float(cx + r * np.cos(a))) for a, r in zip(angles, radii))
    return Polygon(verts)


def random_blob(rng, image_size, n_parts=3):
    """Union of a few overlapping ellipses around a common center."""
    h, w = image_size
    cy, cx = rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w
    parts = []
    for _ in range(n_parts):
        parts.append(Ellipse(
            float(cy + rng.uniform(-0.1, 0.1) * h), float(cx + rng.uniform(-0.1, 0.1) * w),
            float(rng.uniform(0.08, 0.25) * h), float(rng.uniform(0.08, 0.25) * w),
            float(rng.uniform(0, np.pi)),
        ))
    return Union(tuple(parts))
