"""Tissue-vs-background segmentation on slide thumbnails.

The default pipeline is saturation -> box blur -> Otsu (or fixed) threshold ->
close/open -> small-component and small-hole cleanup. Masks convert to
pixel-boundary polygons in level-0 coordinates, which round-trip through
GeoJSON so an externally edited outline can replace the pipeline mask.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    DegenerateHistogramError,
    EmptyMaskError,
    EmptyTissueError,
    MalformedGeoJsonError,
    UnsupportedGeometryError,
    ValidationError,
)
from .slide_io import SlidePyramid, build_thumbnail, thumbnail_geometry

EIGHT = np.ones((3, 3), dtype=bool)
FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SegParams:
    thumb_max_dim: int = 1024
    blur_radius: int = 2
    use_otsu: bool = True
    fixed_threshold: int = 20
    close_radius: int = 2
    open_radius: int = 1
    min_region_area: float = 1e-4
    min_hole_area: float = 1e-4

    def __post_init__(self):
        if min(self.blur_radius, self.close_radius, self.open_radius) < 0:
            raise ValidationError("radii must be >= 0")
        for name in ("min_region_area", "min_hole_area"):
            if not 0 <= getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in [0, 1)")
        if not 0 <= self.fixed_threshold <= 255:
            raise ValidationError("fixed_threshold must lie in [0, 255]")


@dataclass
class TissueMask:
    mask: np.ndarray  # bool, thumbnail grid
    scale: float  # level-0 pixels per mask pixel
    source: str = "otsu_pipeline"  # or "external"
    slide_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def save(self, path: str | os.PathLike) -> None:
        """PNG snapshot (0/255) plus ``<stem>.json`` sidecar with scale and slide id."""
        path = Path(path)
        Image.fromarray(self.mask.astype(np.uint8) * 255).save(path)
        path.with_suffix(".json").write_text(
            json.dumps({"scale": self.scale, "slide_id": self.slide_id, "source": self.source})
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> TissueMask:
        path = Path(path)
        with Image.open(path) as im:
            mask = np.asarray(im.convert("L")) > 127
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(mask, float(meta["scale"]), meta.get("source", "external"), meta.get("slide_id", ""))


@dataclass
class TissuePolygons:
    """Polygons in level-0 pixel units.

    Each polygon is a list of closed rings (first vertex repeated last): the
    outer ring first, then holes. Outer rings are counter-clockwise in the
    stored (x, y) frame (positive shoelace area) and holes clockwise, as
    GeoJSON expects. With y pointing down the outer ring looks clockwise on
    screen.
    """

    polygons: list[list[np.ndarray]]
    slide_id: str = ""

    def __len__(self):
        return len(self.polygons)


# --------------------------------------------------------------------------
# pixel transforms


def saturation_channel(img: np.ndarray) -> np.ndarray:
    """HSV-style saturation in 0..255; white and gray map to 0."""
    img = np.asarray(img)
    mx = img.max(axis=2).astype(np.int64)
    mn = img.min(axis=2).astype(np.int64)
    out = np.zeros(mx.shape, dtype=np.int64)
    nz = mx > 0
    # round(255 * (mx - mn) / mx) with half-up, in integers
    out[nz] = (2 * 255 * (mx[nz] - mn[nz]) + mx[nz]) // (2 * mx[nz])
    return out.astype(np.uint8)


def box_blur(gray: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return gray.copy()
    blurred = ndimage.uniform_filter(gray.astype(np.float64), size=2 * radius + 1, mode="nearest")
    return np.clip(np.floor(blurred + 0.5), 0, 255).astype(np.uint8)


def otsu_threshold(hist) -> int:
    """Smallest ``t`` maximising between-class variance for classes
    ``[0..t]`` and ``[t+1..255]``.

    Scores are compared exactly in integer arithmetic:
    ``var_between * N**2 = (N*S0 - n0*S)**2 / (n0*n1)``.
    """
    counts = [int(c) for c in np.asarray(hist).ravel()]
    if len(counts) != 256:
        raise ValidationError(f"histogram must have 256 bins, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ValidationError("histogram counts must be non-negative")
    if sum(1 for c in counts if c) < 2:
        raise DegenerateHistogramError("histogram needs at least two populated bins")

    total = sum(counts)
    total_sum = sum(i * c for i, c in enumerate(counts))
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (total * s0 - n0 * total_sum) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def close_open(mask: np.ndarray, close_radius: int, open_radius: int) -> np.ndarray:
    """Morphological close then open with disk elements; outside the image is background."""
    out = mask.astype(bool)
    if close_radius > 0:
        pad = close_radius
        p = np.pad(out, pad)
        p = ndimage.binary_dilation(p, _disk(close_radius))
        p = ndimage.binary_erosion(p, _disk(close_radius), border_value=1)
        out = p[pad:-pad, pad:-pad] | out
    if open_radius > 0:
        out = ndimage.binary_erosion(out, _disk(open_radius), border_value=0)
        out = ndimage.binary_dilation(out, _disk(open_radius))
    return out


def remove_small_regions(mask: np.ndarray, min_pixels: float) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_pixels
    keep[0] = False
    return keep[labels]


def fill_small_holes(mask: np.ndarray, min_pixels: float) -> np.ndarray:
    """Fill background components (4-connected) that do not touch the border
    and are smaller than ``min_pixels``."""
    labels, n = ndimage.label(~mask, structure=FOUR)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    border = np.unique(
        np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    )
    fill = sizes < min_pixels
    fill[0] = False
    fill[border] = False
    return mask | fill[labels]


def segment_array(thumb: np.ndarray, params: SegParams = SegParams()) -> np.ndarray:
    """Run the classical pipeline on an RGB thumbnail and return a bool mask."""
    gray = box_blur(saturation_channel(thumb), params.blur_radius)
    if params.use_otsu:
        try:
            t = otsu_threshold(np.bincount(gray.ravel(), minlength=256))
        except DegenerateHistogramError:
            t = params.fixed_threshold
    else:
        t = params.fixed_threshold
    mask = gray > t
    mask = close_open(mask, params.close_radius, params.open_radius)
    area = mask.size
    mask = remove_small_regions(mask, params.min_region_area * area)
    return fill_small_holes(mask, params.min_hole_area * area)


def segment_tissue(slide: SlidePyramid, params: SegParams = SegParams()) -> TissueMask:
    thumb, scale = build_thumbnail(slide, params.thumb_max_dim)
    mask = segment_array(thumb, params)
    if not mask.any():
        raise EmptyTissueError(f"{slide.slide_id}: no tissue found")
    return TissueMask(mask, scale, "otsu_pipeline", slide.slide_id)


# --------------------------------------------------------------------------
# contours


def _trace_rings(blob: np.ndarray, connect_diagonals: bool) -> list[np.ndarray]:
    """Trace the pixel-edge boundary of ``blob`` into closed rings with the
    region on the positive-area side.

    At a saddle vertex (two diagonal pixels set) ``connect_diagonals`` decides
    whether the ring joins them (8-connectivity) or keeps them apart.
    """
    p = np.pad(blob, 1)
    fg = p[1:-1, 1:-1]
    rows, cols = np.nonzero(fg)
    edges: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(starts_r, starts_c, dr, dc):
        for r, c in zip(starts_r.tolist(), starts_c.tolist()):
            edges.setdefault((c, r), []).append((dc, dr))

    # (x, y) = (col, row) corners; region kept on the positive side
    top = ~p[:-2, 1:-1][rows, cols]
    add(rows[top], cols[top], 0, 1)
    right = ~p[1:-1, 2:][rows, cols]
    add(rows[right], cols[right] + 1, 1, 0)
    bottom = ~p[2:, 1:-1][rows, cols]
    add(rows[bottom] + 1, cols[bottom] + 1, 0, -1)
    left = ~p[1:-1, :-2][rows, cols]
    add(rows[left] + 1, cols[left], -1, 0)

    want = -1 if connect_diagonals else 1
    rings = []
    while edges:
        start = min(edges)
        vertex = start
        d = edges[vertex].pop(0)
        if not edges[vertex]:
            del edges[vertex]
        pts = [vertex]
        while True:
            vertex = (vertex[0] + d[0], vertex[1] + d[1])
            if vertex == start and start not in edges:
                break
            outs = edges[vertex]
            if len(outs) == 1:
                nd = outs.pop()
            else:
                nd = next(o for o in outs if d[0] * o[1] - d[1] * o[0] == want)
                outs.remove(nd)
            if not outs:
                del edges[vertex]
            if nd != d:
                pts.append(vertex)
            d = nd
        ring = _merge_collinear(np.array(pts, dtype=np.float64))
        rings.append(ring)
    return rings


def _merge_collinear(pts: np.ndarray) -> np.ndarray:
    """Drop vertices lying on a straight segment and close the ring."""
    n = len(pts)
    keep = []
    for i in range(n):
        a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross != 0:
            keep.append(b)
    ring = np.array(keep)
    return np.vstack([ring, ring[:1]])


def ring_area(ring: np.ndarray) -> float:
    """Signed shoelace area of a closed ring."""
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def mask_to_polygons(mask: TissueMask) -> TissuePolygons:
    """Outline each 8-connected foreground component with its holes.

    Holes are the 4-connected background pockets of the component; islands
    inside holes become polygons of their own.
    """
    m = mask.mask.astype(bool)
    if not m.any():
        raise EmptyMaskError("mask has no foreground")
    labels, n = ndimage.label(m, structure=EIGHT)
    polygons = []
    for sl_idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        r0, c0 = sl[0].start, sl[1].start
        comp = labels[sl] == sl_idx
        filled = ndimage.binary_fill_holes(comp, structure=FOUR)
        (outer,) = _trace_rings(filled, connect_diagonals=True)
        rings = [outer]
        holes, n_holes = ndimage.label(filled & ~comp, structure=FOUR)
        for h in range(1, n_holes + 1):
            # the pocket itself is 4-connected; diagonal pinches stay apart
            rings.extend(ring[::-1] for ring in _trace_rings(holes == h, connect_diagonals=False))
        offset = np.array([c0, r0], dtype=np.float64)
        polygons.append([(ring + offset) * mask.scale for ring in rings])
    return TissuePolygons(polygons, mask.slide_id)


def rasterize_polygons(polys: TissuePolygons, shape: tuple[int, int], scale: float) -> np.ndarray:
    """Pixel-centre rasterisation; each polygon is even-odd over its rings and
    polygons are unioned."""
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    centers = np.arange(w) + 0.5
    for rings in polys.polygons:
        segs = []
        for ring in rings:
            r = np.asarray(ring, dtype=np.float64) / scale
            if len(r) and not np.array_equal(r[0], r[-1]):
                r = np.vstack([r, r[:1]])
            segs.append(np.hstack([r[:-1], r[1:]]))
        seg = np.vstack(segs)
        x0, y0, x1, y1 = seg.T
        moving = y0 != y1
        x0, y0, x1, y1 = x0[moving], y0[moving], x1[moving], y1[moving]
        ylo = int(max(0, np.floor(min(y0.min(), y1.min()))))
        yhi = int(min(h, np.ceil(max(y0.max(), y1.max()))))
        poly = np.zeros((h, w), dtype=bool)
        for row in range(ylo, yhi):
            yc = row + 0.5
            hit = (y0 <= yc) != (y1 <= yc)
            if not hit.any():
                continue
            xs = np.sort(x0[hit] + (yc - y0[hit]) * (x1[hit] - x0[hit]) / (y1[hit] - y0[hit]))
            inside = (np.searchsorted(xs, centers, side="right") % 2) == 1
            poly[row] = inside
        out |= poly
    return out


# --------------------------------------------------------------------------
# GeoJSON


def export_geojson(polys: TissuePolygons, path: str | os.PathLike) -> None:
    if not len(polys):
        raise EmptyMaskError("nothing to export")
    features = []
    for rings in polys.polygons:
        features.append(
            {
                "type": "Feature",
                "properties": {"objectType": "annotation", "classification": {"name": "Tissue"}},
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[float(x), float(y)] for x, y in ring] for ring in rings],
                },
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    Path(path).write_text(json.dumps(doc))


def _geometries(doc) -> list[dict]:
    if not isinstance(doc, dict) or "type" not in doc:
        raise MalformedGeoJsonError("expected a GeoJSON object")
    kind = doc["type"]
    if kind == "FeatureCollection":
        feats = doc.get("features")
        if not isinstance(feats, list):
            raise MalformedGeoJsonError("FeatureCollection without a features list")
        return [g for f in feats for g in _geometries(f)]
    if kind == "Feature":
        geom = doc.get("geometry")
        return [] if geom is None else _geometries(geom)
    if kind == "GeometryCollection":
        return [g for sub in doc.get("geometries", []) for g in _geometries(sub)]
    return [doc]


def read_geojson(path: str | os.PathLike) -> TissuePolygons:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedGeoJsonError(f"{path}: {exc}") from exc
    polygons = []
    for geom in _geometries(doc):
        kind, coords = geom.get("type"), geom.get("coordinates")
        if kind == "Polygon":
            parts = [coords]
        elif kind == "MultiPolygon":
            parts = coords
        elif kind in ("Point", "MultiPoint", "LineString", "MultiLineString"):
            raise UnsupportedGeometryError(f"{kind} geometries cannot describe tissue")
        else:
            raise MalformedGeoJsonError(f"unknown geometry type {kind!r}")
        try:
            for part in parts:
                rings = [np.asarray(ring, dtype=np.float64).reshape(-1, 2) for ring in part]
                if not rings or any(len(r) < 3 for r in rings):
                    raise MalformedGeoJsonError("polygon ring with fewer than 3 vertices")
                polygons.append(rings)
        except (TypeError, ValueError) as exc:
            raise MalformedGeoJsonError(f"bad coordinates: {exc}") from exc
    if not polygons:
        raise MalformedGeoJsonError(f"{path}: no polygons")
    return TissuePolygons(polygons)


def import_geojson(
    path: str | os.PathLike,
    slide: SlidePyramid | None = None,
    *,
    shape: tuple[int, int] | None = None,
    scale: float | None = None,
    thumb_max_dim: int = 1024,
) -> TissueMask:
    """Rasterise a GeoJSON outline onto the slide's thumbnail grid.

    Pass either ``slide`` (grid derived as in :func:`build_thumbnail`) or an
    explicit ``shape`` and ``scale``.
    """
    polys = read_geojson(path)
    slide_id = ""
    if slide is not None:
        _, tw, th, scale = thumbnail_geometry(slide, thumb_max_dim)
        shape = (th, tw)
        slide_id = slide.slide_id
    if shape is None or scale is None:
        raise ValidationError("import_geojson needs a slide or shape+scale")
    return TissueMask(rasterize_polygons(polys, shape, scale), float(scale), "external", slide_id)


# --------------------------------------------------------------------------
# coverage queries


def _overlap_weights(starts: np.ndarray, extent: float, n: int) -> np.ndarray:
    """Overlap length of [s, s+extent) with each unit cell [j, j+1), j < n."""
    lo = np.asarray(starts, dtype=np.float64)[:, None]
    j = np.arange(n)[None, :]
    return np.clip(np.minimum(lo + extent, j + 1) - np.maximum(lo, j), 0.0, None)


def tissue_fraction_grid(
    mask: TissueMask, xs, ys, extent_x: float, extent_y: float | None = None
) -> np.ndarray:
    """Foreground fraction of every ``extent``-sized level-0 rectangle anchored at
    ``(xs[j], ys[i])``; returns an ``(len(ys), len(xs))`` array."""
    extent_y = extent_x if extent_y is None else extent_y
    h, w = mask.mask.shape
    s = mask.scale
    wx = _overlap_weights(np.asarray(xs) / s, extent_x / s, w)
    wy = _overlap_weights(np.asarray(ys) / s, extent_y / s, h)
    covered = wy @ mask.mask.astype(np.float64) @ wx.T
    return covered / ((extent_x / s) * (extent_y / s))


def tissue_fraction(mask: TissueMask, rect: tuple[float, float, float, float]) -> float:
    """Fraction of the level-0 rectangle ``(x, y, w, h)`` covered by foreground,
    weighting partially covered mask pixels by overlap area."""
    x, y, w, h = rect
    if w <= 0 or h <= 0:
        raise ValidationError("rectangle must have positive area")
    return float(tissue_fraction_grid(mask, [x], [y], w, h)[0, 0])
