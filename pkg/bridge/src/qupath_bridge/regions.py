"""Region annotations: GeoJSON parsing, validation, and tile layout.

Annotations arrive as a GeoJSON ``FeatureCollection`` of polygons in
image pixel coordinates (``[x, y]`` pairs, x = column).  Only the
exterior ring of each polygon is used; the region of interest for
processing is its axis-aligned bounding box.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AnnotationError

Point = tuple[float, float]


def _orient(a: Point, b: Point, c: Point) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a: Point, b: Point, p: Point) -> bool:
    return (min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= p[1] <= max(a[1], b[1]))


def _segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool:
    """True if segment ab intersects cd anywhere (endpoints included)."""
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    if (o1 > 0) != (o2 > 0) and (o3 > 0) != (o4 > 0) \
            and o1 != 0 and o2 != 0 and o3 != 0 and o4 != 0:
        return True
    for (p, q, r) in ((a, b, c), (a, b, d), (c, d, a), (c, d, b)):
        if _orient(p, q, r) == 0 and _on_segment(p, q, r):
            return True
    return False


@dataclass
class RegionAnnotation:
    """One outlined region: closed exterior ring in pixel coordinates."""

    region_id: str
    ring: list[Point]
    name: str | None = None

    def __post_init__(self) -> None:
        ring = [(float(x), float(y)) for x, y in self.ring]
        if len(ring) < 4:
            raise AnnotationError(
                f"region {self.region_id!r}: ring has {len(ring)} points, "
                "need at least 4")
        if ring[0] != ring[-1]:
            raise AnnotationError(
                f"region {self.region_id!r}: ring is not closed")
        self.ring = ring
        n = len(ring) - 1  # distinct vertices
        for i in range(n):
            a, b = ring[i], ring[i + 1]
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or (i + 1) % n == j:
                    continue  # adjacent segments share an endpoint
                c, d = ring[j], ring[j + 1]
                if _segments_cross(a, b, c, d):
                    raise AnnotationError(
                        f"region {self.region_id!r}: ring self-intersects "
                        f"between segments {i} and {j}")

    def bbox(self) -> tuple[int, int, int, int]:
        """Integer-aligned bounding box (x0, y0, x1, y1), end-exclusive."""
        import math
        xs = [p[0] for p in self.ring]
        ys = [p[1] for p in self.ring]
        x0, y0 = math.floor(min(xs)), math.floor(min(ys))
        x1, y1 = math.ceil(max(xs)), math.ceil(max(ys))
        if x1 <= x0 or y1 <= y0:
            raise AnnotationError(
                f"region {self.region_id!r}: degenerate bounding box")
        return x0, y0, x1, y1


def read_annotations(path: str | Path) -> list[RegionAnnotation]:
    """Parse a GeoJSON FeatureCollection of region polygons."""
    path = Path(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"{path}: not valid JSON: {exc}") from None
    if doc.get("type") != "FeatureCollection":
        raise AnnotationError(f"{path}: expected a FeatureCollection")
    regions: list[RegionAnnotation] = []
    seen: set[str] = set()
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise AnnotationError(
                f"{path}: feature {i} geometry is "
                f"{geom.get('type')!r}, expected Polygon")
        coords = geom.get("coordinates") or []
        if not coords:
            raise AnnotationError(f"{path}: feature {i} has no rings")
        props = feat.get("properties") or {}
        region_id = str(props.get("region_id")
                        or props.get("id")
                        or feat.get("id")
                        or f"region-{i}")
        if region_id in seen:
            raise AnnotationError(f"{path}: duplicate region id "
                                  f"{region_id!r}")
        seen.add(region_id)
        regions.append(RegionAnnotation(
            region_id=region_id,
            ring=[(p[0], p[1]) for p in coords[0]],
            name=props.get("name"),
        ))
    return regions


@dataclass(frozen=True)
class TileSpec:
    """One 256x256 window of a region, in row-major grid order."""

    index: tuple[int, int]    # (row, col) in the tile grid
    origin: tuple[int, int]   # global (x, y) of the top-left corner


@dataclass
class TileLayout:
    """Tile grid covering a region's bounding box."""

    bbox: tuple[int, int, int, int]
    tile_size: int
    tiles: list[TileSpec] = field(init=False)

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.bbox
        ts = self.tile_size
        self.n_rows = -((y0 - y1) // ts)
        self.n_cols = -((x0 - x1) // ts)
        self.tiles = [
            TileSpec((ty, tx), (x0 + tx * ts, y0 + ty * ts))
            for ty in range(self.n_rows) for tx in range(self.n_cols)
        ]

    def border_xs(self) -> set[int]:
        """Global x of the vertical seams between tile columns."""
        x0 = self.bbox[0]
        return {x0 + k * self.tile_size for k in range(1, self.n_cols)}

    def border_ys(self) -> set[int]:
        y0 = self.bbox[1]
        return {y0 + k * self.tile_size for k in range(1, self.n_rows)}
