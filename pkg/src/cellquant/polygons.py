"""Instance outlines as closed pixel-boundary polygons and GeoJSON export.

Contours follow the 0.5 iso-level of the binary instance mask, i.e. the
lattice lines between foreground and background pixels, so a single
pixel yields the unit square around it and polygon area matches pixel
count for hole-free instances.  Vertices are (x, y) lattice coordinates
with y pointing down; outer rings run clockwise on screen, which makes
their shoelace sum positive in that frame.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ValidationError

# (dy, dx) neighbor offset -> directed edge (start, end) in (x, y) lattice
# coords relative to the pixel's top-left corner; interior stays on the
# consistent side so rings close.
_EDGE_RULES = (
    ((-1, 0), (0, 0), (1, 0)),  # background above -> top edge, left to right
    ((0, 1), (1, 0), (1, 1)),   # background right -> right edge, downward
    ((1, 0), (1, 1), (0, 1)),   # background below -> bottom edge, right to left
    ((0, -1), (0, 1), (0, 0)),  # background left -> left edge, upward
)


def _boundary_edges(mask: np.ndarray) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    padded = np.pad(mask, 1)
    rows, cols = np.nonzero(mask)
    edges = []
    for (dy, dx), start, end in _EDGE_RULES:
        outside = ~padded[rows + 1 + dy, cols + 1 + dx]
        for r, c in zip(rows[outside], cols[outside]):
            edges.append(((int(c) + start[0], int(r) + start[1]),
                          (int(c) + end[0], int(r) + end[1])))
    return edges


def _trace_loops(edges) -> list[list[tuple[int, int]]]:
    outgoing: dict[tuple[int, int], list[int]] = {}
    for i, (a, _) in enumerate(edges):
        outgoing.setdefault(a, []).append(i)
    for lst in outgoing.values():
        lst.sort(key=lambda i: edges[i][1])
    used = [False] * len(edges)
    loops = []
    for start in sorted(range(len(edges)), key=lambda i: edges[i]):
        if used[start]:
            continue
        loop = [edges[start][0]]
        cur = start
        while True:
            used[cur] = True
            a, b = edges[cur]
            loop.append(b)
            if b == loop[0]:
                break
            candidates = [i for i in outgoing.get(b, []) if not used[i]]
            if not candidates:
                raise ValidationError("open contour; instance mask is inconsistent")
            if len(candidates) == 1:
                cur = candidates[0]
            else:
                # ambiguous (checkerboard) corner: take the tightest right
                # turn so touching diagonal regions stay separate loops
                din = (b[0] - a[0], b[1] - a[1])
                def turn(i):
                    e = edges[i]
                    dout = (e[1][0] - e[0][0], e[1][1] - e[0][1])
                    return din[0] * dout[1] - din[1] * dout[0]
                cur = max(candidates, key=turn)
        loops.append(loop)
    return loops


def _shoelace(loop) -> float:
    xs = np.array([p[0] for p in loop], dtype=np.float64)
    ys = np.array([p[1] for p in loop], dtype=np.float64)
    return 0.5 * float(np.sum(xs[:-1] * ys[1:] - xs[1:] * ys[:-1]))


def instance_polygon(mask: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Outer boundary polygon of one binary mask.

    Returns (closed vertex list, enclosed area).  If the mask decomposes
    into several rings (holes, diagonal touches) the ring with the
    largest absolute area is returned.
    """
    if not mask.any():
        raise ValidationError("cannot trace an empty mask")
    loops = _trace_loops(_boundary_edges(mask))
    areas = [_shoelace(lp) for lp in loops]
    best = int(np.argmax(np.abs(areas)))
    return loops[best], abs(areas[best])


def instances_to_polygons(inst: np.ndarray) -> list[tuple[int, list[tuple[int, int]], float]]:
    """One (instance_id, closed polygon, pixel_area) triple per instance."""
    results = []
    n_ids = int(inst.max()) if inst.size else 0
    for inst_id in range(1, n_ids + 1):
        mask = inst == inst_id
        count = int(mask.sum())
        if count == 0:
            continue
        loop, _ = instance_polygon(mask)
        results.append((inst_id, loop, float(count)))
    return results


def polygons_to_geojson(inst: np.ndarray, instance_classes: list[int],
                        class_names: list[str] | None = None,
                        offset: tuple[float, float] = (0.0, 0.0)) -> dict:
    """Build a GeoJSON FeatureCollection of instance outlines.

    ``instance_classes`` uses the 1..C pixel-map convention; class_names
    indexes the vocabulary (name of class c is class_names[c - 1]).
    ``offset`` = (x, y) shift applied to every vertex, for callers that
    place patch-local outlines in a larger frame.
    """
    ox, oy = offset
    features = []
    for inst_id, loop, area in instances_to_polygons(inst):
        class_id = int(instance_classes[inst_id - 1])
        name = (class_names[class_id - 1]
                if class_names and 0 < class_id <= len(class_names)
                else f"class_{class_id}")
        features.append({
            "type": "Feature",
            "geometry": {
                "type": "Polygon",
                "coordinates": [[[x + ox, y + oy] for x, y in loop]],
            },
            "properties": {
                "instance_id": inst_id,
                "class_id": class_id,
                "class_name": name,
                "pixel_area": area,
            },
        })
    return {"type": "FeatureCollection", "features": features}


def write_geojson(collection: dict, destination) -> None:
    with open(destination, "w", encoding="utf-8") as fh:
        json.dump(collection, fh)
        fh.write("\n")
