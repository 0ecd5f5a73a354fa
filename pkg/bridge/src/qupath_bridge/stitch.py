"""Cross-tile instance stitching.

The engine emits one polygon per instance per tile, with vertices on the
pixel lattice.  An instance cut by a tile seam appears as two polygons
that both run along the seam.  Pieces are merged when they share at
least one unit of seam boundary: the shared edges are traversed in
opposite directions by the two rings, so cancelling opposite directed
unit edges and re-walking the remainder yields the boundary of the
union.  Orientation is preserved, so outer rings keep a positive
screen-frame signed area and any enclosed holes come out negative.
"""

from dataclasses import dataclass

from .errors import StitchError

Vertex = tuple[int, int]
Edge = tuple[Vertex, Vertex]


@dataclass
class Piece:
    """One tile-local instance polygon, already in global coordinates."""

    order: int                  # deterministic sequence over tiles
    tile: tuple[int, int]
    ring: list[Vertex]          # closed, axis-aligned, lattice vertices
    class_id: int
    class_name: str
    area: int


@dataclass
class Stitched:
    """A detection after merging: outer ring first, then any holes."""

    rings: list[list[Vertex]]
    class_id: int
    class_name: str
    area: int
    piece_orders: list[int]


def unit_edges(ring: list[Vertex]) -> list[Edge]:
    """Decompose a closed axis-aligned ring into directed unit steps."""
    if len(ring) < 2 or ring[0] != ring[-1]:
        raise StitchError("polygon ring is not closed")
    edges: list[Edge] = []
    for (x1, y1), (x2, y2) in zip(ring, ring[1:]):
        dx = (x2 > x1) - (x2 < x1)
        dy = (y2 > y1) - (y2 < y1)
        if (dx != 0) == (dy != 0):
            raise StitchError(f"ring edge ({x1},{y1})-({x2},{y2}) "
                              "is not axis-aligned")
        x, y = x1, y1
        while (x, y) != (x2, y2):
            edges.append(((x, y), (x + dx, y + dy)))
            x, y = x + dx, y + dy
    return edges


def signed_area(ring: list[Vertex]) -> float:
    """Shoelace area, positive for the engine's outer-ring orientation."""
    total = 0
    for (x1, y1), (x2, y2) in zip(ring, ring[1:]):
        total += x1 * y2 - x2 * y1
    return total / 2.0


def _right(d: Vertex) -> Vertex:
    return (-d[1], d[0])


def _left(d: Vertex) -> Vertex:
    return (d[1], -d[0])


def _walk_loops(edges: list[Edge]) -> list[list[Vertex]]:
    """Stitch directed unit edges into closed loops.

    At a vertex with several outgoing edges the rightmost turn (screen
    frame, y down) is preferred, which keeps loops simple at pinch
    points and is deterministic.
    """
    remaining: dict[Edge, int] = {}
    for e in edges:
        remaining[e] = remaining.get(e, 0) + 1

    def take(e: Edge) -> None:
        remaining[e] -= 1
        if remaining[e] == 0:
            del remaining[e]

    loops: list[list[Vertex]] = []
    while remaining:
        start, cur = min(remaining)
        take((start, cur))
        loop = [start, cur]
        d = (cur[0] - start[0], cur[1] - start[1])
        while cur != start:
            for nd in (_right(d), d, _left(d), (-d[0], -d[1])):
                nxt = (cur[0] + nd[0], cur[1] + nd[1])
                if remaining.get((cur, nxt)):
                    take((cur, nxt))
                    loop.append(nxt)
                    cur, d = nxt, nd
                    break
            else:
                raise StitchError(f"boundary walk stuck at {cur}")
        loops.append(loop)
    return loops


def _merge_group(pieces: list[Piece]) -> Stitched:
    counts: dict[Edge, int] = {}
    for piece in pieces:
        for e in unit_edges(piece.ring):
            rev = (e[1], e[0])
            if counts.get(rev):
                counts[rev] -= 1
                if counts[rev] == 0:
                    del counts[rev]
            else:
                counts[e] = counts.get(e, 0) + 1

    flat = [e for e, n in counts.items() for _ in range(n)]
    loops = _walk_loops(flat)
    outers = [lp for lp in loops if signed_area(lp) > 0]
    holes = [lp for lp in loops if signed_area(lp) < 0]
    if len(outers) != 1:
        raise StitchError(f"merged group produced {len(outers)} outer rings")

    area = sum(p.area for p in pieces)
    covered = signed_area(outers[0]) + sum(signed_area(h) for h in holes)
    if covered != area:
        raise StitchError(f"merged boundary encloses {covered} px, "
                          f"pieces total {area}")
    lead = min(pieces, key=lambda p: (-p.area, p.class_id, p.order))
    return Stitched(rings=outers + holes, class_id=lead.class_id,
                    class_name=lead.class_name, area=area,
                    piece_orders=sorted(p.order for p in pieces))


def stitch(pieces: list[Piece], border_xs: set[int],
           border_ys: set[int]) -> list[Stitched]:
    """Merge pieces that share >= 1 px of tile-seam boundary.

    Pieces from different tiles whose rings both cover the same unit
    segment of a seam line belong to one instance.  Groups are found by
    union-find and merged geometrically; singleton pieces pass through
    with their original ring.
    """
    parent = list(range(len(pieces)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    seam: dict[tuple[Vertex, Vertex], list[int]] = {}
    for idx, piece in enumerate(pieces):
        for a, b in unit_edges(piece.ring):
            on_seam = (a[0] == b[0] and a[0] in border_xs) or \
                      (a[1] == b[1] and a[1] in border_ys)
            if not on_seam:
                continue
            key = (min(a, b), max(a, b))
            for other in seam.setdefault(key, []):
                if pieces[other].tile != piece.tile:
                    union(other, idx)
            seam[key].append(idx)

    groups: dict[int, list[Piece]] = {}
    for idx, piece in enumerate(pieces):
        groups.setdefault(find(idx), []).append(piece)

    out: list[Stitched] = []
    for root in sorted(groups, key=lambda r: min(p.order
                                                 for p in groups[r])):
        members = sorted(groups[root], key=lambda p: p.order)
        if len(members) == 1:
            p = members[0]
            out.append(Stitched(rings=[list(p.ring)], class_id=p.class_id,
                                class_name=p.class_name, area=p.area,
                                piece_orders=[p.order]))
        else:
            out.append(_merge_group(members))
    return out
