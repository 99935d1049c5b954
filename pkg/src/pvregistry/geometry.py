"""Polygon math on WGS84 lon/lat coordinates and a bulk-loaded R-tree.

Areas and centroids are computed in a local cylindrical equal-area plane
whose standard parallel passes through the polygon's vertex mean. Exact
predicates (point-in-polygon, intersection) work directly on lon/lat
treated as planar coordinates, which is what the detector output and the
footprint layers share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, Iterable, NamedTuple, Sequence

from .errors import DegenerateGeometry, EmptyIndex, GeometryError

EARTH_RADIUS_M = 6_371_008.8


class Point(NamedTuple):
    lon: float
    lat: float


Ring = tuple[tuple[float, float], ...]
BBox = tuple[float, float, float, float]


def _normalize_ring(coords: Iterable[Sequence[float]]) -> Ring:
    ring = []
    for c in coords:
        lon, lat = float(c[0]), float(c[1])
        if not (math.isfinite(lon) and math.isfinite(lat)):
            raise DegenerateGeometry(f"non-finite coordinate ({lon}, {lat})")
        if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
            raise DegenerateGeometry(f"coordinate out of WGS84 range ({lon}, {lat})")
        if ring and ring[-1] == (lon, lat):
            continue
        ring.append((lon, lat))
    if len(ring) > 1 and ring[0] == ring[-1]:
        ring.pop()
    if len(set(ring)) < 3:
        raise DegenerateGeometry("ring has fewer than 3 distinct vertices")
    if _planar_ring_area2(ring) == 0.0:
        raise DegenerateGeometry("ring has zero extent")
    return tuple(ring)


def _planar_ring_area2(ring: Sequence[tuple[float, float]]) -> float:
    n = len(ring)
    return math.fsum(
        ring[i][0] * ring[(i + 1) % n][1] - ring[(i + 1) % n][0] * ring[i][1]
        for i in range(n)
    )


@dataclass(frozen=True)
class Polygon:
    """A simple polygon with optional holes. Rings are stored open."""

    exterior: Ring
    holes: tuple[Ring, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "exterior", _normalize_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_normalize_ring(h) for h in self.holes))

    @classmethod
    def from_coords(cls, exterior, holes=()) -> "Polygon":
        return cls(tuple(map(tuple, exterior)), tuple(tuple(map(tuple, h)) for h in holes))

    @property
    def rings(self) -> tuple[Ring, ...]:
        return (self.exterior, *self.holes)

    @cached_property
    def bbox(self) -> BBox:
        lons = [c[0] for c in self.exterior]
        lats = [c[1] for c in self.exterior]
        return (min(lons), min(lats), max(lons), max(lats))

    @cached_property
    def _area_centroid(self) -> tuple[float, Point]:
        return _area_and_centroid(self)

    def to_geojson_coords(self) -> list:
        return [[list(c) for c in r] + [list(r[0])] for r in self.rings]


def _projection(p: Polygon):
    lon0 = math.fsum(c[0] for c in p.exterior) / len(p.exterior)
    lat0 = math.fsum(c[1] for c in p.exterior) / len(p.exterior)
    phi0 = math.radians(lat0)
    cos0 = math.cos(phi0)
    if cos0 <= 0.0:
        raise DegenerateGeometry("polygon centred on a pole")
    kx = EARTH_RADIUS_M * cos0
    ky = EARTH_RADIUS_M / cos0

    def fwd(c):
        phi = math.radians(c[1])
        # sin(phi) - sin(phi0) without cancellation
        dy = 2.0 * math.cos(0.5 * (phi + phi0)) * math.sin(0.5 * (phi - phi0))
        return (kx * math.radians(c[0] - lon0), ky * dy)

    def inv(x, y):
        s = math.sin(phi0) + y / ky
        return Point(lon0 + math.degrees(x / kx), math.degrees(math.asin(max(-1.0, min(1.0, s)))))

    return fwd, inv


def _ring_moments(xy):
    n = len(xy)
    crosses = []
    for i in range(n):
        x1, y1 = xy[i]
        x2, y2 = xy[(i + 1) % n]
        crosses.append((x1 * y2 - x2 * y1, x1 + x2, y1 + y2))
    a2 = math.fsum(c for c, _, _ in crosses)
    mx = math.fsum(c * sx for c, sx, _ in crosses)
    my = math.fsum(c * sy for c, _, sy in crosses)
    if a2 < 0:
        a2, mx, my = -a2, -mx, -my
    # area, and first moments (area * centroid)
    return a2 / 2.0, mx / 6.0, my / 6.0


def _area_and_centroid(p: Polygon) -> tuple[float, Point]:
    fwd, inv = _projection(p)
    area, mx, my = _ring_moments([fwd(c) for c in p.exterior])
    if area == 0.0:
        raise DegenerateGeometry("exterior ring has zero area")
    for h in p.holes:
        ha, hx, hy = _ring_moments([fwd(c) for c in h])
        area -= ha
        mx -= hx
        my -= hy
    if area <= 0.0:
        raise DegenerateGeometry("holes cover the exterior")
    return area, inv(mx / area, my / area)


def polygon_area_m2(p: Polygon) -> float:
    """Horizontal area in square metres; holes are subtracted."""
    return p._area_centroid[0]


def centroid(p: Polygon) -> Point:
    return p._area_centroid[1]


# -- exact planar predicates on lon/lat -------------------------------------


def _orient(ax, ay, bx, by, cx, cy) -> float:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_segment(ax, ay, bx, by, px, py) -> bool:
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


def segments_intersect(a, b, c, d) -> bool:
    """Closed-segment intersection test, touching and collinear overlap included."""
    o1 = _orient(*a, *b, *c)
    o2 = _orient(*a, *b, *d)
    o3 = _orient(*c, *d, *a)
    o4 = _orient(*c, *d, *b)
    if ((o1 > 0 and o2 < 0) or (o1 < 0 and o2 > 0)) and ((o3 > 0 and o4 < 0) or (o3 < 0 and o4 > 0)):
        return True
    if o1 == 0 and _on_segment(*a, *b, *c):
        return True
    if o2 == 0 and _on_segment(*a, *b, *d):
        return True
    if o3 == 0 and _on_segment(*c, *d, *a):
        return True
    if o4 == 0 and _on_segment(*c, *d, *b):
        return True
    return False


def point_in_polygon(pt, p: Polygon) -> bool:
    """Even-odd test; points on any ring boundary count as inside."""
    x, y = pt[0], pt[1]
    minx, miny, maxx, maxy = p.bbox
    if x < minx or x > maxx or y < miny or y > maxy:
        return False
    inside = False
    for ring in p.rings:
        n = len(ring)
        for i in range(n):
            ax, ay = ring[i]
            bx, by = ring[(i + 1) % n]
            if _orient(ax, ay, bx, by, x, y) == 0 and _on_segment(ax, ay, bx, by, x, y):
                return True
            if (ay > y) != (by > y):
                xc = ax + (y - ay) * (bx - ax) / (by - ay)
                if x < xc:
                    inside = not inside
    return inside


def _edges(p: Polygon):
    for ring in p.rings:
        n = len(ring)
        for i in range(n):
            yield ring[i], ring[(i + 1) % n]


def _boxes_overlap(a: BBox, b: BBox) -> bool:
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


def intersects(a: Polygon, b: Polygon) -> bool:
    if not _boxes_overlap(a.bbox, b.bbox):
        return False
    b_edges = list(_edges(b))
    for p1, p2 in _edges(a):
        ex0, ex1 = min(p1[0], p2[0]), max(p1[0], p2[0])
        ey0, ey1 = min(p1[1], p2[1]), max(p1[1], p2[1])
        for q1, q2 in b_edges:
            if max(q1[0], q2[0]) < ex0 or min(q1[0], q2[0]) > ex1:
                continue
            if max(q1[1], q2[1]) < ey0 or min(q1[1], q2[1]) > ey1:
                continue
            if segments_intersect(p1, p2, q1, q2):
                return True
    return point_in_polygon(a.exterior[0], b) or point_in_polygon(b.exterior[0], a)


def validate(p: Polygon) -> None:
    """Reject self-intersecting rings and holes that escape the exterior."""
    for ri, ring in enumerate(p.rings):
        n = len(ring)
        for i in range(n):
            a, b = ring[i], ring[(i + 1) % n]
            for j in range(i + 1, n):
                c, d = ring[j], ring[(j + 1) % n]
                if j == i + 1 or (i == 0 and j == n - 1):
                    # adjacent edges share one vertex; only a fold-back overlaps
                    shared = b if j == i + 1 else a
                    other_ab = a if j == i + 1 else b
                    other_cd = d if j == i + 1 else c
                    if _orient(*other_ab, *shared, *other_cd) == 0 and (
                        _on_segment(*shared, *other_ab, *other_cd)
                        or _on_segment(*shared, *other_cd, *other_ab)
                    ):
                        raise GeometryError(f"ring {ri} folds back on itself at vertex {j}")
                    continue
                if segments_intersect(a, b, c, d):
                    raise GeometryError(f"ring {ri} self-intersects (edges {i} and {j})")
    if p.holes:
        outer = Polygon(p.exterior)
        for hi, hole in enumerate(p.holes):
            if not all(point_in_polygon(v, outer) for v in hole):
                raise GeometryError(f"hole {hi} lies outside the exterior ring")


# -- spatial index -----------------------------------------------------------


def _union(boxes) -> BBox:
    return (
        min(b[0] for b in boxes),
        min(b[1] for b in boxes),
        max(b[2] for b in boxes),
        max(b[3] for b in boxes),
    )


class _Node:
    __slots__ = ("bbox", "children", "leaf")

    def __init__(self, bbox, children, leaf):
        self.bbox = bbox
        self.children = children
        self.leaf = leaf


class SpatialIndex:
    """Sort-Tile-Recursive packed R-tree over bounding boxes.

    Immutable after construction; query results are returned in insertion
    order so downstream tie-breaking is deterministic.
    """

    def __init__(self, items: Sequence[tuple[Hashable, BBox]], node_capacity: int = 16):
        if not items:
            raise EmptyIndex("cannot build a spatial index with zero items")
        self._ids = [i for i, _ in items]
        self._boxes = [tuple(map(float, b)) for _, b in items]
        self._cap = node_capacity
        level = [(b, k) for k, b in enumerate(self._boxes)]
        nodes = self._pack(level, leaf=True)
        while len(nodes) > 1:
            nodes = self._pack([(n.bbox, n) for n in nodes], leaf=False)
        self._root = nodes[0]

    def _pack(self, entries, leaf):
        cap = self._cap
        n_nodes = math.ceil(len(entries) / cap)
        n_slices = math.ceil(math.sqrt(n_nodes))
        entries = sorted(entries, key=lambda e: (e[0][0] + e[0][2]))
        per_slice = n_slices * cap
        out = []
        for s in range(0, len(entries), per_slice):
            strip = sorted(entries[s : s + per_slice], key=lambda e: (e[0][1] + e[0][3]))
            for k in range(0, len(strip), cap):
                chunk = strip[k : k + cap]
                out.append(_Node(_union([e[0] for e in chunk]), chunk, leaf))
        return out

    def __len__(self) -> int:
        return len(self._ids)

    def query(self, bbox: BBox) -> list:
        """Ids whose boxes intersect ``bbox`` (closed boxes), in insertion order."""
        hits = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            if not _boxes_overlap(node.bbox, bbox):
                continue
            if node.leaf:
                hits.extend(k for b, k in node.children if _boxes_overlap(b, bbox))
            else:
                stack.extend(child for _, child in node.children)
        hits.sort()
        return [self._ids[k] for k in hits]


def build_index(items: Sequence[tuple[Hashable, Polygon]]) -> SpatialIndex:
    return SpatialIndex([(i, p.bbox) for i, p in items])


def query_candidates(idx: SpatialIndex, p: Polygon) -> list:
    return idx.query(p.bbox)
