"""Planar/geodesic geometry used by the relation-extraction rules."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

from .errors import GeometryError

EARTH_RADIUS_KM = 6371.0
PLANAR = "planar"
GEODESIC = "geodesic"
_ON_EDGE_EPS = 1e-12


class GeoPoint(NamedTuple):
    x: float
    y: float


def as_point(p) -> GeoPoint:
    if isinstance(p, GeoPoint):
        return p
    try:
        x, y = p
    except (TypeError, ValueError):
        raise GeometryError(f"not a 2-D point: {p!r}") from None
    return GeoPoint(float(x), float(y))


def _check_point(p: GeoPoint, mode: str) -> None:
    if not (math.isfinite(p.x) and math.isfinite(p.y)):
        raise GeometryError(f"non-finite coordinate in {tuple(p)}")
    if mode == GEODESIC and not (-180.0 <= p.x <= 180.0 and -90.0 <= p.y <= 90.0):
        raise GeometryError(f"longitude/latitude out of range: {tuple(p)}")


def _segments_cross(p1, p2, p3, p4) -> bool:
    """Proper or touching intersection of two closed segments."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and on_seg(p1, p2, p3))
        or (o2 == 0 and on_seg(p1, p2, p4))
        or (o3 == 0 and on_seg(p3, p4, p1))
        or (o4 == 0 and on_seg(p3, p4, p2))
    )


@dataclass(frozen=True)
class RegionBoundary:
    """Closed ring of vertices; the last vertex connects back to the first."""

    points: tuple

    def __post_init__(self):
        pts = tuple(as_point(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if n < 3:
            raise GeometryError(f"boundary needs at least 3 points, got {n}")
        for p in pts:
            _check_point(p, PLANAR)
        for i in range(n):
            if pts[i] == pts[(i + 1) % n]:
                raise GeometryError(f"consecutive duplicate vertex at index {i}")
        if self.signed_area() == 0.0:
            raise GeometryError("boundary has zero area")
        # non-adjacent edges must not touch
        for i in range(n):
            a1, a2 = pts[i], pts[(i + 1) % n]
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or j == (i + 1) % n:
                    continue
                if _segments_cross(a1, a2, pts[j], pts[(j + 1) % n]):
                    raise GeometryError("boundary is self-intersecting")

    def __len__(self):
        return len(self.points)

    def __iter__(self) -> Iterator[GeoPoint]:
        return iter(self.points)

    def signed_area(self) -> float:
        s = 0.0
        pts = self.points
        for i in range(len(pts)):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % len(pts)]
            s += x1 * y2 - x2 * y1
        return 0.5 * s

    def bbox(self) -> tuple[float, float, float, float]:
        xs = [p.x for p in self.points]
        ys = [p.y for p in self.points]
        return min(xs), min(ys), max(xs), max(ys)

    def translated(self, dx: float, dy: float) -> "RegionBoundary":
        return RegionBoundary(tuple(GeoPoint(p.x + dx, p.y + dy) for p in self.points))


def _as_boundary(b) -> RegionBoundary:
    if isinstance(b, RegionBoundary):
        return b
    return RegionBoundary(tuple(b))


def distance(p, q, mode: str = PLANAR) -> float:
    """Distance in km. Geodesic mode treats x/y as longitude/latitude degrees."""
    p, q = as_point(p), as_point(q)
    if mode not in (PLANAR, GEODESIC):
        raise ValueError(f"unknown distance mode {mode!r}")
    _check_point(p, mode)
    _check_point(q, mode)
    if mode == PLANAR:
        return math.hypot(p.x - q.x, p.y - q.y)
    # spherical Vincenty form; well conditioned at all separations
    lon1, lat1, lon2, lat2 = map(math.radians, (p.x, p.y, q.x, q.y))
    dlon = lon2 - lon1
    num = math.hypot(
        math.cos(lat2) * math.sin(dlon),
        math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon),
    )
    den = math.sin(lat1) * math.sin(lat2) + math.cos(lat1) * math.cos(lat2) * math.cos(dlon)
    return EARTH_RADIUS_KM * math.atan2(num, den)


def centroid(b) -> GeoPoint:
    """Arithmetic mean of the boundary vertices (not the area centroid)."""
    if not isinstance(b, RegionBoundary):
        pts = tuple(b)
        if len(pts) < 3:
            raise GeometryError(f"boundary needs at least 3 points, got {len(pts)}")
        b = RegionBoundary(pts)
    n = len(b.points)
    return GeoPoint(math.fsum(p.x for p in b.points) / n, math.fsum(p.y for p in b.points) / n)


def _on_segment(p: GeoPoint, a: GeoPoint, c: GeoPoint) -> bool:
    cross = (c.x - a.x) * (p.y - a.y) - (c.y - a.y) * (p.x - a.x)
    scale = max(1.0, abs(c.x - a.x) + abs(c.y - a.y))
    if abs(cross) > _ON_EDGE_EPS * scale:
        return False
    return (
        min(a.x, c.x) - _ON_EDGE_EPS <= p.x <= max(a.x, c.x) + _ON_EDGE_EPS
        and min(a.y, c.y) - _ON_EDGE_EPS <= p.y <= max(a.y, c.y) + _ON_EDGE_EPS
    )


def contains(b, p) -> bool:
    """Point-in-polygon with closure semantics: boundary points count as inside."""
    b = _as_boundary(b)
    p = as_point(p)
    _check_point(p, PLANAR)
    pts = b.points
    n = len(pts)
    for i in range(n):
        if _on_segment(p, pts[i], pts[(i + 1) % n]):
            return True
    inside = False
    for i in range(n):
        a, c = pts[i], pts[(i + 1) % n]
        if (a.y > p.y) != (c.y > p.y):
            x_cross = a.x + (p.y - a.y) * (c.x - a.x) / (c.y - a.y)
            if p.x < x_cross:
                inside = not inside
    return inside


def shared_vertex_count(a, b, tol: float = 1e-9) -> int:
    """Number of (vertex of a, vertex of b) pairs closer than ``tol``."""
    if tol < 0:
        raise ValueError(f"tolerance must be non-negative, got {tol}")
    a, b = _as_boundary(a), _as_boundary(b)
    return sum(1 for p in a.points for q in b.points if math.hypot(p.x - q.x, p.y - q.y) <= tol)


class GridIndex:
    """Uniform grid bucketing of points for radius queries.

    Candidates returned by :meth:`near` are a superset of the points within
    ``radius``; callers apply the exact predicate.
    """

    def __init__(self, points: Sequence, cell: float):
        if not cell > 0:
            raise ValueError("grid cell size must be positive")
        self.cell = float(cell)
        self.points = [as_point(p) for p in points]
        self._buckets: dict[tuple[int, int], list[int]] = defaultdict(list)
        for i, p in enumerate(self.points):
            self._buckets[self._key(p.x, p.y)].append(i)

    def _key(self, x: float, y: float) -> tuple[int, int]:
        return (math.floor(x / self.cell), math.floor(y / self.cell))

    def near(self, p, radius: float) -> list[int]:
        p = as_point(p)
        r = int(math.ceil(radius / self.cell)) + 1
        kx, ky = self._key(p.x, p.y)
        out: list[int] = []
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                out.extend(self._buckets.get((kx + dx, ky + dy), ()))
        return out

    def pairs(self, radius: float) -> Iterable[tuple[int, int]]:
        """Candidate index pairs (i < j) possibly within ``radius``."""
        for i, p in enumerate(self.points):
            for j in self.near(p, radius):
                if j > i:
                    yield i, j


class BoxIndex:
    """Grid bucketing of axis-aligned boxes; a point query returns boxes whose cells it hits."""

    def __init__(self, boxes: Sequence[tuple[float, float, float, float]], cell: float):
        if not cell > 0:
            raise ValueError("grid cell size must be positive")
        self.cell = float(cell)
        self._buckets: dict[tuple[int, int], list[int]] = defaultdict(list)
        for i, (x0, y0, x1, y1) in enumerate(boxes):
            for kx in range(math.floor(x0 / cell) - 1, math.floor(x1 / cell) + 2):
                for ky in range(math.floor(y0 / cell) - 1, math.floor(y1 / cell) + 2):
                    self._buckets[(kx, ky)].append(i)

    def query(self, p) -> list[int]:
        p = as_point(p)
        return self._buckets.get((math.floor(p.x / self.cell), math.floor(p.y / self.cell)), [])
