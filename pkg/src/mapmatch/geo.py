"""Geodesic primitives shared by the matchers.

All distances are great-circle meters on a sphere of radius 6,371,000 m.
Planar work (segment projection, direction cosines) happens in a local
equirectangular plane, which is sub-meter accurate at city scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

EARTH_RADIUS_M = 6_371_000.0
METERS_PER_DEG = math.pi * EARTH_RADIUS_M / 180.0


@dataclass(frozen=True)
class GeoPoint:
    """A WGS-style coordinate pair in decimal degrees."""

    lat: float
    lng: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lng)):
            raise ValueError(f"non-finite coordinate ({self.lat}, {self.lng})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of [-90, 90]")
        if not -180.0 <= self.lng <= 180.0:
            raise ValueError(f"longitude {self.lng} out of [-180, 180]")


@dataclass(frozen=True)
class Projection:
    """Foot of perpendicular of a query point on a polyline.

    ``fraction`` is the arc-length position of the foot along the whole
    polyline, in [0, 1]. ``distance_m`` is the great-circle distance from
    the query point to ``point``.
    """

    point: GeoPoint
    distance_m: float
    fraction: float


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points in meters."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlmb = math.radians(b.lng - a.lng)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.atan2(math.sqrt(h), math.sqrt(1 - h))


def _to_plane(p: GeoPoint, center: GeoPoint, cos_lat: float) -> tuple[float, float]:
    # Local equirectangular projection: x east, y north, meters.
    return (
        (p.lng - center.lng) * METERS_PER_DEG * cos_lat,
        (p.lat - center.lat) * METERS_PER_DEG,
    )


def project_to_segment(p: GeoPoint, polyline: list[GeoPoint]) -> Projection:
    """Minimum-distance projection of ``p`` onto a polyline.

    Considers the clamped foot on every sub-segment plus every vertex, so
    the returned distance never exceeds the distance to any vertex. Ties
    break toward the earliest position along the polyline.
    """
    if len(polyline) < 1:
        raise ValueError("polyline must have at least 1 point")
    cos_lat = math.cos(math.radians(p.lat))
    pts = [_to_plane(q, p, cos_lat) for q in polyline]

    seg_lens = []
    for i in range(len(pts) - 1):
        (x1, y1), (x2, y2) = pts[i], pts[i + 1]
        seg_lens.append(math.hypot(x2 - x1, y2 - y1))
    total = sum(seg_lens)

    best: tuple[float, float, GeoPoint] | None = None  # (distance, fraction, foot)

    def consider(foot: GeoPoint, arc_pos: float):
        nonlocal best
        d = haversine_distance(p, foot)
        frac = arc_pos / total if total > 0 else 0.0
        frac = min(max(frac, 0.0), 1.0)
        if best is None or d < best[0]:
            best = (d, frac, foot)

    cum = 0.0
    for i in range(len(pts) - 1):
        (x1, y1), (x2, y2) = pts[i], pts[i + 1]
        a, b = polyline[i], polyline[i + 1]
        consider(a, cum)
        L = seg_lens[i]
        if L > 0:
            t = ((0.0 - x1) * (x2 - x1) + (0.0 - y1) * (y2 - y1)) / (L * L)
            t = min(max(t, 0.0), 1.0)
            foot = GeoPoint(a.lat + t * (b.lat - a.lat), a.lng + t * (b.lng - a.lng))
            consider(foot, cum + t * L)
        cum += L
    consider(polyline[-1], total)

    assert best is not None
    d, frac, foot = best
    return Projection(point=foot, distance_m=d, fraction=frac)


def direction_cosine(v_from: GeoPoint, v_to: GeoPoint, seg) -> float:
    """Cosine between the displacement v_from->v_to and a segment's
    entrance->exit vector (``seg`` needs only a ``polyline`` attribute).

    Both vectors live in the local plane centered at the displacement
    midpoint; midpoint centering keeps swap antisymmetry exact.
    Degenerate displacement or segment returns 0.
    """
    seg_start, seg_end = seg.polyline[0], seg.polyline[-1]
    center = GeoPoint((v_from.lat + v_to.lat) / 2, (v_from.lng + v_to.lng) / 2)
    cos_lat = math.cos(math.radians(center.lat))
    fx, fy = _to_plane(v_from, center, cos_lat)
    tx, ty = _to_plane(v_to, center, cos_lat)
    dx, dy = tx - fx, ty - fy
    sx1, sy1 = _to_plane(seg_start, center, cos_lat)
    sx2, sy2 = _to_plane(seg_end, center, cos_lat)
    sx, sy = sx2 - sx1, sy2 - sy1
    nd = math.hypot(dx, dy)
    ns = math.hypot(sx, sy)
    if nd == 0.0 or ns == 0.0:
        return 0.0
    c = (dx * sx + dy * sy) / (nd * ns)
    return min(max(c, -1.0), 1.0)


def min_max_normalize(values, lo: float, hi: float) -> list[float]:
    """(v - lo)/(hi - lo) per value, clamped to [0, 1].

    Out-of-range inputs (test-time values beyond the training bounds)
    clamp rather than extrapolate.
    """
    if not hi > lo:
        raise ValueError(f"degenerate bounds: lo={lo}, hi={hi}")
    span = hi - lo
    return [min(max((v - lo) / span, 0.0), 1.0) for v in values]
