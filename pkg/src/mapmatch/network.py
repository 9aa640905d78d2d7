"""Directed road graph, CSV loading, and a radius spatial index.

File formats (header row required, UTF-8, LF):
  nodes.csv  node_id,lat,lng
  edges.csv  edge_id,from_node,to_node,polyline   (polyline = "lat lng;lat lng;...")

Segment ids must be dense integers [0, |E|).
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field

from shapely.geometry import LineString, box
from shapely.strtree import STRtree

from .geo import METERS_PER_DEG, GeoPoint, Projection, haversine_distance, project_to_segment


class DataError(Exception):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class RoadSegment:
    id: int
    from_node: int
    to_node: int
    polyline: tuple[GeoPoint, ...]
    length_m: float


@dataclass
class RoadNetwork:
    nodes: dict[int, GeoPoint]
    segments: dict[int, RoadSegment]
    adjacency: dict[int, list[int]] = field(default_factory=dict)

    @property
    def segment_count(self) -> int:
        return len(self.segments)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def node_distances(self, source: int, cutoff_m: float) -> dict[int, float]:
        """Dijkstra over the directed segment graph, stopping past cutoff_m."""
        dist = {source: 0.0}
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, math.inf):
                continue
            if d > cutoff_m:
                continue
            for sid in self.adjacency.get(u, ()):
                seg = self.segments[sid]
                nd = d + seg.length_m
                if nd <= cutoff_m and nd < dist.get(seg.to_node, math.inf):
                    dist[seg.to_node] = nd
                    heapq.heappush(heap, (nd, seg.to_node))
        return dist

    def shortest_node_path(self, source: int, target: int) -> list[int] | None:
        """Segment-id path from source to target node, or None if unreachable."""
        dist = {source: 0.0}
        prev: dict[int, int] = {}
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if u == target:
                break
            if d > dist.get(u, math.inf):
                continue
            for sid in self.adjacency.get(u, ()):
                seg = self.segments[sid]
                nd = d + seg.length_m
                if nd < dist.get(seg.to_node, math.inf):
                    dist[seg.to_node] = nd
                    prev[seg.to_node] = sid
                    heapq.heappush(heap, (nd, seg.to_node))
        if target not in dist:
            return None
        path = []
        u = target
        while u != source:
            sid = prev[u]
            path.append(sid)
            u = self.segments[sid].from_node
        path.reverse()
        return path


def _polyline_length(polyline) -> float:
    return sum(haversine_distance(polyline[i], polyline[i + 1]) for i in range(len(polyline) - 1))


def build_network(nodes: dict[int, GeoPoint], edges: list[tuple[int, int, int, list[GeoPoint]]]) -> RoadNetwork:
    """Assemble and validate a RoadNetwork from parsed rows."""
    segments: dict[int, RoadSegment] = {}
    for eid, u, v, polyline in edges:
        if eid in segments:
            raise DataError(f"duplicate edge id {eid}")
        if u not in nodes:
            raise DataError(f"edge {eid} references missing node {u}")
        if v not in nodes:
            raise DataError(f"edge {eid} references missing node {v}")
        if len(polyline) < 2:
            raise DataError(f"edge {eid} polyline has fewer than 2 points")
        segments[eid] = RoadSegment(
            id=eid, from_node=u, to_node=v,
            polyline=tuple(polyline), length_m=_polyline_length(polyline),
        )
    ids = sorted(segments)
    if ids != list(range(len(ids))):
        raise DataError("segment ids are not dense integers [0, |E|)")
    adjacency: dict[int, list[int]] = {}
    for seg in segments.values():
        adjacency.setdefault(seg.from_node, []).append(seg.id)
    for sids in adjacency.values():
        sids.sort()
    return RoadNetwork(nodes=nodes, segments=segments, adjacency=adjacency)


def load_network(nodes_path, edges_path) -> RoadNetwork:
    nodes: dict[int, GeoPoint] = {}
    with open(nodes_path, newline="") as f:
        for row in csv.DictReader(f):
            try:
                nid = int(row["node_id"])
                pt = GeoPoint(float(row["lat"]), float(row["lng"]))
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"bad node row {row}: {e}") from e
            if nid in nodes:
                raise DataError(f"duplicate node id {nid}")
            nodes[nid] = pt
    edges = []
    with open(edges_path, newline="") as f:
        for row in csv.DictReader(f):
            try:
                eid = int(row["edge_id"])
                u, v = int(row["from_node"]), int(row["to_node"])
                polyline = []
                for part in row["polyline"].split(";"):
                    lat_s, lng_s = part.split()
                    polyline.append(GeoPoint(float(lat_s), float(lng_s)))
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"bad edge row {row}: {e}") from e
            edges.append((eid, u, v, polyline))
    return build_network(nodes, edges)


def save_network(net: RoadNetwork, nodes_path, edges_path) -> None:
    with open(nodes_path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["node_id", "lat", "lng"])
        for nid in sorted(net.nodes):
            p = net.nodes[nid]
            w.writerow([nid, repr(p.lat), repr(p.lng)])
    with open(edges_path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["edge_id", "from_node", "to_node", "polyline"])
        for eid in sorted(net.segments):
            seg = net.segments[eid]
            poly = ";".join(f"{repr(p.lat)} {repr(p.lng)}" for p in seg.polyline)
            w.writerow([eid, seg.from_node, seg.to_node, poly])


class SpatialIndex:
    """R-tree over segment geometries answering radius queries in meters.

    The tree is queried with a conservative degree-space box around the
    point, then every hit is refined with the exact projection distance,
    so results are set-equal to an exhaustive scan.
    """

    def __init__(self, net: RoadNetwork):
        self._net = net
        self._ids = sorted(net.segments)
        geoms = [
            LineString([(p.lng, p.lat) for p in net.segments[sid].polyline])
            for sid in self._ids
        ]
        self._tree = STRtree(geoms)

    def query(self, p: GeoPoint, delta_m: float) -> list[tuple[int, Projection]]:
        """Segments whose minimum projection distance is <= delta_m,
        sorted by ascending distance then segment id."""
        dlat = delta_m / METERS_PER_DEG * 1.01
        max_abs_lat = min(abs(p.lat) + dlat, 89.99)
        cos_lat = math.cos(math.radians(max_abs_lat))
        dlng = delta_m / (METERS_PER_DEG * max(cos_lat, 1e-6)) * 1.01
        hits = self._tree.query(box(p.lng - dlng, p.lat - dlat, p.lng + dlng, p.lat + dlat))
        out = []
        for i in hits:
            sid = self._ids[int(i)]
            proj = project_to_segment(p, list(self._net.segments[sid].polyline))
            if proj.distance_m <= delta_m:
                out.append((sid, proj))
        out.sort(key=lambda t: (t[1].distance_m, t[0]))
        return out


def candidates_within(net: RoadNetwork, idx: SpatialIndex, p: GeoPoint, delta_m: float) -> list[tuple[int, Projection]]:
    """All segments within delta_m meters of p (projection distance)."""
    if delta_m <= 0:
        raise ValueError(f"delta must be positive, got {delta_m}")
    return idx.query(p, delta_m)


def scan_candidates(net: RoadNetwork, p: GeoPoint, delta_m: float) -> list[tuple[int, Projection]]:
    """Exhaustive-scan reference for candidates_within."""
    out = []
    for sid in sorted(net.segments):
        proj = project_to_segment(p, list(net.segments[sid].polyline))
        if proj.distance_m <= delta_m:
            out.append((sid, proj))
    out.sort(key=lambda t: (t[1].distance_m, t[0]))
    return out


def build_grid_network(rows: int, cols: int, spacing_m: float = 200.0,
                       origin: GeoPoint = GeoPoint(41.14, -8.62),
                       jitter_m: float = 0.0, seed: int = 0) -> RoadNetwork:
    """Synthetic city grid: rows x cols intersections, bidirectional streets
    stored as two directed segments each. jitter_m displaces intersections
    uniformly (clipped to 0.4*spacing) for an irregular street pattern."""
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2x2 nodes")
    dlat = spacing_m / METERS_PER_DEG
    dlng = spacing_m / (METERS_PER_DEG * math.cos(math.radians(origin.lat)))
    jitter = min(jitter_m, 0.4 * spacing_m)
    rng = np.random.default_rng(np.random.SeedSequence([seed, rows, cols]))
    nodes: dict[int, GeoPoint] = {}
    for r in range(rows):
        for c in range(cols):
            dy = dx = 0.0
            if jitter > 0:
                dy, dx = rng.uniform(-jitter, jitter, size=2)
            nodes[r * cols + c] = GeoPoint(origin.lat + r * dlat + dy / METERS_PER_DEG,
                                           origin.lng + c * dlng + dx / dlng_scale(origin.lat))
    edges = []
    eid = 0
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            if c + 1 < cols:
                v = u + 1
                for a, b in ((u, v), (v, u)):
                    edges.append((eid, a, b, [nodes[a], nodes[b]]))
                    eid += 1
            if r + 1 < rows:
                v = u + cols
                for a, b in ((u, v), (v, u)):
                    edges.append((eid, a, b, [nodes[a], nodes[b]]))
                    eid += 1
    return build_network(nodes, edges)
