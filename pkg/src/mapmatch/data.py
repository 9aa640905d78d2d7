"""Trajectory containers, sparsification, dataset splits, synthetic data.

File formats (header row required, UTF-8, LF):
  trajectories.csv  traj_id,seq,lat,lng,t
  routes.csv        traj_id,seq,edge_id
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .geo import METERS_PER_DEG, GeoPoint
from .network import DataError, RoadNetwork


def substream(seed: int, name: str) -> np.random.Generator:
    """Named RNG substream: all randomness flows from one root seed."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


@dataclass(frozen=True)
class GpsPoint:
    lat: float
    lng: float
    t: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lng) and math.isfinite(self.t)):
            raise ValueError(f"non-finite GPS point ({self.lat}, {self.lng}, {self.t})")

    @property
    def geo(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lng)


@dataclass(frozen=True)
class Trajectory:
    id: str
    points: tuple[GpsPoint, ...]

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError(f"trajectory {self.id} is empty")
        for a, b in zip(self.points, self.points[1:]):
            if not b.t > a.t:
                raise ValueError(f"trajectory {self.id}: timestamps not strictly increasing")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class MatchedTrajectory:
    trajectory: Trajectory
    route: tuple[int, ...]

    def __post_init__(self):
        if len(self.route) != len(self.trajectory.points):
            raise ValueError(
                f"trajectory {self.trajectory.id}: route length {len(self.route)} "
                f"!= point count {len(self.trajectory.points)}"
            )

    @property
    def id(self) -> str:
        return self.trajectory.id

    def __len__(self) -> int:
        return len(self.route)


@dataclass
class DatasetSplit:
    train: list[MatchedTrajectory]
    valid: list[MatchedTrajectory]
    test: list[MatchedTrajectory]
    seed: int


def sparsify(traj: MatchedTrajectory, r: float, seed: int) -> MatchedTrajectory:
    """Keep each interior point with probability r; endpoints always kept.

    Route entries stay in lockstep with points. Deterministic per
    (trajectory id, r, seed).
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {r}")
    l = len(traj)
    if l < 2:
        raise ValueError("sparsify needs at least 2 points")
    for attempt in range(8):
        rng = substream(seed, f"sparsify/{traj.id}/{attempt}")
        keep = [0] + [i for i in range(1, l - 1) if rng.random() < r] + [l - 1]
        if len(keep) >= 2:
            break
    else:
        keep = [0, l - 1]
    points = tuple(traj.trajectory.points[i] for i in keep)
    route = tuple(traj.route[i] for i in keep)
    return MatchedTrajectory(Trajectory(traj.id, points), route)


def split_dataset(data: list[MatchedTrajectory], seed: int) -> DatasetSplit:
    """Shuffle by seed and partition 40/30/30."""
    if len(data) < 10:
        raise ValueError(f"need at least 10 trajectories, got {len(data)}")
    order = substream(seed, "split").permutation(len(data))
    shuffled = [data[i] for i in order]
    n = len(data)
    n_train = round(0.4 * n)
    n_valid = round(0.3 * n)
    return DatasetSplit(
        train=shuffled[:n_train],
        valid=shuffled[n_train:n_train + n_valid],
        test=shuffled[n_train + n_valid:],
        seed=seed,
    )


def generate_synthetic(net: RoadNetwork, n_traj: int, noise_sigma_m: float,
                       step_interval_s: float, seed: int,
                       speed_mps: float = 10.0) -> list[MatchedTrajectory]:
    """Random shortest-path walks with Gaussian GPS noise.

    Each trajectory follows the shortest route between a random node pair,
    emitting a point every step_interval_s at speed_mps. A per-trajectory
    phase offsets the emission positions along the route so points never
    coincide with intersections (where the true label would be ambiguous).
    The ground-truth label of a point is the segment containing its
    unperturbed position (boundary positions belong to the segment being
    entered).
    """
    node_ids = sorted(net.nodes)
    if len(node_ids) < 2:
        raise ValueError("network too small to generate trajectories")
    step_m = speed_mps * step_interval_s
    out = []
    for i in range(n_traj):
        rng = substream(seed, f"data/{i}")
        path = None
        for _ in range(32):
            a, b = rng.choice(node_ids, size=2, replace=False)
            path = net.shortest_node_path(int(a), int(b))
            if path is not None and sum(net.segments[s].length_m for s in path) >= 2 * step_m:
                break
            path = None
        if path is None:
            raise DataError("could not sample a connected node pair with a long-enough route")

        cum = [0.0]
        for sid in path:
            cum.append(cum[-1] + net.segments[sid].length_m)
        total = cum[-1]
        phase = rng.uniform(0.25, 0.75) * step_m

        noise = substream(seed, f"noise/{i}")
        points, route = [], []
        k = 0
        while True:
            s = phase + k * step_m
            if s > total:
                break
            # bisect_right puts exact boundaries on the segment being entered
            j = min(bisect.bisect_right(cum, s) - 1, len(path) - 1)
            seg = net.segments[path[j]]
            frac = (s - cum[j]) / seg.length_m
            a_pt, b_pt = seg.polyline[0], seg.polyline[-1]
            lat = a_pt.lat + frac * (b_pt.lat - a_pt.lat)
            lng = a_pt.lng + frac * (b_pt.lng - a_pt.lng)
            if noise_sigma_m > 0:
                dy, dx = noise.normal(0.0, noise_sigma_m, size=2)
                lat += dy / METERS_PER_DEG
                lng += dx / (METERS_PER_DEG * math.cos(math.radians(lat)))
            points.append(GpsPoint(float(lat), float(lng), s / speed_mps))
            route.append(seg.id)
            k += 1
        out.append(MatchedTrajectory(Trajectory(f"t{i:05d}", tuple(points)), tuple(route)))
    return out


def save_trajectories(trajs: list[Trajectory], path) -> None:
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["traj_id", "seq", "lat", "lng", "t"])
        for traj in trajs:
            for seq, p in enumerate(traj.points):
                w.writerow([traj.id, seq, repr(float(p.lat)), repr(float(p.lng)),
                            repr(float(p.t))])


def save_routes(matched: list[MatchedTrajectory], path) -> None:
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["traj_id", "seq", "edge_id"])
        for m in matched:
            for seq, eid in enumerate(m.route):
                w.writerow([m.id, seq, eid])


def _grouped_rows(path, key):
    groups: dict[str, list] = {}
    order: list[str] = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            tid = row[key]
            if tid not in groups:
                groups[tid] = []
                order.append(tid)
            groups[tid].append(row)
    return groups, order


def load_trajectories(path) -> list[Trajectory]:
    try:
        groups, order = _grouped_rows(path, "traj_id")
    except (KeyError, OSError) as e:
        raise DataError(f"cannot read trajectories from {path}: {e}") from e
    out = []
    for tid in order:
        rows = sorted(groups[tid], key=lambda r: int(r["seq"]))
        try:
            pts = tuple(GpsPoint(float(r["lat"]), float(r["lng"]), float(r["t"])) for r in rows)
            out.append(Trajectory(tid, pts))
        except (KeyError, ValueError) as e:
            raise DataError(f"bad trajectory {tid} in {path}: {e}") from e
    return out


def load_routes(path) -> dict[str, tuple[int, ...]]:
    try:
        groups, order = _grouped_rows(path, "traj_id")
    except (KeyError, OSError) as e:
        raise DataError(f"cannot read routes from {path}: {e}") from e
    out = {}
    for tid in order:
        rows = sorted(groups[tid], key=lambda r: int(r["seq"]))
        try:
            out[tid] = tuple(int(r["edge_id"]) for r in rows)
        except (KeyError, ValueError) as e:
            raise DataError(f"bad route {tid} in {path}: {e}") from e
    return out


def load_matched(trajectories_path, routes_path) -> list[MatchedTrajectory]:
    trajs = load_trajectories(trajectories_path)
    routes = load_routes(routes_path)
    missing = [t.id for t in trajs if t.id not in routes]
    if missing:
        raise DataError(f"routes missing for trajectories: {missing[:10]}")
    out = []
    for t in trajs:
        try:
            out.append(MatchedTrajectory(t, routes[t.id]))
        except ValueError as e:
            raise DataError(str(e)) from e
    return out
