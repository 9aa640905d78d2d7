"""Classical HMM map matching (Newson-Krumm style).

Emission: Gaussian in the projection distance. Transition: exponential in
the absolute difference between network route distance and great-circle
distance, with route search capped. Ties resolve toward the lower segment
id, evaluated from the last point backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .data import Trajectory
from .geo import GeoPoint, Projection, haversine_distance
from .network import RoadNetwork, SpatialIndex, candidates_within


class UnmatchableTrajectoryError(Exception):
    """No point of the trajectory has any candidate segment."""


@dataclass(frozen=True)
class HmmConfig:
    sigma_emission_m: float = 20.0
    beta_transition_m: float = 200.0
    candidate_delta_m: float = 50.0
    max_route_search_m: float = 5000.0

    def __post_init__(self):
        for field in ("sigma_emission_m", "beta_transition_m", "candidate_delta_m", "max_route_search_m"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")


def emission_logp(distance_m: float, sigma_m: float) -> float:
    return -0.5 * (distance_m / sigma_m) ** 2 - math.log(sigma_m * math.sqrt(2 * math.pi))


def transition_logp(metric_m: float, beta_m: float) -> float:
    return -metric_m / beta_m - math.log(beta_m)


def route_distance(net: RoadNetwork, seg_a, frac_a: float, seg_b, frac_b: float,
                   node_dists: dict[int, float], cap_m: float) -> float | None:
    """Directed network distance between two on-segment positions, or None
    when it exceeds cap_m. node_dists must be Dijkstra distances from
    seg_a.to_node with the same cap."""
    if seg_a.id == seg_b.id and frac_b >= frac_a:
        return (frac_b - frac_a) * seg_a.length_m
    via = node_dists.get(seg_b.from_node)
    if via is None:
        return None
    total = (1.0 - frac_a) * seg_a.length_m + via + frac_b * seg_b.length_m
    return total if total <= cap_m else None


@dataclass
class LatticeStep:
    point_index: int
    candidates: list[tuple[int, Projection]]  # ascending segment id
    emissions: list[float]


def build_lattice(traj: Trajectory, net: RoadNetwork, idx: SpatialIndex, cfg: HmmConfig):
    """Candidate lattice plus transition matrices between consecutive
    candidate-bearing points."""
    steps: list[LatticeStep] = []
    for i, p in enumerate(traj.points):
        cands = candidates_within(net, idx, p.geo, cfg.candidate_delta_m)
        if not cands:
            continue
        cands = sorted(cands, key=lambda c: c[0])
        emis = [emission_logp(proj.distance_m, cfg.sigma_emission_m) for _, proj in cands]
        steps.append(LatticeStep(i, cands, emis))
    if not steps:
        raise UnmatchableTrajectoryError("unmatchable trajectory: no point has candidates")

    transitions: list[list[list[float]]] = []
    for prev, cur in zip(steps, steps[1:]):
        gc = haversine_distance(traj.points[prev.point_index].geo, traj.points[cur.point_index].geo)
        matrix = []
        for sid_a, proj_a in prev.candidates:
            seg_a = net.segments[sid_a]
            node_dists = net.node_distances(seg_a.to_node, cfg.max_route_search_m)
            row = []
            for sid_b, proj_b in cur.candidates:
                seg_b = net.segments[sid_b]
                rd = route_distance(net, seg_a, proj_a.fraction, seg_b, proj_b.fraction,
                                    node_dists, cfg.max_route_search_m)
                metric = abs(rd - gc) if rd is not None else cfg.max_route_search_m
                row.append(transition_logp(metric, cfg.beta_transition_m))
            matrix.append(row)
        transitions.append(matrix)
    return steps, transitions


def viterbi(steps: list[LatticeStep], transitions) -> tuple[list[int], float]:
    """Most probable candidate sequence over the lattice. First-max-wins
    over ascending segment ids in every argmax."""
    dp = list(steps[0].emissions)
    back: list[list[int]] = []
    for k in range(1, len(steps)):
        trans = transitions[k - 1]
        ndp, nback = [], []
        for j in range(len(steps[k].candidates)):
            best, arg = -math.inf, 0
            for i in range(len(dp)):
                v = dp[i] + trans[i][j]
                if v > best:
                    best, arg = v, i
            ndp.append(best + steps[k].emissions[j])
            nback.append(arg)
        dp, back_k = ndp, nback
        back.append(back_k)

    best_j, best_v = 0, -math.inf
    for j, v in enumerate(dp):
        if v > best_v:
            best_j, best_v = j, v
    choice = [best_j]
    for k in range(len(steps) - 1, 0, -1):
        choice.append(back[k - 1][choice[-1]])
    choice.reverse()
    return choice, best_v


def match_hmm(traj: Trajectory, net: RoadNetwork, idx: SpatialIndex,
              cfg: HmmConfig | None = None) -> list[int]:
    """Viterbi-optimal segment per point. Points without candidates
    inherit the previous matched segment (leading gaps backfill from the
    first matched point)."""
    cfg = cfg or HmmConfig()
    steps, transitions = build_lattice(traj, net, idx, cfg)
    choice, _ = viterbi(steps, transitions)

    matched: dict[int, int] = {
        step.point_index: step.candidates[j][0] for step, j in zip(steps, choice)
    }
    route: list[int] = []
    last = matched[steps[0].point_index]
    for i in range(len(traj.points)):
        if i in matched:
            last = matched[i]
        route.append(last)
    # leading gap points carry the first matched segment (handled by init of last)
    return route


def joint_logp(steps: list[LatticeStep], transitions, choice: list[int]) -> float:
    """Joint log-probability of a candidate-index sequence, accumulated
    left to right exactly as the Viterbi recurrence does."""
    score = steps[0].emissions[choice[0]]
    for k in range(1, len(steps)):
        score = (score + transitions[k - 1][choice[k - 1]][choice[k]]) + steps[k].emissions[choice[k]]
    return score
