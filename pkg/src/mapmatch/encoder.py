"""Trajectory encoder: fuses point sequences with candidate road-segment
context into a per-point condition embedding of width 2*d_emb.

Per point: (normalized lat, lng, t) -> linear -> Transformer stack gives
the point representation; candidate segments within delta meters get a
learned id embedding concatenated with direction cosines, projection
distance and distance rank, pushed through an MLP, then fused by a
learned attention over the candidate set. The condition row is the
concatenation of both parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .data import MatchedTrajectory, Trajectory
from .geo import direction_cosine, min_max_normalize
from .network import RoadNetwork, SpatialIndex, candidates_within
from .nn import FFN, TransformerEncoderLayer, init_linear, init_module


@dataclass(frozen=True)
class EncoderConfig:
    d_emb: int = 128
    delta_m: float = 50.0
    n_layers: int = 2
    n_heads: int = 4
    d_a: int = 64
    use_rank_feature: bool = True
    point_encoder: str = "transformer"  # "transformer" | "ffn" (ablation)
    fusion: str = "attention"           # "attention" | "mean" (ablation)

    @property
    def d_cond(self) -> int:
        return 2 * self.d_emb

    @property
    def n_scalar_features(self) -> int:
        return 4 if self.use_rank_feature else 3


@dataclass(frozen=True)
class NormalizationBounds:
    """Per-dimension min/max from the training split; persisted with the
    model so inference never recomputes them on test data."""

    lat: tuple[float, float]
    lng: tuple[float, float]
    t: tuple[float, float]

    @classmethod
    def from_trajectories(cls, trajs: list[Trajectory]) -> "NormalizationBounds":
        lats, lngs, ts = [], [], []
        for traj in trajs:
            for p in traj.points:
                lats.append(p.lat)
                lngs.append(p.lng)
                ts.append(p.t)

        def bound(vals):
            lo, hi = min(vals), max(vals)
            return (lo, hi) if hi > lo else (lo, lo + 1.0)

        return cls(lat=bound(lats), lng=bound(lngs), t=bound(ts))

    def as_dict(self) -> dict:
        return {"lat": list(self.lat), "lng": list(self.lng), "t": list(self.t)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationBounds":
        return cls(lat=tuple(d["lat"]), lng=tuple(d["lng"]), t=tuple(d["t"]))


@dataclass(frozen=True)
class CandidateFeature:
    segment_id: int
    cos_prev: float
    cos_next: float
    proj_dist_m: float
    rank: int


@dataclass
class TrajectoryView:
    """Pre-tensorized trajectory: everything the model needs, computed once."""

    traj_id: str
    points: np.ndarray          # (l, 3) normalized lat, lng, t
    cand_ids: np.ndarray        # (l, n_max) int64, padded with 0
    cand_feats: np.ndarray      # (l, n_max, F) float32
    cand_mask: np.ndarray       # (l, n_max) bool
    route: np.ndarray | None    # (l,) int64 ground truth, None for bare trajectories
    length: int = field(init=False)

    def __post_init__(self):
        self.length = self.points.shape[0]


def candidate_features(traj: Trajectory, net: RoadNetwork, idx: SpatialIndex,
                       delta_m: float) -> list[list[CandidateFeature]]:
    """Per-point candidate features. Boundary points get a neutral 0 for
    the missing direction cosine."""
    out = []
    l = len(traj.points)
    for i, p in enumerate(traj.points):
        cands = candidates_within(net, idx, p.geo, delta_m)
        feats = []
        for rank, (sid, proj) in enumerate(cands):
            seg = net.segments[sid]
            cp = direction_cosine(traj.points[i - 1].geo, p.geo, seg) if i > 0 else 0.0
            cn = direction_cosine(p.geo, traj.points[i + 1].geo, seg) if i < l - 1 else 0.0
            feats.append(CandidateFeature(sid, cp, cn, proj.distance_m, rank))
        out.append(feats)
    return out


def make_view(item: MatchedTrajectory | Trajectory, net: RoadNetwork, idx: SpatialIndex,
              bounds: NormalizationBounds, cfg: EncoderConfig) -> TrajectoryView:
    traj = item.trajectory if isinstance(item, MatchedTrajectory) else item
    route = np.asarray(item.route, dtype=np.int64) if isinstance(item, MatchedTrajectory) else None
    l = len(traj.points)
    lat = min_max_normalize([p.lat for p in traj.points], *bounds.lat)
    lng = min_max_normalize([p.lng for p in traj.points], *bounds.lng)
    ts = min_max_normalize([p.t for p in traj.points], *bounds.t)
    pts = np.stack([lat, lng, ts], axis=1).astype(np.float32)

    feats_per_point = candidate_features(traj, net, idx, cfg.delta_m)
    n_max = max(1, max(len(f) for f in feats_per_point))
    F = cfg.n_scalar_features
    cand_ids = np.zeros((l, n_max), dtype=np.int64)
    cand_feats = np.zeros((l, n_max, F), dtype=np.float32)
    cand_mask = np.zeros((l, n_max), dtype=bool)
    for i, feats in enumerate(feats_per_point):
        n = len(feats)
        for k, cf in enumerate(feats):
            cand_ids[i, k] = cf.segment_id
            row = [cf.cos_prev, cf.cos_next, cf.proj_dist_m / cfg.delta_m]
            if cfg.use_rank_feature:
                row.append(cf.rank / max(n - 1, 1))
            cand_feats[i, k] = row
        cand_mask[i, :n] = True
    return TrajectoryView(traj.id, pts, cand_ids, cand_feats, cand_mask, route)


@dataclass
class Batch:
    points: Tensor      # (B, L, 3)
    cand_ids: Tensor    # (B, L, N)
    cand_feats: Tensor  # (B, L, N, F)
    cand_mask: Tensor   # (B, L, N) bool
    row_mask: Tensor    # (B, L) bool
    routes: Tensor | None  # (B, L) int64, -1 padding
    lengths: list[int]
    ids: list[str]


def collate(views: list[TrajectoryView], dtype=torch.float32) -> Batch:
    B = len(views)
    L = max(v.length for v in views)
    N = max(v.cand_ids.shape[1] for v in views)
    F = views[0].cand_feats.shape[2]
    points = torch.zeros(B, L, 3, dtype=dtype)
    cand_ids = torch.zeros(B, L, N, dtype=torch.int64)
    cand_feats = torch.zeros(B, L, N, F, dtype=dtype)
    cand_mask = torch.zeros(B, L, N, dtype=torch.bool)
    row_mask = torch.zeros(B, L, dtype=torch.bool)
    routes = torch.full((B, L), -1, dtype=torch.int64)
    has_routes = all(v.route is not None for v in views)
    for b, v in enumerate(views):
        l, n = v.length, v.cand_ids.shape[1]
        points[b, :l] = torch.as_tensor(v.points, dtype=dtype)
        cand_ids[b, :l, :n] = torch.as_tensor(v.cand_ids)
        cand_feats[b, :l, :n] = torch.as_tensor(v.cand_feats, dtype=dtype)
        cand_mask[b, :l, :n] = torch.as_tensor(v.cand_mask)
        row_mask[b, :l] = True
        if v.route is not None:
            routes[b, :l] = torch.as_tensor(v.route)
    return Batch(points, cand_ids, cand_feats, cand_mask, row_mask,
                 routes if has_routes else None,
                 [v.length for v in views], [v.traj_id for v in views])


class TrajectoryEncoder(torch.nn.Module):
    def __init__(self, n_segments: int, cfg: EncoderConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.n_segments = n_segments
        d = cfg.d_emb
        self.point_proj = torch.nn.Linear(3, d)
        if cfg.point_encoder == "transformer":
            self.point_layers = torch.nn.ModuleList(
                TransformerEncoderLayer(d, cfg.n_heads) for _ in range(cfg.n_layers)
            )
            self.point_ffn = None
        elif cfg.point_encoder == "ffn":
            self.point_layers = None
            self.point_ffn = FFN(d, 2 * d, d)
        else:
            raise ValueError(f"unknown point encoder {cfg.point_encoder!r}")
        self.seg_embed = torch.nn.Parameter(torch.zeros(n_segments, d))
        self.seg_mlp = FFN(d + cfg.n_scalar_features, d, d)
        self.fusion_mlp = FFN(2 * d, cfg.d_a, 1)
        self.no_candidate = torch.nn.Parameter(torch.zeros(d))
        if rng is not None:
            self.reset_parameters(rng)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        init_module(self, rng)
        with torch.no_grad():
            self.seg_embed.copy_(torch.as_tensor(
                rng.normal(0.0, 0.02, size=(self.n_segments, self.cfg.d_emb)),
                dtype=self.seg_embed.dtype))
            self.no_candidate.copy_(torch.as_tensor(
                rng.normal(0.0, 0.02, size=(self.cfg.d_emb,)),
                dtype=self.no_candidate.dtype))

    def point_representation(self, points: Tensor, row_mask: Tensor | None = None) -> Tensor:
        p = self.point_proj(points)
        if self.point_layers is not None:
            for layer in self.point_layers:
                p = layer(p, key_mask=row_mask)
        else:
            p = self.point_ffn(p)
        return p

    def segment_embeddings(self, cand_ids: Tensor, cand_feats: Tensor) -> Tensor:
        e0 = self.seg_embed[cand_ids]                      # (B, L, N, d)
        e1 = torch.cat([e0, cand_feats], dim=-1)           # (B, L, N, d+F)
        return self.seg_mlp(e1)

    def fuse(self, point_repr: Tensor, cand_emb: Tensor, cand_mask: Tensor,
             return_weights: bool = False):
        B, L, N, d = cand_emb.shape
        if self.cfg.fusion == "attention":
            p_exp = point_repr.unsqueeze(2).expand(B, L, N, d)
            mu = self.fusion_mlp(torch.cat([p_exp, cand_emb], dim=-1)).squeeze(-1)  # (B,L,N)
            fill = torch.finfo(mu.dtype).min
            mu = mu.masked_fill(~cand_mask, fill)
            w = torch.softmax(mu, dim=-1)
        else:
            counts = cand_mask.sum(dim=-1, keepdim=True).clamp(min=1)
            w = cand_mask.to(cand_emb.dtype) / counts
        f = (w.unsqueeze(-1) * cand_emb).sum(dim=2)        # (B, L, d)
        empty = ~cand_mask.any(dim=-1)                     # (B, L)
        if empty.any():
            f = torch.where(empty.unsqueeze(-1), self.no_candidate.to(f.dtype).expand_as(f), f)
        if return_weights:
            return f, w
        return f

    def forward(self, batch: Batch) -> Tensor:
        """Condition embedding, shape (B, L, 2*d_emb)."""
        p = self.point_representation(batch.points, batch.row_mask)
        e = self.segment_embeddings(batch.cand_ids, batch.cand_feats)
        f = self.fuse(p, e, batch.cand_mask)
        return torch.cat([p, f], dim=-1)
