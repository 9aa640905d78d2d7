"""Accuracy scoring, matcher evaluation with timing, ablations, and the
training-size robustness protocol.

Report CSV columns: traj_id,length,accuracy,flag
(flag is empty or "unmatchable"; unmatchable trajectories score 0 so the
denominator stays comparable across methods).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import shortcut
from .data import MatchedTrajectory, Trajectory
from .encoder import make_view
from .hmm import HmmConfig, UnmatchableTrajectoryError, match_hmm
from .network import RoadNetwork, SpatialIndex
from .nn import config_hash


def accuracy(r_true, r_pred) -> float:
    """Fraction of positions whose predicted segment id matches exactly."""
    if len(r_true) != len(r_pred):
        raise ValueError(f"length mismatch: truth {len(r_true)} vs prediction {len(r_pred)}")
    if len(r_true) == 0:
        raise ValueError("empty route")
    hits = sum(1 for a, b in zip(r_true, r_pred) if a == b)
    return hits / len(r_true)


@dataclass
class EvalReport:
    per_trajectory: list[tuple[str, int, float, str]]  # id, length, accuracy, flag
    mean_accuracy: float
    seconds_per_1000: float
    config_fingerprint: str
    n_unmatchable: int = 0
    extras: dict = field(default_factory=dict)


def make_matcher(method: str, net: RoadNetwork, idx: SpatialIndex, *,
                 hmm_cfg: HmmConfig | None = None,
                 model: "shortcut.MatcherModel | None" = None,
                 bounds=None, M: int = 1, seed: int = 0,
                 restrict_candidates: bool = False, batch_size: int = 64):
    """Callable list[Trajectory] -> list[route | None] for a method name.
    None marks an unmatchable trajectory."""
    if method == "hmm":
        cfg = hmm_cfg or HmmConfig()

        def run(trajs: list[Trajectory]):
            out = []
            for traj in trajs:
                try:
                    out.append(match_hmm(traj, net, idx, cfg))
                except UnmatchableTrajectoryError:
                    out.append(None)
            return out

        return run
    if method == "diffmm":
        if model is None or bounds is None:
            raise ValueError("diffmm matcher needs a model and normalization bounds")

        def run(trajs: list[Trajectory]):
            views = [make_view(t, net, idx, bounds, model.enc_cfg) for t in trajs]
            return shortcut.infer_views(model, views, net.segment_count, M=M, seed=seed,
                                        batch_size=batch_size,
                                        restrict_candidates=restrict_candidates)

        return run
    raise ValueError(f"unknown matcher {method!r}, expected 'hmm' or 'diffmm'")


def run_evaluation(matcher, test_split: list[MatchedTrajectory], net: RoadNetwork,
                   idx: SpatialIndex, config: dict | None = None,
                   timing_threads: int = 1) -> EvalReport:
    """Match every test trajectory, score each one, and time the matching
    pass (single-threaded, network/index construction excluded)."""
    trajs = [m.trajectory for m in test_split]
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(timing_threads)
    try:
        start = time.perf_counter()
        predictions = matcher(trajs)
        elapsed = time.perf_counter() - start
    finally:
        torch.set_num_threads(prev_threads)

    rows = []
    n_unmatchable = 0
    for m, pred in zip(test_split, predictions):
        if pred is None:
            rows.append((m.id, len(m), 0.0, "unmatchable"))
            n_unmatchable += 1
        else:
            rows.append((m.id, len(m), accuracy(m.route, pred), ""))
    mean = float(np.mean([r[2] for r in rows])) if rows else 0.0
    return EvalReport(
        per_trajectory=rows,
        mean_accuracy=mean,
        seconds_per_1000=elapsed / max(len(trajs), 1) * 1000.0,
        config_fingerprint=config_hash(config or {}),
        n_unmatchable=n_unmatchable,
    )


def run_ablation(variant: str, train_data: list[MatchedTrajectory],
                 valid_data: list[MatchedTrajectory], test_data: list[MatchedTrajectory],
                 net: RoadNetwork, idx: SpatialIndex,
                 enc_cfg=None, dit_cfg=None, tcfg=None, M: int = 1,
                 infer_seed: int = 0) -> EvalReport:
    """Train one ablation variant and evaluate it on the given test set.

    no_trans swaps the point Transformer for an FFN, no_attn swaps the
    candidate attention for a plain mean, no_shortcut drops the step-size
    conditioning (pure flow matching, M-step Euler inference)."""
    if variant not in shortcut.VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {shortcut.VARIANTS}")
    tcfg = tcfg or shortcut.TrainConfig()
    tcfg = shortcut.dataclass_replace(tcfg, variant=variant)
    result = shortcut.train(train_data, valid_data, net, idx, enc_cfg, dit_cfg, tcfg)
    matcher = make_matcher("diffmm", net, idx, model=result.model, bounds=result.bounds,
                           M=M, seed=infer_seed)
    report = run_evaluation(matcher, test_data, net, idx,
                            config=shortcut.model_config_dict(result.model, variant))
    report.extras["variant"] = variant
    report.extras["best_val_acc"] = result.best_val_acc
    return report


def run_robustness(train_sizes: list[int], train_data: list[MatchedTrajectory],
                   valid_data: list[MatchedTrajectory], test_data: list[MatchedTrajectory],
                   net: RoadNetwork, idx: SpatialIndex,
                   enc_cfg=None, dit_cfg=None, tcfg=None, M: int = 1) -> list[tuple[int, float]]:
    """Retrain on the first `size` training trajectories per entry (the
    split is already seed-shuffled) and evaluate on the fixed test set."""
    for size in train_sizes:
        if size > len(train_data):
            raise ValueError(f"train size {size} exceeds available {len(train_data)}")
    rows = []
    for size in train_sizes:
        result = shortcut.train(train_data[:size], valid_data, net, idx,
                                enc_cfg, dit_cfg, tcfg)
        matcher = make_matcher("diffmm", net, idx, model=result.model,
                               bounds=result.bounds, M=M, seed=tcfg.seed if tcfg else 0)
        report = run_evaluation(matcher, test_data, net, idx)
        rows.append((size, report.mean_accuracy))
    return rows


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["traj_id", "length", "accuracy", "flag"])
        for tid, length, acc, flag in report.per_trajectory:
            w.writerow([tid, length, f"{acc:.6f}", flag])


def summarize(report: EvalReport) -> str:
    lines = [
        f"trajectories evaluated: {len(report.per_trajectory)}",
        f"mean accuracy:          {report.mean_accuracy:.4f}",
        f"inference seconds/1000: {report.seconds_per_1000:.2f}",
        f"unmatchable:            {report.n_unmatchable}",
        f"config fingerprint:     {report.config_fingerprint}",
    ]
    return "\n".join(lines)


def export_geojson(trajs: list[Trajectory], routes: list[list[int]],
                   net: RoadNetwork, path) -> None:
    """FeatureCollection with one MultiPoint per trajectory and one
    MultiLineString per matched route (consecutive duplicates collapsed)."""
    features = []
    for traj, route in zip(trajs, routes):
        features.append({
            "type": "Feature",
            "geometry": {
                "type": "MultiPoint",
                "coordinates": [[p.lng, p.lat] for p in traj.points],
            },
            "properties": {"traj_id": traj.id, "kind": "trajectory"},
        })
        seg_ids = [sid for k, sid in enumerate(route) if k == 0 or sid != route[k - 1]]
        features.append({
            "type": "Feature",
            "geometry": {
                "type": "MultiLineString",
                "coordinates": [
                    [[p.lng, p.lat] for p in net.segments[sid].polyline] for sid in seg_ids
                ],
            },
            "properties": {"traj_id": traj.id, "kind": "matched_route",
                           "segment_ids": seg_ids},
        })
    with open(path, "w") as f:
        json.dump({"type": "FeatureCollection", "features": features}, f)
