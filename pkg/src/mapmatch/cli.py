"""Command-line pipelines: generate / train / match / evaluate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
MAPMATCH_LOG=debug|info|warning controls log verbosity. A JSON config
file (--config) supplies defaults; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import data as data_mod
from . import evaluate as eval_mod
from . import shortcut
from .data import (DataError, load_matched, load_trajectories, save_routes,
                   save_trajectories, sparsify, split_dataset, substream)
from .encoder import EncoderConfig
from .geo import GeoPoint
from .hmm import HmmConfig, UnmatchableTrajectoryError
from .network import SpatialIndex, build_grid_network, load_network, save_network
from .nn import NumericalError

log = logging.getLogger("mapmatch")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise DataError(f"file not found: {p}")


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError as e:
        raise UsageError(f"bad --grid {text!r}, expected RxC like 5x5") from e


def cmd_generate(args) -> int:
    rows, cols = _parse_grid(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = build_grid_network(rows, cols, spacing_m=args.spacing,
                             origin=GeoPoint(args.origin_lat, args.origin_lng))
    matched = data_mod.generate_synthetic(net, args.n, args.noise, args.interval,
                                          args.seed, speed_mps=args.speed)
    save_network(net, out / "nodes.csv", out / "edges.csv")
    save_trajectories([m.trajectory for m in matched], out / "trajectories.csv")
    save_routes(matched, out / "routes.csv")
    log.info("wrote %d trajectories over %d segments to %s", len(matched),
             net.segment_count, out)
    print(f"generated {len(matched)} trajectories, |V|={net.node_count}, "
          f"|E|={net.segment_count} -> {out}")
    return 0


def _prepare_examples(base, r, include_dense, seed):
    if r is None:
        return list(base)
    sparse = [sparsify(m, r, seed) for m in base]
    return list(base) + sparse if include_dense else sparse


def cmd_train(args) -> int:
    _require_files(args.nodes, args.edges, args.trajectories, args.routes)
    net = load_network(args.nodes, args.edges)
    idx = SpatialIndex(net)
    matched = load_matched(args.trajectories, args.routes)
    split = split_dataset(matched, args.seed)
    train_base = split.train[:args.train_size] if args.train_size else split.train
    train_set = _prepare_examples(train_base, args.sparsify, args.include_dense, args.seed)
    valid_set = _prepare_examples(split.valid, args.sparsify, args.include_dense, args.seed)

    enc_cfg = EncoderConfig(d_emb=args.d_emb, delta_m=args.delta,
                            n_layers=args.enc_layers, n_heads=args.enc_heads,
                            d_a=args.d_a)
    dit_cfg = shortcut.DiTConfig(d_model=args.d_model, n_blocks=args.n_blocks,
                                 n_heads=args.dit_heads, mlp_ratio=args.mlp_ratio)
    tcfg = shortcut.TrainConfig(steps=args.steps, batch_size=args.batch_size,
                                lr=args.lr, warmup_flow_steps=args.warmup_k,
                                seed=args.seed, val_every=args.val_every,
                                threads=args.threads, variant=args.variant,
                                ce_step_scaled=args.ce_step_scaled,
                                combined_objective=args.combined_objective)
    result = shortcut.train(train_set, valid_set, net, idx, enc_cfg, dit_cfg, tcfg)
    shortcut.save_model(args.out, result.model, result.bounds, variant=args.variant)
    if args.metrics:
        _write_metrics(result.metrics, args.metrics)
    val = f"{result.best_val_acc:.4f}" if result.best_val_acc is not None else "n/a"
    print(f"trained {args.variant} for {args.steps} steps "
          f"(best val acc {val}) -> {args.out}")
    return 0


def _write_metrics(rows, path) -> None:
    import csv

    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "step", "L", "L_st", "L_ce", "val_acc"])
        for r in rows:
            w.writerow([r["epoch"], r["step"], repr(r["L"]), repr(r["L_st"]),
                        repr(r["L_ce"]), r["val_acc"]])


def cmd_match(args) -> int:
    _require_files(args.nodes, args.edges, args.trajectories)
    net = load_network(args.nodes, args.edges)
    idx = SpatialIndex(net)
    trajs = load_trajectories(args.trajectories)
    if args.sparsify is not None:
        if args.seed is None:
            raise UsageError("--sparsify needs --seed")
        fake = [data_mod.MatchedTrajectory(t, tuple([0] * len(t))) for t in trajs]
        trajs = [sparsify(m, args.sparsify, args.seed).trajectory for m in fake]
        if args.sparsified_out:
            save_trajectories(trajs, args.sparsified_out)

    if args.method == "hmm":
        cfg = HmmConfig(sigma_emission_m=args.sigma, beta_transition_m=args.beta,
                        candidate_delta_m=args.delta, max_route_search_m=args.max_route)
        matcher = eval_mod.make_matcher("hmm", net, idx, hmm_cfg=cfg)
    else:
        _require_files(args.checkpoint)
        model, bounds, _cfg = shortcut.load_model(args.checkpoint)
        if model.n_segments != net.segment_count:
            raise DataError(
                f"checkpoint was trained on |E|={model.n_segments}, "
                f"network has |E|={net.segment_count}")
        matcher = eval_mod.make_matcher("diffmm", net, idx, model=model, bounds=bounds,
                                        M=args.steps, seed=args.seed or 0,
                                        restrict_candidates=args.restrict_candidates)
    torch.set_num_threads(args.threads)
    routes = matcher(trajs)
    bad = [t.id for t, r in zip(trajs, routes) if r is None]
    if bad:
        raise DataError(f"unmatchable trajectories: {bad[:10]}")
    matched = [data_mod.MatchedTrajectory(t, tuple(r)) for t, r in zip(trajs, routes)]
    save_routes(matched, args.out)
    if args.geojson:
        eval_mod.export_geojson(trajs, routes, net, args.geojson)
    print(f"matched {len(trajs)} trajectories with {args.method} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    _require_files(args.truth, args.pred)
    truth = data_mod.load_routes(args.truth)
    pred = data_mod.load_routes(args.pred)
    missing = sorted(set(truth) - set(pred))
    extra = sorted(set(pred) - set(truth))
    if missing or extra:
        raise DataError(f"trajectory ids differ: missing from prediction {missing[:10]}, "
                        f"unexpected in prediction {extra[:10]}")
    rows = []
    for tid in truth:
        acc = eval_mod.accuracy(truth[tid], pred[tid])
        rows.append((tid, len(truth[tid]), acc, ""))
    report = eval_mod.EvalReport(
        per_trajectory=rows,
        mean_accuracy=sum(r[2] for r in rows) / len(rows) if rows else 0.0,
        seconds_per_1000=0.0,
        config_fingerprint="",
    )
    if args.report:
        eval_mod.write_report_csv(report, args.report)
    print(eval_mod.summarize(report))
    return 0


def build_parser() -> tuple[Parser, list[argparse.ArgumentParser]]:
    p = Parser(prog="mapmatch", description=__doc__,
               formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="JSON file with flag defaults")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a grid city with trajectories")
    g.add_argument("--grid", default="5x5", help="RxC intersections, e.g. 8x8")
    g.add_argument("--spacing", type=float, default=200.0, help="block size, meters")
    g.add_argument("--n", type=int, default=200, help="number of trajectories")
    g.add_argument("--noise", type=float, default=20.0, help="GPS noise sigma, meters")
    g.add_argument("--interval", type=float, default=15.0, help="sampling interval, seconds")
    g.add_argument("--speed", type=float, default=10.0, help="travel speed, m/s")
    g.add_argument("--origin-lat", type=float, default=41.14)
    g.add_argument("--origin-lng", type=float, default=-8.62)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the shortcut-diffusion matcher")
    t.add_argument("--nodes", required=True)
    t.add_argument("--edges", required=True)
    t.add_argument("--trajectories", required=True)
    t.add_argument("--routes", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="per-step metrics CSV path")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--warmup-k", type=int, default=500,
                   help="flow-target batches before self-consistency")
    t.add_argument("--val-every", type=int, default=100)
    t.add_argument("--variant", choices=shortcut.VARIANTS, default="full")
    t.add_argument("--train-size", type=int, help="subsample the training split")
    t.add_argument("--sparsify", type=float, help="train-time sparsification ratio in (0,1)")
    t.add_argument("--include-dense", action="store_true",
                   help="with --sparsify, keep the dense views too")
    t.add_argument("--d-emb", type=int, default=128)
    t.add_argument("--delta", type=float, default=50.0)
    t.add_argument("--enc-layers", type=int, default=2)
    t.add_argument("--enc-heads", type=int, default=4)
    t.add_argument("--d-a", type=int, default=64)
    t.add_argument("--d-model", type=int, default=512)
    t.add_argument("--n-blocks", type=int, default=2)
    t.add_argument("--dit-heads", type=int, default=4)
    t.add_argument("--mlp-ratio", type=int, default=4)
    t.add_argument("--ce-step-scaled", action="store_true",
                   help="scale the CE logits step by (1-t)")
    t.add_argument("--combined-objective", action="store_true",
                   help="add the flow term to every consistency batch")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("match", help="match trajectories to road segments")
    m.add_argument("--nodes", required=True)
    m.add_argument("--edges", required=True)
    m.add_argument("--trajectories", required=True)
    m.add_argument("--method", choices=("hmm", "diffmm"), required=True)
    m.add_argument("--checkpoint", help="model checkpoint (diffmm)")
    m.add_argument("--steps", type=int, default=1, help="Euler steps M (diffmm)")
    m.add_argument("--sparsify", type=float, help="sparsify inputs first, ratio in (0,1)")
    m.add_argument("--sparsified-out", help="write the sparsified trajectories here")
    m.add_argument("--restrict-candidates", action="store_true",
                   help="argmax only over each point's candidate set")
    m.add_argument("--seed", type=int)
    m.add_argument("--sigma", type=float, default=20.0, help="HMM emission sigma, meters")
    m.add_argument("--beta", type=float, default=200.0, help="HMM transition beta, meters")
    m.add_argument("--delta", type=float, default=50.0, help="candidate radius, meters")
    m.add_argument("--max-route", type=float, default=5000.0, help="route search cap, meters")
    m.add_argument("--out", required=True, help="routes CSV path")
    m.add_argument("--geojson", help="also write a GeoJSON FeatureCollection")
    m.add_argument("--threads", type=int, default=1)
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("evaluate", help="score predicted routes against ground truth")
    e.add_argument("--truth", required=True, help="ground-truth routes CSV")
    e.add_argument("--pred", required=True, help="predicted routes CSV")
    e.add_argument("--report", help="per-trajectory report CSV path")
    e.set_defaults(func=cmd_evaluate)
    return p, [g, t, m, e]


def main(argv=None) -> int:
    level = os.environ.get("MAPMATCH_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser, subparsers = build_parser()
    args, remaining = parser.parse_known_args(argv)
    if args.config:
        try:
            with open(args.config) as f:
                defaults = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            print(f"mapmatch: error: bad config file: {e}", file=sys.stderr)
            return 1
        parser.set_defaults(**defaults)
        for sp in subparsers:
            sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    elif remaining:
        parser.error(f"unrecognized arguments: {' '.join(remaining)}")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mapmatch: error: {e}", file=sys.stderr)
        return 1
    except (DataError, UnmatchableTrajectoryError, FileNotFoundError) as e:
        print(f"mapmatch: data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"mapmatch: numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
