"""Conditional shortcut-diffusion matcher.

The denoiser is a stack of DiT blocks over the trajectory axis: the
per-point condition embedding (projected to d_model, plus sinusoidal
embeddings of time t and step size d) modulates normalization, attention
and FFN through learned scale/shift/gate vectors. Training mixes a
flow-matching warmup (velocity target x1 - x0 at d=0) with
self-consistency targets (one step of size 2d must equal the average of
two chained steps of size d); inference integrates from Gaussian noise in
M Euler steps (default 1) and argmaxes each row over segments.
"""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import Tensor

from .data import MatchedTrajectory, Trajectory, substream
from .encoder import (Batch, EncoderConfig, NormalizationBounds, TrajectoryEncoder,
                      TrajectoryView, collate, make_view)
from .network import RoadNetwork, SpatialIndex
from .nn import (FFN, MultiHeadAttention, NumericalError, cross_entropy, Adam,
                 init_linear, init_module, load_checkpoint, save_checkpoint,
                 sinusoidal_embedding)

VARIANTS = ("full", "no_trans", "no_attn", "no_shortcut")


@dataclass(frozen=True)
class DiTConfig:
    d_model: int = 512
    n_blocks: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    step_conditioning: bool = True  # False drops SinEmb(d) (ablation: plain flow matching)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.n_heads}")


def interpolate(x0: Tensor, x1: Tensor, t: float) -> Tensor:
    """Linear interpolation (1-t)*x0 + t*x1 with exact endpoints."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs x1 {tuple(x1.shape)}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    if t == 0.0:
        return x0.clone()
    if t == 1.0:
        return x1.clone()
    return (1.0 - t) * x0 + t * x1


class DiTBlock(torch.nn.Module):
    """Transformer block whose norm/attention/FFN are modulated by the
    condition: x' = gamma * Norm(x) + beta, x = x + alpha * SubLayer(x')."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ffn = FFN(d_model, mlp_ratio * d_model, d_model)
        self.norm1 = torch.nn.LayerNorm(d_model, elementwise_affine=False)
        self.norm2 = torch.nn.LayerNorm(d_model, elementwise_affine=False)
        self.modulation = FFN(d_model, d_model, 6 * d_model)

    def forward(self, h: Tensor, cond: Tensor, key_mask: Tensor | None = None) -> Tensor:
        g1, b1, a1, g2, b2, a2 = self.modulation(cond).chunk(6, dim=-1)
        hn = g1 * self.norm1(h) + b1
        h = h + a1 * self.attn(hn, hn, hn, key_mask=key_mask)
        hn = g2 * self.norm2(h) + b2
        return h + a2 * self.ffn(hn)


class ShortcutDenoiser(torch.nn.Module):
    """Predicts the step direction s(x_t, t, d, C), shape (B, L, |E|)."""

    def __init__(self, n_segments: int, d_cond: int, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        self.n_segments = n_segments
        self.in_proj = torch.nn.Linear(n_segments, cfg.d_model)
        self.cond_proj = torch.nn.Linear(d_cond, cfg.d_model)
        self.blocks = torch.nn.ModuleList(
            DiTBlock(cfg.d_model, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_blocks)
        )
        self.out_proj = torch.nn.Linear(cfg.d_model, n_segments)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        init_module(self, rng)
        d = self.cfg.d_model
        one = torch.ones(d)
        zero = torch.zeros(d)
        # gamma=1, beta=0, alpha=0 at init: each block starts as identity
        # while keeping the x' = gamma*Norm(x) + beta form.
        bias = torch.cat([one, zero, zero, one, zero, zero])
        for block in self.blocks:
            init_linear(block.modulation.w2, rng, zero=True)
            with torch.no_grad():
                block.modulation.w2.bias.copy_(bias.to(block.modulation.w2.bias.dtype))
        init_linear(self.out_proj, rng, zero=True)

    def forward(self, x: Tensor, t: float, d_step: float, C: Tensor,
                row_mask: Tensor | None = None) -> Tensor:
        h = self.in_proj(x)
        cond = self.cond_proj(C) + sinusoidal_embedding(t, self.cfg.d_model, dtype=C.dtype)
        if self.cfg.step_conditioning:
            cond = cond + sinusoidal_embedding(d_step, self.cfg.d_model, dtype=C.dtype)
        for block in self.blocks:
            h = block(h, cond, key_mask=row_mask)
        return self.out_proj(h)


class MatcherModel(torch.nn.Module):
    def __init__(self, n_segments: int, enc_cfg: EncoderConfig, dit_cfg: DiTConfig,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.n_segments = n_segments
        self.enc_cfg = enc_cfg
        self.dit_cfg = dit_cfg
        self.encoder = TrajectoryEncoder(n_segments, enc_cfg)
        self.denoiser = ShortcutDenoiser(n_segments, enc_cfg.d_cond, dit_cfg)
        if rng is not None:
            self.reset_parameters(rng)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.encoder.reset_parameters(rng)
        self.denoiser.reset_parameters(rng)


def variant_configs(variant: str, enc_cfg: EncoderConfig, dit_cfg: DiTConfig):
    """Apply an ablation variant to the base configs."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if variant == "no_trans":
        enc_cfg = dataclass_replace(enc_cfg, point_encoder="ffn")
    elif variant == "no_attn":
        enc_cfg = dataclass_replace(enc_cfg, fusion="mean")
    elif variant == "no_shortcut":
        dit_cfg = dataclass_replace(dit_cfg, step_conditioning=False)
    return enc_cfg, dit_cfg


def dataclass_replace(obj, **kw):
    d = asdict(obj)
    d.update(kw)
    return type(obj)(**d)


def shortcut_step(denoiser, x: Tensor, t: float, d_step: float, C: Tensor,
                  row_mask: Tensor | None = None) -> Tensor:
    """Euler step x + s(x, t, d, C) * d; refuses to overshoot t=1."""
    if t + d_step > 1.0 + 1e-9:
        raise ValueError(f"step overshoots t=1: t={t}, d={d_step}")
    if d_step == 0.0:
        return x.clone()
    return x + denoiser(x, t, d_step, C, row_mask) * d_step


def self_consistency_target(denoiser, x: Tensor, t: float, d_step: float, C: Tensor,
                            row_mask: Tensor | None = None) -> Tensor:
    """(s(x_t,t,d) + s(x_{t+d},t+d,d)) / 2, detached: targets are labels."""
    if t + 2 * d_step > 1.0 + 1e-9:
        raise ValueError(f"consistency target overshoots t=1: t={t}, 2d={2 * d_step}")
    with torch.no_grad():
        s_t = denoiser(x, t, d_step, C, row_mask)
        x_next = x + s_t * d_step
        s_next = denoiser(x_next, t + d_step, d_step, C, row_mask)
        return (s_t + s_next) / 2


def one_hot_routes(routes: Tensor, n_segments: int, dtype=torch.float32) -> Tensor:
    """(B, L) segment ids (-1 padding) -> (B, L, |E|) one-hot rows.
    Padded rows come out as valid one-hots but are always masked out."""
    clamped = routes.clamp(min=0)
    return torch.nn.functional.one_hot(clamped, n_segments).to(dtype)


def loss_terms(denoiser, C: Tensor, x1: Tensor, row_mask: Tensor, x0: Tensor,
               t: float, d_step: float, mode: str, ce_step_scaled: bool = False):
    """(L, L_st, L_ce) for one batch. mode 'flow' uses the velocity target
    x1 - x0 at d=0; 'consistency' matches s(.,.,2d) against the averaged
    two-step target, with the cross-entropy supervising s at step d."""
    x_t = interpolate(x0, x1, t)
    if mode == "flow":
        s_t = denoiser(x_t, t, 0.0, C, row_mask)
        s_2d = s_t
        target = x1 - x0
    elif mode == "consistency":
        s_t = denoiser(x_t, t, d_step, C, row_mask)
        with torch.no_grad():
            x_next = x_t + s_t * d_step
            s_next = denoiser(x_next, t + d_step, d_step, C, row_mask)
            target = (s_t + s_next) / 2
        s_2d = denoiser(x_t, t, 2 * d_step, C, row_mask)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    l_st = ((s_2d - target) ** 2)[row_mask].mean()
    logits = x_t + s_t * (1.0 - t) if ce_step_scaled else x_t + s_t
    l_ce = cross_entropy(x1[row_mask], logits[row_mask])
    return l_st + l_ce, l_st, l_ce


def compute_loss(model: MatcherModel, batch: Batch, x0: Tensor, t: float,
                 d_step: float, mode: str, ce_step_scaled: bool = False):
    if batch.routes is None:
        raise ValueError("loss needs ground-truth routes in the batch")
    C = model.encoder(batch)
    x1 = one_hot_routes(batch.routes, model.n_segments, dtype=x0.dtype)
    return loss_terms(model.denoiser, C, x1, batch.row_mask, x0, t, d_step,
                      mode, ce_step_scaled)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    warmup_flow_steps: int = 500
    seed: int = 0
    val_every: int = 100
    val_max: int = 128
    threads: int = 1
    t_grid: int = 8
    consistency_step: float = 0.5
    ce_step_scaled: bool = False
    combined_objective: bool = False
    variant: str = "full"


@dataclass
class TrainResult:
    model: MatcherModel
    bounds: NormalizationBounds
    metrics: list[dict]
    best_val_acc: float | None
    enc_cfg: EncoderConfig
    dit_cfg: DiTConfig
    variant: str


def _draw_schedule(rng: np.random.Generator, tcfg: TrainConfig, mode: str) -> tuple[float, float]:
    grid = [i / tcfg.t_grid for i in range(tcfg.t_grid)]
    if mode == "flow":
        return float(rng.choice(grid)), 0.0
    d = tcfg.consistency_step
    ok = [g for g in grid if g + 2 * d <= 1.0 + 1e-9]
    return float(rng.choice(ok)), d


def train(train_data: list[MatchedTrajectory], valid_data: list[MatchedTrajectory],
          net: RoadNetwork, idx: SpatialIndex,
          enc_cfg: EncoderConfig | None = None, dit_cfg: DiTConfig | None = None,
          tcfg: TrainConfig | None = None) -> TrainResult:
    """Joint training of encoder and denoiser per the shortcut schedule:
    the first warmup_flow_steps batches use the flow target with d=0,
    later batches use self-consistency targets (unless the variant drops
    step conditioning, which trains pure flow matching throughout)."""
    if not train_data:
        raise ValueError("training split is empty")
    enc_cfg = enc_cfg or EncoderConfig()
    dit_cfg = dit_cfg or DiTConfig()
    tcfg = tcfg or TrainConfig()
    enc_cfg, dit_cfg = variant_configs(tcfg.variant, enc_cfg, dit_cfg)
    torch.set_num_threads(tcfg.threads)

    bounds = NormalizationBounds.from_trajectories([m.trajectory for m in train_data])
    views = [make_view(m, net, idx, bounds, enc_cfg) for m in train_data]
    val_views = [make_view(m, net, idx, bounds, enc_cfg) for m in valid_data[:tcfg.val_max]]

    model = MatcherModel(net.segment_count, enc_cfg, dit_cfg,
                         rng=substream(tcfg.seed, "init"))
    opt = Adam(model.parameters(), lr=tcfg.lr)
    rng_data = substream(tcfg.seed, "data")
    rng_noise = substream(tcfg.seed, "noise")

    pure_flow = not dit_cfg.step_conditioning
    metrics: list[dict] = []
    best: tuple[float, dict] | None = None
    n = len(views)

    for step in range(1, tcfg.steps + 1):
        mode = "flow" if (pure_flow or step <= tcfg.warmup_flow_steps) else "consistency"
        idxs = rng_data.integers(0, n, size=tcfg.batch_size)
        t_val, d_val = _draw_schedule(rng_data, tcfg, mode)
        batch = collate([views[i] for i in idxs])
        B, L = batch.row_mask.shape
        x0 = torch.as_tensor(
            rng_noise.standard_normal((B, L, net.segment_count), dtype=np.float32))

        loss, l_st, l_ce = compute_loss(model, batch, x0, t_val, d_val, mode,
                                        tcfg.ce_step_scaled)
        if tcfg.combined_objective and mode == "consistency":
            flow_loss, f_st, f_ce = compute_loss(model, batch, x0, t_val, 0.0, "flow",
                                                 tcfg.ce_step_scaled)
            loss = loss + f_st  # Eq-4-style combined target: add the flow term
            l_st = l_st + f_st
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite loss at step {step}: L_st={l_st.item()}, L_ce={l_ce.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        row = {"epoch": (step * tcfg.batch_size) // n, "step": step,
               "L": float(loss.item()), "L_st": float(l_st.item()),
               "L_ce": float(l_ce.item()), "val_acc": ""}
        if val_views and (step % tcfg.val_every == 0 or step == tcfg.steps):
            acc = _validation_accuracy(model, val_views, net.segment_count, tcfg.seed)
            row["val_acc"] = f"{acc:.6f}"
            if best is None or acc > best[0]:
                best = (acc, copy.deepcopy(model.state_dict()))
        metrics.append(row)

    if best is not None:
        model.load_state_dict(best[1])
    return TrainResult(model=model, bounds=bounds, metrics=metrics,
                       best_val_acc=best[0] if best else None,
                       enc_cfg=enc_cfg, dit_cfg=dit_cfg, variant=tcfg.variant)


@torch.no_grad()
def _validation_accuracy(model: MatcherModel, views: list[TrajectoryView],
                         n_segments: int, seed: int) -> float:
    routes = infer_views(model, views, n_segments, M=1, seed=seed,
                         noise_stream="valnoise")
    accs = []
    for v, pred in zip(views, routes):
        truth = v.route
        accs.append(float(np.mean(np.asarray(pred) == truth)))
    return float(np.mean(accs))


@torch.no_grad()
def infer_views(model: MatcherModel, views: list[TrajectoryView], n_segments: int,
                M: int = 1, seed: int = 0, batch_size: int = 64,
                restrict_candidates: bool = False,
                noise_stream: str = "noise/infer") -> list[list[int]]:
    """M-step Euler integration from Gaussian noise, then per-row argmax
    (ties go to the lowest segment id)."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    d = 1.0 / M
    out: list[list[int]] = []
    for start in range(0, len(views), batch_size):
        chunk = views[start:start + batch_size]
        batch = collate(chunk)
        C = model.encoder(batch)
        B, L = batch.row_mask.shape
        rng = substream(seed, f"{noise_stream}/{start}")
        x = torch.as_tensor(rng.standard_normal((B, L, n_segments), dtype=np.float32))
        t = 0.0
        for _ in range(M):
            x = shortcut_step(model.denoiser, x, t, d, C, batch.row_mask)
            t += d
        scores = x.numpy()
        if restrict_candidates:
            scores = _mask_non_candidates(scores, batch)
        for b, view in enumerate(chunk):
            rows = scores[b, :view.length]
            out.append(np.argmax(rows, axis=1).astype(int).tolist())
    return out


def _mask_non_candidates(scores: np.ndarray, batch: Batch) -> np.ndarray:
    """Restrict the argmax to each point's candidate set; points with no
    candidates keep the full-row argmax."""
    masked = np.full_like(scores, -np.inf)
    ids = batch.cand_ids.numpy()
    mask = batch.cand_mask.numpy()
    B, L, N = ids.shape
    for b in range(B):
        for i in range(L):
            sel = ids[b, i][mask[b, i]]
            if sel.size:
                masked[b, i, sel] = scores[b, i, sel]
            else:
                masked[b, i] = scores[b, i]
    return masked


def infer(traj: Trajectory, net: RoadNetwork, idx: SpatialIndex, model: MatcherModel,
          bounds: NormalizationBounds, M: int = 1, seed: int = 0,
          restrict_candidates: bool = False) -> list[int]:
    view = make_view(traj, net, idx, bounds, model.enc_cfg)
    return infer_views(model, [view], net.segment_count, M=M, seed=seed,
                       restrict_candidates=restrict_candidates)[0]


def model_config_dict(model: MatcherModel, variant: str) -> dict:
    return {
        "n_segments": model.n_segments,
        "variant": variant,
        "encoder": asdict(model.enc_cfg),
        "dit": asdict(model.dit_cfg),
    }


def save_model(path, model: MatcherModel, bounds: NormalizationBounds,
               variant: str = "full") -> None:
    params = {name: p.detach() for name, p in model.named_parameters()}
    save_checkpoint(path, params, bounds.as_dict(), model_config_dict(model, variant))


def load_model(path) -> tuple[MatcherModel, NormalizationBounds, dict]:
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    enc_cfg = EncoderConfig(**cfg["encoder"])
    dit_cfg = DiTConfig(**cfg["dit"])
    model = MatcherModel(cfg["n_segments"], enc_cfg, dit_cfg)
    state = {name: torch.as_tensor(arr) for name, arr in ckpt.params.items()}
    model.load_state_dict(state)
    return model, NormalizationBounds.from_dict(ckpt.bounds), cfg
