"""Differentiable building blocks: dense ops, attention, losses, Adam,
finite-difference verification, and the checkpoint container.

Tensors are torch; tests run in float64, training in float32.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

CHECKPOINT_MAGIC = b"MMCKPT01"


class NumericalError(Exception):
    """Raised when training or inference produces non-finite values."""


def assert_finite(x: Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericalError(f"{name} contains non-finite values")


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ W + b with explicit weights."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs W {tuple(W.shape)}")
    if b.shape[-1] != W.shape[1]:
        raise ValueError(f"shape mismatch: W {tuple(W.shape)} vs b {tuple(b.shape)}")
    assert_finite(x, "linear input")
    return x @ W + b


class MultiHeadAttention(torch.nn.Module):
    """Scaled dot-product attention with per-head projections and an
    output projection (no biases)."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.w_q = torch.nn.Linear(d_model, d_model, bias=False)
        self.w_k = torch.nn.Linear(d_model, d_model, bias=False)
        self.w_v = torch.nn.Linear(d_model, d_model, bias=False)
        self.w_o = torch.nn.Linear(d_model, d_model, bias=False)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None = None) -> Tensor:
        # q,k,v: (B, L, d_model); key_mask: (B, L) bool, True = valid
        B, L, _ = q.shape
        h, dh = self.n_heads, self.d_head
        qh = self.w_q(q).view(B, L, h, dh).transpose(1, 2)
        kh = self.w_k(k).view(B, L, h, dh).transpose(1, 2)
        vh = self.w_v(v).view(B, L, h, dh).transpose(1, 2)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            fill = torch.finfo(scores.dtype).min
            scores = scores.masked_fill(~key_mask[:, None, None, :], fill)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(B, L, self.d_model)
        return self.w_o(out)

    def attention_weights(self, q: Tensor, k: Tensor, key_mask: Tensor | None = None) -> Tensor:
        B, L, _ = q.shape
        h, dh = self.n_heads, self.d_head
        qh = self.w_q(q).view(B, L, h, dh).transpose(1, 2)
        kh = self.w_k(k).view(B, L, h, dh).transpose(1, 2)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            fill = torch.finfo(scores.dtype).min
            scores = scores.masked_fill(~key_mask[:, None, None, :], fill)
        return torch.softmax(scores, dim=-1)


class FFN(torch.nn.Module):
    """Two-layer MLP with ReLU: ReLU(x W + b) W' + b'."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.w1 = torch.nn.Linear(d_in, d_hidden)
        self.w2 = torch.nn.Linear(d_hidden, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.w2(torch.relu(self.w1(x)))


class TransformerEncoderLayer(torch.nn.Module):
    """Post-norm encoder layer: LayerNorm(X' + FFN(X')) with
    X' = LayerNorm(X + SelfAttention(X))."""

    def __init__(self, d_model: int, n_heads: int, d_ffn: int | None = None):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ffn = FFN(d_model, d_ffn or 4 * d_model, d_model)
        self.norm1 = torch.nn.LayerNorm(d_model)
        self.norm2 = torch.nn.LayerNorm(d_model)

    def forward(self, x: Tensor, key_mask: Tensor | None = None) -> Tensor:
        xp = self.norm1(x + self.attn(x, x, x, key_mask=key_mask))
        return self.norm2(xp + self.ffn(xp))


def sinusoidal_embedding(t: float, dim: int, *, dtype=None, device=None) -> Tensor:
    """Positional embedding of a scalar: 1-based index j gets
    cos(t / 10000^((j-1)/dim)) when j is odd, sin(...) when j is even."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    if t < 0:
        raise ValueError(f"embedded scalar must be non-negative, got {t}")
    dtype = dtype or torch.get_default_dtype()
    j = torch.arange(1, dim + 1, dtype=dtype, device=device)
    arg = t / torch.pow(torch.tensor(10000.0, dtype=dtype, device=device), (j - 1) / dim)
    return torch.where(j.long() % 2 == 1, torch.cos(arg), torch.sin(arg))


def cross_entropy(target_onehot: Tensor, logits: Tensor) -> Tensor:
    """Row-wise softmax cross entropy against one-hot targets, averaged
    over rows. Rejects targets that are not exactly one-hot."""
    if target_onehot.shape != logits.shape:
        raise ValueError(
            f"shape mismatch: target {tuple(target_onehot.shape)} vs logits {tuple(logits.shape)}"
        )
    with torch.no_grad():
        binary = ((target_onehot == 0) | (target_onehot == 1)).all()
        one_per_row = (target_onehot.sum(dim=-1) == 1).all()
        if not bool(binary and one_per_row):
            raise ValueError("target rows must be exactly one-hot")
    assert_finite(logits, "cross_entropy logits")
    log_z = torch.logsumexp(logits, dim=-1)
    picked = (logits * target_onehot).sum(dim=-1)
    return (log_z - picked).mean()


def adam_step(params: list[Tensor], grads: list[Tensor], state: "AdamState",
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction, in place."""
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data.add_(-lr * m_hat / (v_hat.sqrt() + eps))


@dataclass
class AdamState:
    m: list[Tensor]
    v: list[Tensor]
    step: int = 0


class Adam:
    """Minimal Adam over a parameter list; moments live in AdamState."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(
            m=[torch.zeros_like(p) for p in self.params],
            v=[torch.zeros_like(p) for p in self.params],
        )

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else None for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def finite_difference_check(loss_fn, params: list[Tensor], eps: float = 1e-6,
                            max_entries: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between autograd and central finite differences.

    loss_fn must be a deterministic scalar function of params. The error
    denominator is max(|analytic|, |numeric|, 1), so tiny gradients are
    compared absolutely. Checks every entry unless max_entries caps the
    per-tensor count (sampled with rng).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for p in params]

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.data.view(-1)
            n = flat.numel()
            if max_entries is not None and n > max_entries:
                if rng is None:
                    rng = np.random.default_rng(0)
                idxs = rng.choice(n, size=max_entries, replace=False)
            else:
                idxs = range(n)
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = loss_fn().item()
                flat[i] = orig - eps
                lo = loss_fn().item()
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                an = g.view(-1)[i].item()
                rel = abs(fd - an) / max(abs(fd), abs(an), 1.0)
                worst = max(worst, rel)
    return worst


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    bounds: dict
    config: dict
    config_hash: str


def save_checkpoint(path, params: dict[str, np.ndarray | Tensor], bounds: dict, config: dict) -> None:
    """Single-file container: magic, uint32 LE header length, JSON header
    (param names/shapes, bounds, config, config hash), then raw float32
    little-endian values concatenated in header order."""
    entries = []
    blobs = []
    for name in sorted(params):
        arr = params[name]
        if isinstance(arr, Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format": 1,
        "params": entries,
        "bounds": bounds,
        "config": config,
        "config_hash": config_hash(config),
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError(f"{path} truncated while reading {entry['name']}")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return Checkpoint(params=params, bounds=header["bounds"],
                      config=header["config"], config_hash=header["config_hash"])


def init_linear(layer: torch.nn.Linear, rng: np.random.Generator, zero: bool = False) -> None:
    """Deterministic init from a numpy stream: U(-1/sqrt(fan_in), +) weights,
    zero biases; `zero` zeroes everything (identity-at-init layers)."""
    if zero:
        with torch.no_grad():
            layer.weight.zero_()
            if layer.bias is not None:
                layer.bias.zero_()
        return
    fan_in = layer.weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=tuple(layer.weight.shape))
    with torch.no_grad():
        layer.weight.copy_(torch.as_tensor(w, dtype=layer.weight.dtype))
        if layer.bias is not None:
            layer.bias.zero_()


def init_module(module: torch.nn.Module, rng: np.random.Generator) -> None:
    """Init every Linear in a module tree from the numpy stream, in
    deterministic named order. LayerNorms keep their (1, 0) init."""
    for name, sub in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if isinstance(sub, torch.nn.Linear):
            init_linear(sub, rng)
