"""Transformer building blocks, losses, optimizer, and gradient verification.

Blocks are written at the projection/matmul level on top of torch so every
architectural choice is explicit; autograd supplies analytic gradients and
``grad_check`` verifies them against central finite differences.  Everything
runs on CPU; float32 for training, float64 for tight gradient checks.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch
from torch import nn


class NeuralError(ValueError):
    pass


class ShapeMismatch(NeuralError):
    pass


class NonFiniteValue(NeuralError):
    pass


class IndexOutOfRange(NeuralError):
    pass


class SequenceTooLong(NeuralError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 64
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers,
               self.d_ff, self.max_len) < 1:
            raise NeuralError("all encoder dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ShapeMismatch(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise NeuralError("dropout must lie in [0, 1)")


def assert_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteValue(f"{what} contains NaN/Inf")
    return tensor


def scaled_dot_attention(q, k, v, key_mask=None, causal=False):
    """Attention core: softmax(q k^T / sqrt(d)) v.

    q: (..., Tq, d); k, v: (..., Tk, d); key_mask: (B, Tk) bool, True = keep.
    With a single unmasked key the output equals that key's value row.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        expand = key_mask[:, None, None, :] if scores.dim() == 4 else key_mask[:, None, :]
        scores = scores.masked_fill(~expand, float("-inf"))
    if causal:
        t_q, t_k = scores.shape[-2], scores.shape[-1]
        future = torch.triu(
            torch.ones(t_q, t_k, dtype=torch.bool, device=scores.device), diagonal=1
        )
        scores = scores.masked_fill(future, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ShapeMismatch(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)
        self.w_o = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, key_value, key_mask=None, causal=False):
        q = self._split(self.w_q(query))
        k = self._split(self.w_k(key_value))
        v = self._split(self.w_v(key_value))
        ctx = scaled_dot_attention(q, k, v, key_mask=key_mask, causal=causal)
        b, _, t, _ = ctx.shape
        ctx = ctx.transpose(1, 2).reshape(b, t, self.n_heads * self.d_head)
        return self.dropout(self.w_o(ctx))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff)
        self.lin2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.dropout(self.lin2(torch.nn.functional.gelu(self.lin1(x))))


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x, mask=None):
        x = self.norm1(x + self.attn(x, x, key_mask=mask))
        return self.norm2(x + self.ff(x))


class DecoderLayer(nn.Module):
    """Post-norm decoder layer: causal self-attention, then cross-attention."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, x, memory, memory_mask=None):
        x = self.norm1(x + self.self_attn(x, x, causal=True))
        x = self.norm2(x + self.cross_attn(x, memory, key_mask=memory_mask))
        return self.norm3(x + self.ff(x))


class TransformerEncoder(nn.Module):
    """Token + learned position embeddings, a CLS slot, and encoder layers.

    forward(ids, mask) returns (h_cls, states): the representation of the
    prepended CLS position and one state per input token.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_len + 1, config.d_model)
        self.dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.d_ff, config.dropout)
            for _ in range(config.n_layers)
        )

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None):
        if ids.dim() != 2:
            raise ShapeMismatch(f"ids must be (batch, time), got {tuple(ids.shape)}")
        b, t = ids.shape
        if t + 1 > self.config.max_len + 1:
            raise SequenceTooLong(f"{t} tokens exceeds max_len {self.config.max_len}")
        if mask is None:
            mask = torch.ones(b, t, dtype=torch.bool, device=ids.device)
        cls_ids = torch.zeros(b, 1, dtype=torch.long, device=ids.device)
        full_ids = torch.cat([cls_ids, ids], dim=1)
        full_mask = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=ids.device), mask], dim=1)
        positions = torch.arange(t + 1, device=ids.device).unsqueeze(0)
        x = self.dropout(self.tok_emb(full_ids) + self.pos_emb(positions))
        for layer in self.layers:
            x = layer(x, mask=full_mask)
        assert_finite(x, "encoder states")
        return x[:, 0], x[:, 1:]


class TransformerDecoder(nn.Module):
    """Autoregressive decoder over a target vocabulary with output projection."""

    def __init__(self, vocab_size: int, d_model: int, n_heads: int, n_layers: int,
                 d_ff: int, max_len: int, dropout: float = 0.0, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed + 1)
        self.max_len = max_len
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Embedding(max_len, d_model)
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(n_layers)
        )
        self.out_proj = nn.Linear(d_model, vocab_size)

    def forward(self, tgt_ids, memory, memory_mask=None):
        b, t = tgt_ids.shape
        if t > self.max_len:
            raise SequenceTooLong(f"{t} target steps exceeds max_len {self.max_len}")
        positions = torch.arange(t, device=tgt_ids.device).unsqueeze(0)
        x = self.tok_emb(tgt_ids) + self.pos_emb(positions)
        for layer in self.layers:
            x = layer(x, memory, memory_mask=memory_mask)
        return self.out_proj(x)


# --- loss ------------------------------------------------------------------------


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood over unmasked positions.

    logits: (..., C); targets: (...) integer class indices; mask: (...) bool.
    """
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(
            f"logits {tuple(logits.shape)} do not align with targets {tuple(targets.shape)}"
        )
    classes = logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= classes):
        raise IndexOutOfRange(
            f"target index outside [0, {classes}): {targets.min()}..{targets.max()}"
        )
    log_probs = torch.log_softmax(logits, dim=-1)
    picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is not None:
        if mask.shape != targets.shape:
            raise ShapeMismatch("mask shape must match targets")
        if not mask.any():
            return logits.sum() * 0.0
        picked = picked[mask]
    loss = -picked.mean()
    assert_finite(loss, "cross_entropy loss")
    return loss


# --- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0


def adam_step(params: list[torch.Tensor], grads: list[torch.Tensor], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    state.step += 1
    b1, b2 = betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g.shape != p.shape:
                raise ShapeMismatch(f"grad shape {tuple(g.shape)} vs param {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)


class Adam:
    """Minimal Adam over a parameter list (the classic update, no extras)."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState(
            m=[torch.zeros_like(p) for p in self.params],
            v=[torch.zeros_like(p) for p in self.params],
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [
            p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params
        ]
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)


# --- gradient verification -----------------------------------------------------------


@dataclass
class GradCheckResult:
    per_tensor: dict[str, float]
    max_rel_error: float = field(init=False)

    def __post_init__(self):
        self.max_rel_error = max(self.per_tensor.values(), default=0.0)


def grad_check(loss_fn: Callable[[], torch.Tensor],
               tensors: Mapping[str, torch.Tensor],
               eps: float | None = None) -> GradCheckResult:
    """Compare autograd gradients of ``loss_fn`` against central differences.

    ``tensors`` holds the leaves to perturb (parameters and/or inputs); the
    loss must be a deterministic scalar function of them.  Per-element error
    is |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    for t in tensors.values():
        t.requires_grad_(True)
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t))
        for name, t in tensors.items()
    }

    per_tensor = {}
    with torch.no_grad():
        for name, t in tensors.items():
            step = eps if eps is not None else (1e-6 if t.dtype == torch.float64 else 1e-2)
            flat = t.view(-1)
            numeric = torch.zeros(flat.numel(), dtype=torch.float64)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
            ana = analytic[name].view(-1).to(torch.float64)
            denom = torch.maximum(
                torch.maximum(ana.abs(), numeric.abs()), torch.ones_like(numeric)
            )
            per_tensor[name] = ((ana - numeric).abs() / denom).max().item()
    return GradCheckResult(per_tensor)


# --- checkpoints -----------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def vocab_sha256(symbols: Iterable[str]) -> str:
    return hashlib.sha256("\n".join(symbols).encode("utf-8")).hexdigest()


def save_checkpoint(path, family: str, config: dict,
                    state_dict: Mapping[str, torch.Tensor],
                    vocab_symbols: Mapping[str, list[str]]) -> None:
    """Self-contained checkpoint: config, named tensors, vocab contents+hashes."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "family": family,
        "config": config,
        "vocab_symbols": {k: list(v) for k, v in vocab_symbols.items()},
        "vocab_sha256": {k: vocab_sha256(v) for k, v in vocab_symbols.items()},
        "state_dict": {k: v.detach().clone() for k, v in state_dict.items()},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise NeuralError(f"unsupported checkpoint version {payload.get('format_version')}")
    for key, symbols in payload["vocab_symbols"].items():
        if vocab_sha256(symbols) != payload["vocab_sha256"][key]:
            raise NeuralError(f"vocab {key!r} hash mismatch; corrupted checkpoint")
    return payload


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
