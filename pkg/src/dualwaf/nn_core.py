"""Differentiable building blocks on top of torch autograd.

Linear maps, a GRU cell with masked sequence runner, multi-head attention
that returns its per-head weights, a post-norm transformer layer, the
probability-space cross-entropy, AdamW stepping with a warmup/decay
schedule, and a central-difference gradient checker.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_CLAMP = 1e-12
INIT_STD = 0.02
LN_EPS = 1e-12


class ShapeMismatch(ValueError):
    pass


class NotAProbability(ValueError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


def linear(x: torch.Tensor, w_t: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ w_t + b`` with ``w_t`` stored input-major ([d_in, d_out])."""
    _check(w_t.dim() == 2 and x.shape[-1] == w_t.shape[0],
           f"linear: x {tuple(x.shape)} vs weight {tuple(w_t.shape)}")
    y = x @ w_t
    if b is not None:
        _check(b.shape == (w_t.shape[1],), f"linear: bias {tuple(b.shape)} vs out {w_t.shape[1]}")
        y = y + b
    return y


def init_weights(module: nn.Module, std: float = INIT_STD) -> None:
    """Truncated-normal weights, zero biases, unit layer-norm gains."""
    for name, p in module.named_parameters():
        owner = module
        for part in name.split(".")[:-1]:
            owner = getattr(owner, part)
        leaf = name.rsplit(".", 1)[-1]
        if isinstance(owner, nn.LayerNorm):
            nn.init.ones_(p) if leaf == "weight" else nn.init.zeros_(p)
        elif leaf == "bias":
            nn.init.zeros_(p)
        else:
            nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


class GRUCell(nn.Module):
    """Single GRU cell.

    z = sigmoid(x Wz + h Uz + bz)
    r = sigmoid(x Wr + h Ur + br)
    cand = tanh(x Wh + (r * h) Uh + bh)
    h' = (1 - z) * h + z * cand
    """

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_x = nn.Parameter(torch.zeros(input_size, 3 * hidden_size))
        self.u_zr = nn.Parameter(torch.zeros(hidden_size, 2 * hidden_size))
        self.u_h = nn.Parameter(torch.zeros(hidden_size, hidden_size))
        self.bias = nn.Parameter(torch.zeros(3 * hidden_size))

    def project_inputs(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.w_x, self.bias)

    def step_projected(self, xp: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        k = self.hidden_size
        zr = torch.sigmoid(xp[..., : 2 * k] + h @ self.u_zr)
        z, r = zr[..., :k], zr[..., k:]
        cand = torch.tanh(xp[..., 2 * k:] + (r * h) @ self.u_h)
        return (1 - z) * h + z * cand

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        _check(x.shape[-1] == self.input_size, f"gru: input width {x.shape[-1]} != {self.input_size}")
        _check(h.shape[-1] == self.hidden_size, f"gru: state width {h.shape[-1]} != {self.hidden_size}")
        return self.step_projected(self.project_inputs(x), h)


def gru_step(x: torch.Tensor, h_prev: torch.Tensor, cell: GRUCell) -> torch.Tensor:
    return cell(x, h_prev)


def run_gru(cell: GRUCell, x: torch.Tensor, mask: torch.Tensor | None = None,
            reverse: bool = False) -> torch.Tensor:
    """Run ``cell`` over ``x`` [B, L, d]; returns states [B, L, k].

    Masked positions hold the state fixed (forward) or at zero until the
    sequence's real end is reached (reverse), so right-padded batches give
    the same states as unpadded single sequences.
    """
    B, L, _ = x.shape
    # unbind once: indexing xp[:, j] inside the loop makes backward quadratic in L
    steps = cell.project_inputs(x).unbind(1)
    masks = mask.unsqueeze(-1).unbind(1) if mask is not None else None
    h = x.new_zeros(B, cell.hidden_size)
    states: list[torch.Tensor] = [h] * L
    order = range(L - 1, -1, -1) if reverse else range(L)
    for j in order:
        nh = cell.step_projected(steps[j], h)
        if masks is not None:
            nh = torch.where(masks[j], nh, h)
        h = nh
        states[j] = h
    return torch.stack(states, dim=1)


def sinusoidal_positions(n: int, d: int, device=None, dtype=None) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(device=device, dtype=dtype or torch.get_default_dtype())


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, head_size: int | None = None, dropout: float = 0.0):
        super().__init__()
        head_size = head_size or hidden // heads
        if heads * head_size != hidden:
            raise ShapeMismatch(f"heads {heads} x head size {head_size} != hidden {hidden}")
        self.hidden, self.heads, self.head_size = hidden, heads, head_size
        self.query = nn.Linear(hidden, hidden)
        self.key = nn.Linear(hidden, hidden)
        self.value = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, n, _ = x.shape
        return x.view(B, n, self.heads, self.head_size).transpose(1, 2)

    def forward(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        positional: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Inputs [B, n, d] (or [n, d]); ``key_mask`` [B, n] is True for real keys.

        Returns the projected output and softmax weights [B, H, n, n].
        """
        squeeze = q.dim() == 2
        if squeeze:
            q, k, v = q.unsqueeze(0), k.unsqueeze(0), v.unsqueeze(0)
            if key_mask is not None:
                key_mask = key_mask.unsqueeze(0)
        _check(q.shape[-1] == self.hidden and k.shape == v.shape and k.shape[-1] == self.hidden,
               f"attention: q {tuple(q.shape)} k {tuple(k.shape)} v {tuple(v.shape)}")
        _check(q.shape[1] >= 1, "attention: needs at least one row")
        if positional:
            q = q + sinusoidal_positions(q.shape[1], self.hidden, q.device, q.dtype)
            k = k + sinusoidal_positions(k.shape[1], self.hidden, k.device, k.dtype)
            v = v + sinusoidal_positions(v.shape[1], self.hidden, v.device, v.dtype)
        Q, K, V = self._split(self.query(q)), self._split(self.key(k)), self._split(self.value(v))
        logits = Q @ K.transpose(-1, -2) / math.sqrt(self.head_size)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        ctx = self.dropout(weights) @ V
        B, _, n, _ = ctx.shape
        ctx = ctx.transpose(1, 2).reshape(B, n, self.hidden)
        out = self.out(ctx)
        if squeeze:
            return out[0], weights[0]
        return out, weights


def multi_head_attention(q, k, v, attn: MultiHeadAttention, positional: bool = False):
    return attn(q, k, v, positional=positional)


class FeedForward(nn.Module):
    def __init__(self, hidden: int, intermediate: int, dropout: float = 0.0):
        super().__init__()
        self.up = nn.Linear(hidden, intermediate)
        self.down = nn.Linear(intermediate, hidden)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(self.down(gelu(self.up(x))))


class TransformerLayer(nn.Module):
    """Post-norm block: LN(x + MHA(x)), then LN(. + FFN(.))."""

    def __init__(self, hidden: int, heads: int, intermediate: int,
                 head_size: int | None = None, dropout: float = 0.0):
        super().__init__()
        self.attention = MultiHeadAttention(hidden, heads, head_size, dropout)
        self.attn_norm = nn.LayerNorm(hidden, eps=LN_EPS)
        self.ffn = FeedForward(hidden, intermediate, dropout)
        self.ffn_norm = nn.LayerNorm(hidden, eps=LN_EPS)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None,
                positional: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        a, weights = self.attention(x, x, x, key_mask=key_mask, positional=positional)
        h = self.attn_norm(x + self.dropout(a))
        return self.ffn_norm(h + self.ffn(h)), weights


def transformer_layer(x: torch.Tensor, layer: TransformerLayer) -> torch.Tensor:
    _check(x.shape[-1] == layer.attn_norm.normalized_shape[0],
           f"transformer layer: width {x.shape[-1]} != {layer.attn_norm.normalized_shape[0]}")
    return layer(x)[0]


def cross_entropy(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``-sum(y * log(y_hat))`` over the last axis, log argument clamped at 1e-12.

    Batched inputs return the mean over rows.
    """
    sums = y_hat.detach().sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-6) or (y_hat.detach() < 0).any():
        raise NotAProbability(f"prediction rows must sum to 1, got {sums.tolist()}")
    loss = -(y * torch.log(y_hat.clamp_min(LOG_CLAMP))).sum(dim=-1)
    return loss.mean() if loss.dim() else loss


def cross_entropy_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Same loss evaluated from logits via log-softmax (training path)."""
    return F.cross_entropy(logits, labels)


def lr_at(step: int | float, total_steps: int, base: float = 2e-5, warmup_frac: float = 0.01) -> float:
    """Linear warmup from 0 to ``base`` over ``warmup_frac * total_steps`` steps,
    then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    warmup = warmup_frac * total_steps
    if step <= 0:
        return 0.0
    if step < warmup:
        return base * step / warmup
    if step >= total_steps:
        return 0.0
    return base * (total_steps - step) / (total_steps - warmup)


def make_optimizer(params, lr: float = 2e-5, weight_decay: float = 0.01) -> torch.optim.AdamW:
    """AdamW with bias-corrected moments and decoupled decay.

    Biases and layer-norm parameters are exempt from decay.
    """
    params = list(params)
    if params and isinstance(params[0], tuple):
        decay = [p for n, p in params if p.dim() >= 2 and "norm" not in n]
        no_decay = [p for n, p in params if not (p.dim() >= 2 and "norm" not in n)]
        groups = [{"params": decay, "weight_decay": weight_decay},
                  {"params": no_decay, "weight_decay": 0.0}]
    else:
        groups = [{"params": params, "weight_decay": weight_decay}]
    return torch.optim.AdamW(groups, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def grad_check(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    floor: float = 1e-3,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps ``inputs`` to a scalar. Per-element error is
    ``|a - n| / max(|a|, |n|, floor * max_abs_grad)``, so entries far below
    the gradient's overall scale are judged against that scale rather than
    their own (noise-dominated) magnitude.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*inputs)
    if out.numel() != 1:
        raise ShapeMismatch("grad_check needs a scalar-valued function")
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(inputs, analytic)]

    numeric = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f(*inputs).item()
                flat[i] = orig - eps
                down = f(*inputs).item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            numeric.append(g)

    scale = max([a.abs().max().item() for a in analytic if a.numel()] + [0.0])
    denom_floor = max(floor * scale, 1e-12)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if not a.numel():
            continue
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, denom_floor))
        worst = max(worst, ((a - n).abs() / denom).max().item())
    return worst
