"""Hybrid granularity embedding.

Each token's embedding is the usual token + position + segment sum plus a
linear projection of a character-level representation. The character
representation of a token spanning characters ``[s, e]`` is built from a
bidirectional GRU run over the whole text:

    fwd part = h_fwd[e] - h_fwd[s-1]   (just h_fwd[e] when s == 0)
    bwd part = h_bwd[s] - h_bwd[e+1]   (just h_bwd[s] when e == L-1)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .nn_core import GRUCell, ShapeMismatch, run_gru
from .tokenizer import CHAR_VOCAB, SENTINEL, TokenizedText

EMBEDDING_MODES = ("hge", "wordpiece", "char", "word")


class IdOutOfRange(ValueError):
    pass


class SpanOutOfRange(ValueError):
    pass


@dataclass
class TokenBatch:
    token_ids: torch.Tensor   # [B, T] long
    spans: torch.Tensor       # [B, T, 2] long, (-1, -1) for specials/padding
    token_mask: torch.Tensor  # [B, T] bool, False on padding
    char_ids: torch.Tensor    # [B, L] long
    char_mask: torch.Tensor   # [B, L] bool
    char_len: torch.Tensor    # [B] long

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def collate(items: Sequence[TokenizedText], pad_id: int, char_pad_id: int = CHAR_VOCAB.pad_id) -> TokenBatch:
    """Right-pad a list of tokenizations into one batch."""
    B = len(items)
    T = max((len(t.token_ids) for t in items), default=0)
    L = max((len(t.char_ids) for t in items), default=0)
    ids = torch.full((B, T), pad_id, dtype=torch.long)
    spans = torch.full((B, T, 2), -1, dtype=torch.long)
    tmask = torch.zeros(B, T, dtype=torch.bool)
    cids = torch.full((B, L), char_pad_id, dtype=torch.long)
    cmask = torch.zeros(B, L, dtype=torch.bool)
    clen = torch.zeros(B, dtype=torch.long)
    for b, t in enumerate(items):
        n, m = len(t.token_ids), len(t.char_ids)
        ids[b, :n] = torch.tensor(t.token_ids, dtype=torch.long)
        if n:
            spans[b, :n] = torch.tensor(t.spans, dtype=torch.long)
        tmask[b, :n] = torch.tensor([tid != pad_id or sp != SENTINEL for tid, sp in zip(t.token_ids, t.spans)])
        if m:
            cids[b, :m] = torch.tensor(t.char_ids, dtype=torch.long)
        cmask[b, :m] = True
        clen[b] = m
    return TokenBatch(ids, spans, tmask, cids, cmask, clen)


@dataclass
class CharStates:
    forward: torch.Tensor   # [B, L, k]
    backward: torch.Tensor  # [B, L, k]


class HybridEmbedding(nn.Module):
    """Token + position + segment embedding, optionally plus the projected char term.

    ``mode`` only decides whether the character branch exists; the token
    table is sized for whatever tokenizer the mode uses.
    """

    def __init__(
        self,
        vocab_size: int,
        hidden: int,
        max_len: int,
        mode: str = "hge",
        char_vocab_size: int = len(CHAR_VOCAB),
        char_dim: int = 128,
        gru_hidden: int = 64,
    ):
        super().__init__()
        if mode not in EMBEDDING_MODES:
            raise ValueError(f"unknown embedding mode {mode!r}")
        self.mode = mode
        self.hidden = hidden
        self.token = nn.Embedding(vocab_size, hidden)
        self.position = nn.Embedding(max_len, hidden)
        self.segment = nn.Parameter(torch.zeros(hidden))
        self.uses_chars = mode == "hge"
        if self.uses_chars:
            self.char_vocab_size = char_vocab_size
            self.gru_hidden = gru_hidden
            self.char_embedding = nn.Embedding(char_vocab_size, char_dim)
            self.gru_fwd = GRUCell(char_dim, gru_hidden)
            self.gru_bwd = GRUCell(char_dim, gru_hidden)
            self.projection = nn.Linear(2 * gru_hidden, hidden)

    def wordpiece_part(self, token_ids: torch.Tensor) -> torch.Tensor:
        T = token_ids.shape[-1]
        if T > self.position.num_embeddings:
            raise ShapeMismatch(f"sequence of {T} tokens exceeds {self.position.num_embeddings} positions")
        pos = torch.arange(T, device=token_ids.device)
        return self.token(token_ids) + self.position(pos) + self.segment

    def run_bigru(self, char_ids: torch.Tensor, char_mask: torch.Tensor | None = None) -> CharStates:
        if char_ids.numel() and (char_ids.min() < 0 or char_ids.max() >= self.char_vocab_size):
            raise IdOutOfRange(f"char id outside [0, {self.char_vocab_size})")
        x = self.char_embedding(char_ids)
        return CharStates(run_gru(self.gru_fwd, x, char_mask),
                          run_gru(self.gru_bwd, x, char_mask, reverse=True))

    def char_repr(self, states: CharStates, spans: torch.Tensor) -> torch.Tensor:
        """Differential representations for every span in ``spans`` [B, T, 2] -> [B, T, 2k]."""
        fwd, bwd = states.forward, states.backward
        B, L, k = fwd.shape
        zero = fwd.new_zeros(B, 1, k)
        fwd_shift = torch.cat([zero, fwd], dim=1)   # index s -> h_fwd[s-1], 0 when s == 0
        bwd_shift = torch.cat([bwd, zero], dim=1)   # index e+1 -> h_bwd[e+1], 0 past the end
        valid = spans[..., 0] >= 0
        s = spans[..., 0].clamp(min=0)
        e = spans[..., 1].clamp(min=0)

        def take(t: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
            return torch.gather(t, 1, idx.unsqueeze(-1).expand(-1, -1, k))

        if L == 0:
            return fwd.new_zeros(B, spans.shape[1], 2 * k)
        h_fw = take(fwd, e.clamp(max=L - 1)) - take(fwd_shift, s)
        h_bw = take(bwd, s.clamp(max=L - 1)) - take(bwd_shift, e + 1)
        out = torch.cat([h_fw, h_bw], dim=-1)
        return out * valid.unsqueeze(-1).to(out.dtype)

    def char_part(self, batch: TokenBatch) -> torch.Tensor:
        valid = batch.spans[..., 0] >= 0
        if valid.any():
            bad = (batch.spans[..., 1] >= batch.char_len.unsqueeze(1)) | (batch.spans[..., 0] > batch.spans[..., 1])
            if (bad & valid).any():
                raise SpanOutOfRange("token span outside its character sequence")
        states = self.run_bigru(batch.char_ids, batch.char_mask)
        return self.projection(self.char_repr(states, batch.spans))

    def forward(self, batch: TokenBatch) -> torch.Tensor:
        E = self.wordpiece_part(batch.token_ids)
        if self.uses_chars:
            E = E + self.char_part(batch)
        return E


def run_bigru(char_ids: Sequence[int], p: HybridEmbedding) -> CharStates:
    """Single-sequence convenience wrapper; states are [L, k]."""
    if len(char_ids) < 1:
        raise ValueError("run_bigru needs at least one character")
    states = p.run_bigru(torch.tensor([list(char_ids)], dtype=torch.long))
    return CharStates(states.forward[0], states.backward[0])


def token_char_repr(states: CharStates, span: tuple[int, int]) -> torch.Tensor:
    """Differential representation of one span from unbatched states [L, k]."""
    fwd, bwd = states.forward, states.backward
    L, k = fwd.shape
    s, e = span
    if (s, e) == SENTINEL:
        return fwd.new_zeros(2 * k)
    if not (0 <= s <= e < L):
        raise SpanOutOfRange(f"span {span} outside [0, {L})")
    h_fw = fwd[e] - fwd[s - 1] if s > 0 else fwd[e]
    h_bw = bwd[s] - bwd[e + 1] if e < L - 1 else bwd[s]
    return torch.cat([h_fw, h_bw])


def hybrid_embed(t: TokenizedText, p: HybridEmbedding, mode: str | None = None, pad_id: int = 0) -> torch.Tensor:
    """Embedding matrix [m_tokens, d] for one tokenization.

    ``mode`` defaults to the module's own; asking an ``hge`` module for
    ``wordpiece`` returns the same embedding without the character term.
    """
    mode = mode or p.mode
    if mode not in EMBEDDING_MODES:
        raise ValueError(f"unknown embedding mode {mode!r}")
    batch = collate([t], pad_id)
    if mode == "hge":
        if not p.uses_chars:
            raise ValueError("module was built without the character branch")
        return p(batch)[0]
    return p.wordpiece_part(batch.token_ids)[0]
