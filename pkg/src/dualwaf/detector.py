"""Dual-channel detector: URL encoder, per-parameter encoder, set fusion, classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import DetectorConfig
from .hge import HybridEmbedding, TokenBatch, collate
from .nn_core import LN_EPS, ShapeMismatch, TransformerLayer, init_weights
from .request import Parameter, ParsedRequest
from .tokenizer import (
    CharTokenizer,
    TokenizedText,
    Vocab,
    WordPieceTokenizer,
    WordTokenizer,
    concat_tokenized,
    pad_and_truncate,
)
from .trace import AttentionRecord

log = logging.getLogger(__name__)

BENIGN, MALICIOUS = 0, 1


@dataclass
class Vocabs:
    """Token vocabularies for both channels; unused (None) in char mode."""

    url: Vocab | None = None
    param: Vocab | None = None


class ChannelTokenizer:
    """Mode-specific tokenizer for one channel plus the length limits."""

    def __init__(self, mode: str, vocab: Vocab | None, max_len: int, max_chars: int):
        if mode == "char":
            self._tok = CharTokenizer()
            self.size = self._tok.size
            self.pad_id, self.cls_id, self.sep_id = self._tok.pad_id, self._tok.cls_id, self._tok.sep_id
        else:
            if vocab is None:
                raise ValueError(f"{mode} mode needs a vocabulary")
            self._tok = WordTokenizer(vocab) if mode == "word" else WordPieceTokenizer(vocab)
            self.size = len(vocab)
            self.pad_id, self.cls_id, self.sep_id = vocab.pad_id, vocab.cls_id, vocab.sep_id
        self.max_len = max_len
        self.max_chars = max_chars
        self._cache: dict[str, TokenizedText] = {}

    def __call__(self, text: str, max_len: int | None = None) -> TokenizedText:
        key = text if max_len is None else f"{max_len}\x00{text}"
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        t = self._tok(text[: self.max_chars])
        limit = max_len or self.max_len
        if len(t) > limit:
            t = pad_and_truncate(t, limit, self.pad_id)
        if len(self._cache) < 500_000:
            self._cache[key] = t
        return t

    def flat(self, texts: Sequence[str], max_len: int) -> TokenizedText:
        """All parameters as one [CLS] p1 [SEP] p2 [SEP] ... sequence."""
        parts = [self._tok(t[: self.max_chars]) for t in texts]
        t = concat_tokenized(parts, self.sep_id, self.cls_id)
        if len(t) > max_len:
            t = pad_and_truncate(t, max_len, self.pad_id)
        return t


class TextEncoder(nn.Module):
    """Embedding, embedding layer norm, then a stack of post-norm transformer layers."""

    def __init__(self, vocab_size: int, hidden: int, heads: int, intermediate: int, layers: int,
                 max_positions: int, mode: str, char_dim: int, gru_hidden: int, dropout: float):
        super().__init__()
        self.embedding = HybridEmbedding(vocab_size, hidden, max_positions, mode,
                                         char_dim=char_dim, gru_hidden=gru_hidden)
        self.norm = nn.LayerNorm(hidden, eps=LN_EPS)
        self.dropout = nn.Dropout(dropout)
        self.layers = nn.ModuleList(
            TransformerLayer(hidden, heads, intermediate, dropout=dropout) for _ in range(layers)
        )

    def forward(self, batch: TokenBatch) -> torch.Tensor:
        x = self.dropout(self.norm(self.embedding(batch)))
        for layer in self.layers:
            x, _ = layer(x, key_mask=batch.token_mask)
        return x

    def cls(self, batch: TokenBatch) -> torch.Tensor:
        return self(batch)[:, 0]


class FusionBlock(nn.Module):
    """One attention + FFN block over the parameter set (no positions), then masked mean."""

    def __init__(self, hidden: int, heads: int, head_size: int, intermediate: int, dropout: float):
        super().__init__()
        self.layer = TransformerLayer(hidden, heads, intermediate, head_size=head_size, dropout=dropout)

    def forward(self, P: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """P [B, n, d], mask [B, n] -> (pooled [B, d], weights [B, H, n, n])."""
        out, weights = self.layer(P, key_mask=mask, positional=False)
        m = mask.unsqueeze(-1).to(out.dtype)
        pooled = (out * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)
        return pooled, weights


@dataclass
class BatchOutput:
    logits: torch.Tensor
    probs: torch.Tensor
    f_url: torch.Tensor
    f_payload: torch.Tensor
    attention: list[AttentionRecord]


@dataclass
class Prediction:
    probs: np.ndarray
    label: int
    f_url: np.ndarray
    f_payload: np.ndarray
    attention: AttentionRecord

    @property
    def p_malicious(self) -> float:
        return float(self.probs[MALICIOUS])


class Detector(nn.Module):
    PARAM_CHUNK = 48

    def __init__(self, cfg: DetectorConfig, vocabs: Vocabs, seed: int | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocabs = vocabs
        mode = cfg.embedding_mode
        u, p = cfg.url_encoder, cfg.param_encoder
        self.url_tok = ChannelTokenizer(mode, vocabs.url, u.max_len, u.max_chars)
        self.param_tok = ChannelTokenizer(mode, vocabs.param, p.max_len, p.max_chars)
        param_positions = max(p.max_len, cfg.flat_max_len) if cfg.payload_mode == "flat" else p.max_len

        self.url_encoder = TextEncoder(self.url_tok.size, u.hidden, u.heads, u.intermediate, u.layers,
                                       u.max_len, mode, u.char_dim, u.gru_hidden, cfg.dropout)
        self.param_encoder = TextEncoder(self.param_tok.size, p.hidden, p.heads, p.intermediate, p.layers,
                                         param_positions, mode, p.char_dim, p.gru_hidden, cfg.dropout)
        f = cfg.fusion
        self.fusion = FusionBlock(p.hidden, f.heads, f.head_size, f.intermediate, cfg.dropout)
        self.null_payload = nn.Parameter(torch.zeros(p.hidden))
        self.classifier = nn.Linear(2 * cfg.hidden, 2)
        self.dropped_params = 0

        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                init_weights(self)
        else:
            init_weights(self)

    @property
    def hidden(self) -> int:
        return self.cfg.hidden

    def _dtype(self) -> torch.dtype:
        return self.classifier.weight.dtype

    # -- channels -----------------------------------------------------------

    def encode_urls(self, urls: Sequence[str]) -> torch.Tensor:
        unique = sorted(set(urls))
        batch = collate([self.url_tok(u) for u in unique], self.url_tok.pad_id)
        where = {u: k for k, u in enumerate(unique)}
        return self.url_encoder.cls(batch).index_select(0, torch.tensor([where[u] for u in urls], dtype=torch.long))

    def encode_params(self, params: Sequence[Parameter]) -> torch.Tensor:
        if not params:
            return torch.zeros(0, self.hidden, dtype=self._dtype())
        # Each parameter is encoded independently, so identical texts are encoded
        # once and the rest are bucketed by length to keep GRU padding small.
        texts = [p.text for p in params]
        unique = sorted(set(texts), key=lambda t: (len(self.param_tok(t).char_ids), t))
        feats = []
        for i in range(0, len(unique), self.PARAM_CHUNK):
            chunk = [self.param_tok(t) for t in unique[i:i + self.PARAM_CHUNK]]
            feats.append(self.param_encoder.cls(collate(chunk, self.param_tok.pad_id)))
        where = {t: k for k, t in enumerate(unique)}
        return torch.cat(feats).index_select(0, torch.tensor([where[t] for t in texts], dtype=torch.long))

    def _capped(self, params: list[Parameter]) -> list[Parameter]:
        cap = self.cfg.max_params
        if len(params) > cap:
            self.dropped_params += len(params) - cap
            log.warning("dropping %d parameter(s) beyond the cap of %d", len(params) - cap, cap)
            return params[:cap]
        return params

    def fuse(self, groups: Sequence[torch.Tensor]) -> tuple[torch.Tensor, list[torch.Tensor | None]]:
        """Fuse per-request parameter features; empty groups get the null vector."""
        B = len(groups)
        n = max([g.shape[0] for g in groups] + [1])
        d = self.hidden
        mask = torch.zeros(B, n, dtype=torch.bool)
        for b, g in enumerate(groups):
            # an empty group gets one dummy key so its softmax stays finite; output replaced below
            mask[b, : max(g.shape[0], 1)] = True
        P = torch.stack([torch.cat([g, g.new_zeros(n - g.shape[0], d)]) for g in groups])
        pooled, weights = self.fusion(P, mask)
        empty = torch.tensor([g.shape[0] == 0 for g in groups]).unsqueeze(-1)
        pooled = torch.where(empty, self.null_payload.expand(B, d), pooled)
        per_req = [None if g.shape[0] == 0 else weights[b, :, : g.shape[0], : g.shape[0]]
                   for b, g in enumerate(groups)]
        return pooled, per_req

    def payload_features(self, requests: Sequence[ParsedRequest]
                         ) -> tuple[torch.Tensor, list[AttentionRecord]]:
        B = len(requests)
        param_lists = [self._capped(list(r.params)) for r in requests]
        if self.cfg.payload_mode == "flat":
            feats = self.null_payload.new_zeros(B, self.hidden)
            idx = [b for b in range(B) if param_lists[b]]
            if idx:
                toks = [self.param_tok.flat([p.text for p in param_lists[b]], self.cfg.flat_max_len) for b in idx]
                enc = self.param_encoder.cls(collate(toks, self.param_tok.pad_id))
                feats = feats.index_copy(0, torch.tensor(idx), enc)
            empty = torch.tensor([not pl for pl in param_lists]).unsqueeze(-1)
            feats = torch.where(empty, self.null_payload.expand(B, self.hidden), feats)
            return feats, [AttentionRecord.empty() for _ in range(B)]

        flat = [p for pl in param_lists for p in pl]
        P = self.encode_params(flat)
        groups, k = [], 0
        for pl in param_lists:
            groups.append(P[k:k + len(pl)])
            k += len(pl)
        pooled, weights = self.fuse(groups)
        records = []
        for pl, w in zip(param_lists, weights):
            if w is None:
                records.append(AttentionRecord.empty())
            else:
                records.append(AttentionRecord(w.detach().cpu().double().numpy(), [p.key for p in pl]))
        return pooled, records

    # -- full model ---------------------------------------------------------

    def classify(self, f_url: torch.Tensor, f_payload: torch.Tensor) -> torch.Tensor:
        """Logits for ``[f_url ; f_payload]``."""
        if f_url.shape[-1] != self.hidden or f_payload.shape[-1] != self.hidden:
            raise ShapeMismatch(f"features must have width {self.hidden}")
        return self.classifier(torch.cat([f_url, f_payload], dim=-1))

    def forward(self, requests: Sequence[ParsedRequest]) -> BatchOutput:
        B = len(requests)
        mode = self.cfg.channel_mode
        zeros = self.null_payload.new_zeros(B, self.hidden)
        if mode == "payload_only":
            f_url = zeros
        else:
            f_url = self.encode_urls([r.url for r in requests])
        if mode == "url_only":
            f_payload, records = zeros, [AttentionRecord.empty() for _ in range(B)]
        else:
            f_payload, records = self.payload_features(requests)
        logits = self.classify(f_url, f_payload)
        return BatchOutput(logits, torch.softmax(logits, dim=-1), f_url, f_payload, records)

    @torch.no_grad()
    def predict(self, requests: Sequence[ParsedRequest], batch_size: int = 64) -> list[Prediction]:
        was_training = self.training
        self.eval()
        preds: list[Prediction] = []
        try:
            for i in range(0, len(requests), batch_size):
                out = self(requests[i:i + batch_size])
                probs = out.probs.double().cpu().numpy()
                for b in range(len(probs)):
                    preds.append(Prediction(
                        probs=probs[b],
                        label=int(np.argmax(probs[b])),
                        f_url=out.f_url[b].double().cpu().numpy(),
                        f_payload=out.f_payload[b].double().cpu().numpy(),
                        attention=out.attention[b],
                    ))
        finally:
            self.train(was_training)
        return preds


def forward(req: ParsedRequest, model: Detector) -> Prediction:
    return model.predict([req])[0]


def encode_url(url: str, model: Detector) -> torch.Tensor:
    return model.encode_urls([url])[0]


def encode_param(p: Parameter, model: Detector) -> torch.Tensor:
    return model.encode_params([p])[0]


def fuse_params(P: torch.Tensor, model: Detector) -> tuple[torch.Tensor, AttentionRecord]:
    """Fuse one request's parameter features P [n, d]."""
    pooled, weights = model.fuse([P])
    w = weights[0]
    rec = AttentionRecord.empty() if w is None else AttentionRecord(w.detach().double().numpy())
    return pooled[0], rec
