"""Training loop, metrics and ablation drivers."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .config import RunConfig, TrainConfig
from .data import permute_params
from .detector import Detector, Vocabs
from .nn_core import lr_at, make_optimizer, optimizer_step
from .request import ParsedRequest
from .tokenizer import train_word_vocab, train_wordpiece

log = logging.getLogger(__name__)

ABLATION_SUITES = {
    "embedding": ("embedding_mode", ("hge", "wordpiece", "char", "word")),
    "channel": ("channel_mode", ("dual", "url_only", "payload_only")),
    "payload_order": ("payload_mode", ("set_fusion", "flat")),
}


class NonFiniteLoss(ArithmeticError):
    pass


class UnknownSuite(ValueError):
    pass


@dataclass
class Metrics:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_labels(cls, y_true: Sequence[int], y_pred: Sequence[int]) -> "Metrics":
        m = cls()
        for t, p in zip(y_true, y_pred):
            if p == 1:
                if t == 1:
                    m.tp += 1
                else:
                    m.fp += 1
            elif t == 1:
                m.fn += 1
            else:
                m.tn += 1
        return m

    def __add__(self, other: "Metrics") -> "Metrics":
        return Metrics(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}

    def to_text(self) -> str:
        rows = [(k, f"{v:.4f}" if isinstance(v, float) else str(v)) for k, v in self.to_dict().items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>8}" for k, v in rows) + "\n"


@dataclass
class StepLog:
    epoch: int
    step: int
    loss: float
    lr: float


@dataclass
class TrainState:
    """Where training stands; ``optimizer`` is rebuilt lazily when None."""

    step: int = 0
    epochs_done: int = 0
    optimizer: torch.optim.Optimizer | None = None


@dataclass
class TrainResult:
    history: list[StepLog] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)
    seconds: float = 0.0

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "step", "loss", "lr"])
        for h in self.history:
            w.writerow([h.epoch, h.step, repr(h.loss), repr(h.lr)])
        return buf.getvalue()


def build_vocabs(records: Sequence[ParsedRequest], cfg) -> Vocabs:
    """Fit the per-channel vocabularies the embedding mode needs on training records."""
    mode = cfg.embedding_mode
    if mode == "char":
        return Vocabs(None, None)
    u, p = cfg.url_encoder, cfg.param_encoder
    urls = [r.url[: u.max_chars] for r in records]
    params = [q.text[: p.max_chars] for r in records for q in r.params]
    if mode == "word":
        return Vocabs(train_word_vocab(urls, u.vocab_size), train_word_vocab(params or [""], p.vocab_size))
    return Vocabs(train_wordpiece(urls, u.vocab_size), train_wordpiece(params or ["a"], p.vocab_size))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(model: Detector, records: Sequence[ParsedRequest], cfg: TrainConfig,
          state: TrainState | None = None, epochs: int | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Mini-batch training with warmup/decay and AdamW.

    Shuffling and dropout are seeded per epoch from ``cfg.seed``, so a run
    resumed at an epoch boundary matches an uninterrupted one.
    """
    cfg.validate()
    if not records:
        raise ValueError("empty training set")
    torch.set_num_threads(cfg.threads)
    state = state or TrainState()
    if state.optimizer is None:
        state.optimizer = make_optimizer(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    per_epoch = steps_per_epoch(len(records), cfg.batch_size)
    total = cfg.epochs * per_epoch
    last_epoch = cfg.epochs if epochs is None else min(cfg.epochs, state.epochs_done + epochs)
    result = TrainResult(state=state)
    t0 = time.perf_counter()
    model.train()
    for epoch in range(state.epochs_done, last_epoch):
        order = list(range(len(records)))
        random.Random(cfg.seed * 1_000_003 + epoch).shuffle(order)
        torch.manual_seed(cfg.seed * 1_000_003 + epoch)
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = [records[j] for j in order[i:i + cfg.batch_size]]
            labels = torch.tensor([r.label for r in batch], dtype=torch.long)
            lr = lr_at(state.step, total, cfg.lr, cfg.warmup_frac)
            out = model(batch)
            loss = F.cross_entropy(out.logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss {value} at epoch {epoch} step {state.step} (lr {lr:.3g})")
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer_step(state.optimizer, lr)
            result.history.append(StepLog(epoch, state.step, value, lr))
            losses.append(value)
            state.step += 1
        mean = sum(losses) / len(losses)
        result.epoch_losses.append(mean)
        state.epochs_done = epoch + 1
        log.info("epoch %d/%d  mean loss %.5f  (%.1fs)", epoch + 1, cfg.epochs, mean, time.perf_counter() - t0)
        if on_epoch:
            on_epoch(epoch, mean)
    result.seconds = time.perf_counter() - t0
    model.eval()
    return result


def evaluate(model: Detector, records: Sequence[ParsedRequest], batch_size: int = 64) -> Metrics:
    preds = model.predict(list(records), batch_size=batch_size)
    return Metrics.from_labels([r.label for r in records], [p.label for p in preds])


def train_and_evaluate(run: RunConfig, train_set: Sequence[ParsedRequest],
                       test_set: Sequence[ParsedRequest]) -> tuple[Detector, TrainResult, Metrics]:
    run.validate()
    torch.set_num_threads(run.train.threads)
    vocabs = build_vocabs(train_set, run.model)
    model = Detector(run.model, vocabs, seed=run.train.seed)
    result = train(model, train_set, run.train)
    return model, result, evaluate(model, test_set)


def run_ablation(suite: str, run: RunConfig, train_set: Sequence[ParsedRequest],
                 test_set: Sequence[ParsedRequest], permute_seed: int = 1) -> list[dict]:
    """Train each variant of ``suite`` under the same seed and budget; one row per variant.

    The payload_order suite is scored on a copy of the test set whose
    parameters are randomly permuted per request; the unpermuted F1 is
    reported alongside.
    """
    if suite not in ABLATION_SUITES:
        raise UnknownSuite(f"unknown ablation suite {suite!r}; choose from {sorted(ABLATION_SUITES)}")
    key, variants = ABLATION_SUITES[suite]
    eval_set = permute_params(test_set, permute_seed) if suite == "payload_order" else list(test_set)
    rows = []
    for variant in variants:
        cfg = copy.deepcopy(run)
        setattr(cfg.model, key, variant)
        log.info("ablation %s: training variant %s", suite, variant)
        model, result, metrics = train_and_evaluate(cfg, train_set, eval_set)
        row = {"variant": variant, **metrics.to_dict(), "final_loss": result.epoch_losses[-1],
               "seconds": round(result.seconds, 1)}
        if suite == "payload_order":
            row["f1_unpermuted"] = evaluate(model, test_set).f1
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
