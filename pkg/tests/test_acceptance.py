"""Numbered acceptance criteria; conftest prints one PASS/FAIL line for each."""

import json
import random
import time

import numpy as np
import pytest
import torch

from dualwaf.cli import main
from dualwaf.config import desk_scale
from dualwaf.data import generate_synthetic, permute_params, split
from dualwaf.detector import Detector, FusionBlock
from dualwaf.hge import HybridEmbedding, hybrid_embed, run_bigru, token_char_repr
from dualwaf.nn_core import GRUCell, TransformerLayer, grad_check, init_weights, linear
from dualwaf.request import Parameter, ParsedRequest, decode_value
from dualwaf.tokenizer import CHAR_VOCAB, tokenize, train_wordpiece
from dualwaf.trace import AttentionRecord, attention_degrees, head_average, trace
from dualwaf.training import build_vocabs, evaluate, train, train_and_evaluate

from helpers import corpus, random_request, toy_config

torch.set_num_threads(1)
criterion = pytest.mark.criterion

XSS_DEGREES = [0.0496, 0.7991, 0.0535, 0.0513, 0.0465]


def _randomize(module, seed, scale=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def _random_text(rng: random.Random, lo=1, hi=40) -> str:
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789<>'\"()=;/%.-_ ñé"
    return "".join(rng.choice(alphabet) for _ in range(rng.randint(lo, hi)))


# -- shared desk-scale run ----------------------------------------------------

@pytest.fixture(scope="session")
def desk_run():
    run = desk_scale()
    ds = generate_synthetic(2000, seed=0)
    train_set, test_set = split(ds, seed=0)
    model = Detector(run.model, build_vocabs(train_set.records, run.model), seed=run.train.seed)
    t0 = time.process_time()
    result = train(model, train_set.records, run.train)
    cpu = time.process_time() - t0
    return model, result, evaluate(model, test_set.records), cpu


# -- 1 ------------------------------------------------------------------------

@criterion(1, "fusion is invariant to parameter order")
def test_permutation_invariance():
    t0 = time.perf_counter()
    run = desk_scale()
    model = Detector(run.model, build_vocabs(generate_synthetic(200, seed=1).records, run.model), seed=3).eval()
    rng = random.Random(0)
    worst = 0.0
    flips = 0
    for _ in range(100):
        req = random_request(rng, rng.randint(2, 8))
        variants = [req]
        for _ in range(10):
            order = list(range(len(req.params)))
            rng.shuffle(order)
            variants.append(ParsedRequest(req.url, [req.params[i] for i in order]))
        with torch.no_grad():
            out = model(variants)
        base = out.f_payload[0]
        rel = ((out.f_payload[1:] - base).norm(dim=1) / base.norm()).max().item()
        worst = max(worst, rel)
        y = out.probs[0]
        if abs(y[0] - y[1]) > 1e-4:
            flips += int((out.probs[1:].argmax(1) != y.argmax()).sum())
    assert worst < 1e-5, worst
    assert flips == 0
    assert time.perf_counter() - t0 < 60


# -- 2 ------------------------------------------------------------------------

@criterion(2, "zero char projection reduces the hybrid embedding to wordpiece")
def test_hge_identity():
    rng = random.Random(2)
    texts = [_random_text(rng) for _ in range(50)]
    vocab = train_wordpiece(texts, 400)
    torch.manual_seed(0)
    emb = HybridEmbedding(len(vocab), 64, 64, char_dim=32, gru_hidden=16)
    init_weights(emb)
    with torch.no_grad():
        emb.projection.weight.zero_()
        emb.projection.bias.zero_()
    for text in texts:
        t = tokenize(text, vocab)
        a, b = hybrid_embed(t, emb, mode="hge"), hybrid_embed(t, emb, mode="wordpiece")
        assert (a - b).abs().max().item() <= 1e-6


# -- 3 ------------------------------------------------------------------------

def _numpy_bigru(ids, emb):
    """Forward/backward GRU states from the gate equations, without the package's runner."""
    x = emb.char_embedding.weight.detach().double().numpy()[ids]

    def run(cell, seq):
        k = cell.hidden_size
        Wx, Uzr, Uh, b = (t.detach().double().numpy() for t in (cell.w_x, cell.u_zr, cell.u_h, cell.bias))
        sig = lambda a: 1 / (1 + np.exp(-a))
        h = np.zeros(k)
        out = []
        for xj in seq:
            z = sig(xj @ Wx[:, :k] + h @ Uzr[:, :k] + b[:k])
            r = sig(xj @ Wx[:, k:2 * k] + h @ Uzr[:, k:] + b[k:2 * k])
            h = (1 - z) * h + z * np.tanh(xj @ Wx[:, 2 * k:] + (r * h) @ Uh + b[2 * k:])
            out.append(h)
        return np.array(out)

    return run(emb.gru_fwd, x), run(emb.gru_bwd, x[::-1])[::-1]


@criterion(3, "differential char representation matches an independent recomputation")
def test_differential_representation_oracle():
    torch.manual_seed(1)
    emb = HybridEmbedding(10, 16, 8, char_dim=12, gru_hidden=7)
    init_weights(emb, std=0.5)
    rng = random.Random(3)
    hits = {"s0": 0, "eL": 0}
    for i in range(200):
        text = _random_text(rng, 1, 30)
        ids = CHAR_VOCAB.encode(text)
        L = len(ids)
        if i % 4 == 0:
            s, e = 0, rng.randrange(L)
        elif i % 4 == 1:
            s, e = rng.randrange(L), L - 1
        else:
            s = rng.randrange(L)
            e = rng.randrange(s, L)
        hits["s0"] += s == 0
        hits["eL"] += e == L - 1
        fwd, bwd = _numpy_bigru(ids, emb)
        left = fwd[s - 1] if s > 0 else np.zeros(7)
        right = bwd[e + 1] if e < L - 1 else np.zeros(7)
        expected = np.concatenate([fwd[e] - left, bwd[s] - right])
        got = token_char_repr(run_bigru(ids, emb), (s, e)).detach().double().numpy()
        assert np.abs(got - expected).max() < 1e-6, (text, s, e)
    assert hits["s0"] >= 50 and hits["eL"] >= 50


# -- 4 ------------------------------------------------------------------------

@criterion(4, "finite-difference gradient checks")
def test_gradient_checks():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)

    x, w, b = rnd(3, 4), rnd(4, 5), rnd(5)
    assert grad_check(lambda x, w, b: (linear(x, w, b) ** 2).sum(), [x, w, b]) < 1e-4

    cell = _randomize(GRUCell(3, 4).double(), 1)
    names = [n for n, _ in cell.named_parameters()]

    def gru(x, h, *ps):
        return (torch.func.functional_call(cell, dict(zip(names, ps)), (x, h)) * torch.arange(1.0, 5.0, dtype=torch.float64)).sum()

    assert grad_check(gru, [rnd(3), rnd(4), *[p.detach() for p in cell.parameters()]]) < 1e-4

    layer = _randomize(TransformerLayer(8, 2, 16).double(), 2, scale=0.3)
    lnames = [n for n, _ in layer.named_parameters()]
    wts = rnd(2, 8)

    def tl(x, *ps):
        out, _ = torch.func.functional_call(layer, dict(zip(lnames, ps)), (x,))
        return (out * wts).sum()

    assert grad_check(tl, [rnd(2, 8), *[p.detach() for p in layer.parameters()]]) < 1e-4

    block = _randomize(FusionBlock(8, 2, 4, 16, 0.0).double(), 3, scale=0.3)
    fnames = [n for n, _ in block.named_parameters()]
    mask = torch.tensor([[True, True, True], [True, True, False]])
    fw = rnd(2, 8)

    def fb(P, *ps):
        pooled, _ = torch.func.functional_call(block, dict(zip(fnames, ps)), (P, mask))
        return (pooled * fw).sum()

    assert grad_check(fb, [rnd(2, 3, 8), *[p.detach() for p in block.parameters()]]) < 1e-4

    model = Detector(toy_config(), build_vocabs(corpus(), toy_config()), seed=0).double().eval()
    reqs = corpus(3, seed=7)
    reqs[0].params.append(Parameter("q", "' or 'a='a'"))
    labels = torch.tensor([0, 1, 1])
    params = dict(model.named_parameters())
    prng = np.random.default_rng(0)
    probes = [(n, prng.choice(p.numel(), size=min(3, p.numel()), replace=False)) for n, p in params.items()]

    def full(*deltas):
        new = {}
        for (n, idx), d in zip(probes, deltas):
            base = params[n].detach()
            new[n] = base.reshape(-1).index_add(0, torch.tensor(idx), d).view_as(base)
        out = torch.func.functional_call(model, new, (reqs,))
        return torch.nn.functional.cross_entropy(out.logits, labels)

    assert grad_check(full, [torch.zeros(len(i), dtype=torch.float64) for _, i in probes]) < 1e-3
    assert time.perf_counter() - t0 < 300


# -- 5 ------------------------------------------------------------------------

def _fuzz_corpus(n, seed):
    from urllib.parse import quote

    rng = random.Random(seed)
    pieces = ["%", "%2", "%25", "%3C", "%3c", "%00", "%0d%0a", "%zz", "%F1", "%C3%A9", "%E4%B8", "+",
              "＜", "％", "３", "Ｃ", "a", "<", "'", " ", "é", "中", "%u003c", "%%", "25", "3C"]
    out = []
    for _ in range(n):
        s = "".join(rng.choice(pieces) for _ in range(rng.randint(0, 12)))
        for _ in range(rng.choice([0, 0, 1, 2, 3, 5])):
            s = quote(s, safe=rng.choice(["", "%", "/"]))
        out.append(s)
    return out


@criterion(5, "recursive decoding conformance and idempotence")
def test_decoding_conformance():
    assert decode_value("%253C") == "<"
    assert "%00" in decode_value("a%00b")
    violations = [s for s in _fuzz_corpus(10_000, 5) if decode_value(decode_value(s)) != decode_value(s)]
    assert violations == [], violations[:5]


# -- 6 ------------------------------------------------------------------------

@criterion(6, "attention degrees sum to one and recover the dominant parameter")
def test_attention_degree_math():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        H, n = rng.integers(1, 5), rng.integers(1, 11)
        raw = rng.normal(size=(H, n, n)) * rng.uniform(0.1, 8)
        heads = np.exp(raw) / np.exp(raw).sum(-1, keepdims=True)
        report = trace(AttentionRecord(heads))
        assert abs(report.degrees.sum() - 1) < 1e-5
        brute = [sum(heads[h, i, j] for h in range(H) for i in range(n)) / (H * n) for j in range(n)]
        assert np.allclose(report.degrees, brute, atol=1e-12)
        per_head = np.mean([attention_degrees(h) for h in heads], axis=0)
        assert np.allclose(attention_degrees(head_average(AttentionRecord(heads))), per_head, atol=1e-6)
    assert round(sum(XSS_DEGREES), 4) == 1.0
    deg = attention_degrees(np.tile(XSS_DEGREES, (5, 1)))
    assert np.allclose(deg, XSS_DEGREES) and int(np.argmax(deg)) == 1


# -- 7 ------------------------------------------------------------------------

@pytest.mark.slow
@criterion(7, "desk-scale training reaches F1 >= 0.95 with a falling loss")
def test_desk_training(desk_run):
    _, result, metrics, cpu = desk_run
    losses = result.epoch_losses
    print(f"epoch losses {[round(x, 4) for x in losses]}  test f1 {metrics.f1:.4f}  cpu {cpu:.0f}s")
    assert len(losses) <= 10
    assert metrics.f1 >= 0.95
    assert losses[0] > losses[1] > losses[2]
    assert cpu < 15 * 60


# -- 8 ------------------------------------------------------------------------

@pytest.mark.slow
@criterion(8, "ablation directions: dual channel and set fusion")
def test_ablation_directions():
    # one shared budget for every variant: long enough for set fusion to leave its early plateau
    run = desk_scale()
    run.train.epochs = 5
    ds = generate_synthetic(2000, seed=0, url_attack_rate=0.3)
    train_set, test_set = split(ds, seed=0)
    permuted = permute_params(test_set.records, seed=1)
    f1 = {}
    for channel in ("dual", "url_only", "payload_only"):
        cfg = desk_scale()
        cfg.train.epochs = run.train.epochs
        cfg.model.channel_mode = channel
        model, _, metrics = train_and_evaluate(cfg, train_set.records, test_set.records)
        f1[channel] = metrics.f1
        if channel == "dual":
            # the dual set_fusion model is also the set_fusion variant of the order ablation
            f1["set_fusion"] = evaluate(model, permuted).f1
    cfg = desk_scale()
    cfg.train.epochs = run.train.epochs
    cfg.model.payload_mode = "flat"
    model, _, _ = train_and_evaluate(cfg, train_set.records, test_set.records)
    f1["flat"] = evaluate(model, permuted).f1
    print("ablation f1", json.dumps({k: round(v, 4) for k, v in f1.items()}))
    assert f1["dual"] >= max(f1["url_only"], f1["payload_only"])
    assert f1["set_fusion"] >= f1["flat"]


# -- 9 ------------------------------------------------------------------------

@pytest.mark.slow
@criterion(9, "top attention degree finds the injected parameter")
def test_traceability(desk_run):
    model = desk_run[0]
    pool = [r for r in generate_synthetic(600, seed=99) if r.label == 1][:200]
    assert len(pool) == 200 and all(r.attack_param is not None for r in pool)
    preds = model.predict(pool)
    hits = sum(trace(p.attention).top == r.attack_param for r, p in zip(pool, preds))
    print(f"traceability top-1 {hits}/200")
    assert hits / 200 >= 0.80


# -- 10 -----------------------------------------------------------------------

@criterion(10, "identical seeds give byte-identical checkpoints and metrics")
def test_determinism(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        argv = ["-q", "train", "--data", "synthetic:300", "--seed", "7", "--threads", "1",
                "--set", "train.epochs=2", "--out", str(out)]
        assert main(argv) == 0
        (run,) = out.iterdir()
        outs.append(run)
    a, b = outs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "run.json")
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "run.json")
    assert any(f.name == "weights.bin" for f in files) and any(f.name == "metrics.json" for f in files)
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
