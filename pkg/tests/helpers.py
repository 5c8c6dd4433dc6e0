"""Shared builders for small models and requests."""

import random

from dualwaf.config import DetectorConfig, EncoderConfig, FusionConfig
from dualwaf.detector import Detector
from dualwaf.request import Parameter, ParsedRequest
from dualwaf.training import build_vocabs

KEYS = ["id", "nombre", "precio", "cantidad", "B1", "login", "pwd", "email", "modo", "cp"]
VALUES = ["1", "Vino Rioja", "85", "<script>alert(1)</script>", "' or 'a='a'", "../../etc/passwd",
          "juan@mail.es", "; cat /etc/passwd", "Entrar", "28001", "ñandú", "x y z"]


def toy_config(hidden=16, heads=2, layers=2, **kw) -> DetectorConfig:
    enc = dict(layers=layers, hidden=hidden, heads=heads, intermediate=2 * hidden, char_dim=8, gru_hidden=4)
    return DetectorConfig(
        url_encoder=EncoderConfig(vocab_size=400, max_len=32, max_chars=96, **enc),
        param_encoder=EncoderConfig(vocab_size=600, max_len=32, max_chars=96, **enc),
        fusion=FusionConfig(heads=heads, head_size=hidden // heads, intermediate=2 * hidden),
        dropout=0.0,
        **kw,
    )


def random_request(rng: random.Random, n_params: int, label=None) -> ParsedRequest:
    path = "/".join(rng.choice(["tienda1", "publico", "anadir.jsp", "miembros", "a"]) for _ in range(3))
    params = [Parameter(rng.choice(KEYS), rng.choice(VALUES), rng.choice(["query", "body", "header"]))
              for _ in range(n_params)]
    return ParsedRequest(f"{rng.choice(['get', 'post'])} /{path}", params, label)


def corpus(n=40, seed=0):
    rng = random.Random(seed)
    return [random_request(rng, rng.randint(0, 5), rng.randint(0, 1)) for _ in range(n)]


def toy_model(seed=0, cfg=None, records=None) -> Detector:
    cfg = cfg or toy_config()
    records = records or corpus()
    return Detector(cfg, build_vocabs(records, cfg), seed=seed).eval()
