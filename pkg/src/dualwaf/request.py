"""HTTP request decomposition into a URL channel and a payload-parameter channel."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Sequence

DEFAULT_HEADER_PARAMS: tuple[str, ...] = ("User-Agent", "Cookie", "Referer", "Content-Type")
MAX_DECODE_PASSES = 8

_SLASH_RUN = re.compile(r"/{2,}")
_ABSOLUTE_FORM = re.compile(r"^[A-Za-z][A-Za-z0-9+.-]*://[^/?#]*")
_HEX = frozenset("0123456789abcdefABCDEF")


class RequestError(ValueError):
    """Base class for request framing errors."""


class MalformedRequestLine(RequestError):
    pass


class MalformedHeader(RequestError):
    pass


@dataclass
class RawRequest:
    method: str
    target: str
    version: str
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""

    @property
    def path(self) -> str:
        return self.target.split("?", 1)[0]

    @property
    def query(self) -> str:
        return self.target.split("?", 1)[1] if "?" in self.target else ""

    def header(self, name: str) -> str | None:
        lname = name.lower()
        for key, value in self.headers:
            if key.lower() == lname:
                return value
        return None


@dataclass(frozen=True)
class Parameter:
    key: str
    value: str
    source: str = "query"  # query | body | header

    @property
    def text(self) -> str:
        return f"{self.key}={self.value}"


@dataclass
class ParsedRequest:
    url: str
    params: list[Parameter] = field(default_factory=list)
    label: int | None = None
    # index into ``params`` of the injected parameter (synthetic data only)
    attack_param: int | None = None

    def to_dict(self) -> dict:
        out = {
            "url": self.url,
            "params": [{"key": p.key, "value": p.value, "source": p.source} for p in self.params],
            "label": self.label,
        }
        if self.attack_param is not None:
            out["attack_param"] = self.attack_param
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ParsedRequest":
        return cls(
            url=d["url"],
            params=[Parameter(p["key"], p["value"], p.get("source", "query")) for p in d.get("params", [])],
            label=d.get("label"),
            attack_param=d.get("attack_param"),
        )


def parse_request(raw: bytes | str) -> RawRequest:
    """Split request text into request line, ordered headers and body.

    Absolute-form targets (``http://host/path``) are reduced to origin form.
    """
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    head, body = _split_head(raw)
    text = head.decode("utf-8", errors="replace")
    lines = text.split("\n")
    lines = [ln[:-1] if ln.endswith("\r") else ln for ln in lines]
    while lines and not lines[0].strip():
        lines.pop(0)
    if not lines:
        raise MalformedRequestLine("empty request")

    fields = lines[0].split()
    if len(fields) < 3:
        raise MalformedRequestLine(f"request line has {len(fields)} field(s): {lines[0]!r}")
    method, version = fields[0], fields[-1]
    target = " ".join(fields[1:-1])
    if not method.isprintable() or not method.isascii():
        raise MalformedRequestLine(f"bad method token {method!r}")
    m = _ABSOLUTE_FORM.match(target)
    if m:
        target = target[m.end():] or "/"
    if not (target.startswith("/") or target == "*"):
        raise MalformedRequestLine(f"bad request target {target!r}")

    headers: list[tuple[str, str]] = []
    for line in lines[1:]:
        if not line:
            continue
        if line[0] in " \t" and headers:
            name, value = headers[-1]
            headers[-1] = (name, f"{value} {line.strip()}")
            continue
        name, sep, value = line.partition(":")
        if not sep or not name.strip():
            raise MalformedHeader(f"header line without name/colon: {line!r}")
        if any(unicodedata.category(c) == "Cc" for c in name):
            raise MalformedHeader(f"control character in header name {name!r}")
        headers.append((name.strip(), value.strip()))
    return RawRequest(method=method, target=target, version=version, headers=headers, body=body)


def _split_head(raw: bytes) -> tuple[bytes, bytes]:
    crlf = raw.find(b"\r\n\r\n")
    lf = raw.find(b"\n\n")
    candidates = [(crlf, 4), (lf, 2)]
    candidates = [c for c in candidates if c[0] >= 0]
    if not candidates:
        return raw, b""
    pos, width = min(candidates)
    return raw[:pos], raw[pos + width:]


def normalize_url(method: str, path: str) -> str:
    path = _SLASH_RUN.sub("/", path).lower() or "/"
    return f"{method.lower()} {path}"


def _decode_pass(s: str) -> str:
    """One left-to-right percent-decoding pass.

    Runs of consecutive ``%XX`` triples are turned into bytes and decoded as
    UTF-8 one character at a time; bytes that do not start a valid character,
    and NUL, are re-emitted as their original triple.
    """
    out: list[str] = []
    i, n = 0, len(s)
    while i < n:
        if s[i] != "%" or not _is_triple(s, i):
            out.append(s[i])
            i += 1
            continue
        triples: list[str] = []
        while i < n and s[i] == "%" and _is_triple(s, i):
            triples.append(s[i:i + 3])
            i += 3
        data = bytes(int(t[1:], 16) for t in triples)
        j = 0
        while j < len(data):
            ch, width = _utf8_char(data, j)
            if ch is None or ch == "\x00":
                out.append(triples[j])
                j += 1
            else:
                out.append(ch)
                j += width
    return "".join(out)


def _is_triple(s: str, i: int) -> bool:
    return i + 2 < len(s) and s[i + 1] in _HEX and s[i + 2] in _HEX


def _utf8_char(data: bytes, j: int) -> tuple[str | None, int]:
    lead = data[j]
    if lead < 0x80:
        width = 1
    elif 0xC2 <= lead <= 0xDF:
        width = 2
    elif 0xE0 <= lead <= 0xEF:
        width = 3
    elif 0xF0 <= lead <= 0xF4:
        width = 4
    else:
        return None, 1
    chunk = data[j:j + width]
    if len(chunk) < width:
        return None, 1
    try:
        return chunk.decode("utf-8"), width
    except UnicodeDecodeError:
        return None, 1


def to_halfwidth(s: str) -> str:
    """Map characters with a ``<wide>`` compatibility decomposition to their narrow form."""
    if s.isascii():
        return s
    out = []
    for c in s:
        dec = unicodedata.decomposition(c)
        if dec.startswith("<wide>"):
            out.append("".join(chr(int(h, 16)) for h in dec.split()[1:]))
        else:
            out.append(c)
    return "".join(out)


def decode_value(s: str, max_passes: int = MAX_DECODE_PASSES) -> str:
    """Recursively percent-decode ``s`` and fold full-width forms to half-width.

    Illegal or incomplete escapes (bad hex, NUL, invalid UTF-8) are kept
    verbatim. Width folding runs inside the loop so that escapes written
    with full-width characters are decoded too.
    """
    for _ in range(max_passes):
        nxt = to_halfwidth(_decode_pass(s))
        if nxt == s:
            break
        s = nxt
    return s


def _form_decode(s: str) -> str:
    return decode_value(s.replace("+", " "))


def split_pairs(text: str, source: str) -> list[Parameter]:
    params = []
    for segment in text.split("&"):
        key, _, value = segment.partition("=")
        key = _form_decode(key)
        if not key:
            continue
        params.append(Parameter(key, _form_decode(value), source))
    return params


def extract_parameters(
    req: RawRequest, header_params: Iterable[str] = DEFAULT_HEADER_PARAMS
) -> list[Parameter]:
    params = split_pairs(req.query, "query") if req.query else []

    if req.body:
        body = req.body.decode("utf-8", errors="replace")
        ctype = (req.header("Content-Type") or "").lower()
        if not ctype or "x-www-form-urlencoded" in ctype:
            params.extend(split_pairs(body.strip("\r\n"), "body"))
        else:
            params.append(Parameter("body", decode_value(body), "body"))

    wanted = {h.lower() for h in header_params}
    for name, value in req.headers:
        if name.lower() in wanted:
            key = decode_value(name)
            if key:
                params.append(Parameter(key, decode_value(value), "header"))
    return params


def build_parsed_request(
    req: RawRequest,
    label: int | None = None,
    header_params: Sequence[str] = DEFAULT_HEADER_PARAMS,
) -> ParsedRequest:
    return ParsedRequest(
        url=normalize_url(req.method, req.path),
        params=extract_parameters(req, header_params),
        label=label,
    )


def parse(raw: bytes | str, label: int | None = None,
          header_params: Sequence[str] = DEFAULT_HEADER_PARAMS) -> ParsedRequest:
    """Shortcut: raw request text straight to a ParsedRequest."""
    return build_parsed_request(parse_request(raw), label, header_params)


def raw_from_fields(
    method: str,
    url: str,
    query: str = "",
    body: str = "",
    headers: dict | Sequence[tuple[str, str]] | None = None,
) -> RawRequest:
    """Build a RawRequest from the JSON-lines record fields."""
    m = _ABSOLUTE_FORM.match(url)
    if m:
        url = url[m.end():] or "/"
    if "?" in url:
        url, inline_query = url.split("?", 1)
        query = f"{inline_query}&{query}" if query else inline_query
    if not url.startswith("/"):
        url = "/" + url
    target = f"{url}?{query}" if query else url
    if headers is None:
        pairs: list[tuple[str, str]] = []
    elif isinstance(headers, dict):
        pairs = [(str(k), str(v)) for k, v in headers.items()]
    else:
        pairs = [(str(k), str(v)) for k, v in headers]
    return RawRequest(method=method or "GET", target=target, version="HTTP/1.1",
                      headers=pairs, body=(body or "").encode("utf-8"))
