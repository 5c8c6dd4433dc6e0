"""WordPiece tokenization with character-span alignment.

Every token carries the inclusive ``(start, end)`` codepoint span it covers in
the original text; special tokens use the sentinel ``(-1, -1)``. The raw
character ids of the whole text travel alongside the token ids so the hybrid
embedding can run its character GRU over them.
"""

from __future__ import annotations

import heapq
import json
import re
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
CONTINUATION = "##"
SENTINEL = (-1, -1)
MAX_WORD_CHARS = 100

URL_VOCAB_SIZE = 5000
PARAM_VOCAB_SIZE = 52000

_WORD_RE = re.compile(r"[A-Za-z0-9]+|[^A-Za-z0-9\s]")


class TokenizerError(ValueError):
    pass


class EmptyCorpus(TokenizerError):
    pass


class VocabTooSmall(TokenizerError):
    pass


class Vocab:
    """Dense token <-> id map. Specials occupy ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise TokenizerError("vocab must start with the special tokens")
        self.tokens: list[str] = list(tokens)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise TokenizerError("duplicate tokens in vocab")

    pad_id = 0
    unk_id = 1
    cls_id = 2
    sep_id = 3

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1])


class CharVocab:
    """Fixed 416-entry character vocabulary.

    ids 0-255 are codepoints U+0000-U+00FF, 256-413 a reserved block of
    common non-Latin-1 codepoints, 414 is padding and 415 unknown.
    """

    RESERVED = tuple(range(0x0100, 0x0180)) + tuple(range(0x2010, 0x202E))
    SIZE = 416
    pad_id = 414
    unk_id = 415

    def __init__(self) -> None:
        assert 256 + len(self.RESERVED) + 2 == self.SIZE
        self.index: dict[str, int] = {chr(i): i for i in range(256)}
        for k, cp in enumerate(self.RESERVED):
            self.index[chr(cp)] = 256 + k

    def __len__(self) -> int:
        return self.SIZE

    def encode(self, text: str) -> list[int]:
        get = self.index.get
        unk = self.unk_id
        return [get(c, unk) for c in text]

    def to_json(self) -> str:
        entries = {str(ord(c)): i for c, i in self.index.items()}
        entries["[PAD]"] = self.pad_id
        entries["[UNK]"] = self.unk_id
        return json.dumps(entries, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CharVocab":
        cv = cls()
        if json.loads(Path(path).read_text(encoding="utf-8")) != json.loads(cv.to_json()):
            raise TokenizerError(f"char vocab at {path} does not match the built-in layout")
        return cv


CHAR_VOCAB = CharVocab()


@dataclass
class TokenizedText:
    token_ids: list[int]
    spans: list[tuple[int, int]]
    char_ids: list[int]
    tokens: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)


def pre_tokenize(text: str) -> list[tuple[str, int]]:
    """Split into words: alphanumeric runs and single symbols, whitespace dropped.

    Returns ``(word, start_offset)`` pairs.
    """
    words: list[tuple[str, int]] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c.isalnum():
            j = i + 1
            while j < n and text[j].isalnum():
                j += 1
            words.append((text[i:j], i))
            i = j
        else:
            words.append((c, i))
            i += 1
    return words


def _word_pieces(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + c for c in word[1:]]


def train_wordpiece(
    corpus: Iterable[str],
    target_size: int,
    include_ascii: bool = True,
) -> Vocab:
    """Greedy WordPiece vocabulary training.

    Starts from the character alphabet (word-initial and continuation forms)
    and repeatedly merges the adjacent pair with the highest
    ``count(ab) / (count(a) * count(b))`` until ``target_size`` entries exist
    or no pair remains. Ties go to the more frequent pair, then lexical order.
    """
    word_counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        for word, _ in pre_tokenize(text):
            if len(word) <= MAX_WORD_CHARS:
                word_counts[word] += 1
    if n_texts == 0 or not word_counts:
        raise EmptyCorpus("corpus contains no tokenizable text")

    alphabet: set[str] = set()
    if include_ascii:
        for c in string.printable.strip():
            alphabet.add(c)
            alphabet.add(CONTINUATION + c)
    for word in word_counts:
        alphabet.update(_word_pieces(word))
    if target_size < len(SPECIAL_TOKENS) + len(alphabet):
        raise VocabTooSmall(
            f"target size {target_size} < {len(SPECIAL_TOKENS)} specials + {len(alphabet)} alphabet entries"
        )
    vocab = list(SPECIAL_TOKENS) + sorted(alphabet)
    known = set(vocab)

    words = list(word_counts)
    counts = [word_counts[w] for w in words]
    splits = [_word_pieces(w) for w in words]

    piece_freq: Counter[str] = Counter()
    pair_freq: Counter[tuple[str, str]] = Counter()
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)
    piece_pairs: dict[str, set[tuple[str, str]]] = defaultdict(set)
    for wi, pieces in enumerate(splits):
        c = counts[wi]
        for p in pieces:
            piece_freq[p] += c
        for a, b in zip(pieces, pieces[1:]):
            pair_freq[(a, b)] += c
            pair_words[(a, b)].add(wi)
            piece_pairs[a].add((a, b))
            piece_pairs[b].add((a, b))

    def score(pair: tuple[str, str]) -> float:
        return pair_freq[pair] / (piece_freq[pair[0]] * piece_freq[pair[1]])

    heap = [(-score(p), -f, p) for p, f in pair_freq.items()]
    heapq.heapify(heap)

    while len(vocab) < target_size and heap:
        neg_s, neg_f, pair = heapq.heappop(heap)
        f = pair_freq.get(pair, 0)
        if f <= 0:
            continue
        cur = (-score(pair), -f)
        if cur != (neg_s, neg_f):
            heapq.heappush(heap, (*cur, pair))
            continue
        a, b = pair
        merged = a + b[len(CONTINUATION):] if b.startswith(CONTINUATION) else a + b
        if merged not in known:
            vocab.append(merged)
            known.add(merged)

        touched: set[tuple[str, str]] = set()
        for wi in sorted(pair_words.pop(pair, ())):
            old = splits[wi]
            c = counts[wi]
            new: list[str] = []
            k = 0
            while k < len(old):
                if k + 1 < len(old) and old[k] == a and old[k + 1] == b:
                    new.append(merged)
                    k += 2
                else:
                    new.append(old[k])
                    k += 1
            for x, y in zip(old, old[1:]):
                pair_freq[(x, y)] -= c
                touched.add((x, y))
                if (x, y) != pair:
                    pair_words[(x, y)].discard(wi)
            for p in old:
                piece_freq[p] -= c
            for p in new:
                piece_freq[p] += c
            for x, y in zip(new, new[1:]):
                pair_freq[(x, y)] += c
                pair_words[(x, y)].add(wi)
                piece_pairs[x].add((x, y))
                piece_pairs[y].add((x, y))
                touched.add((x, y))
            splits[wi] = new
        pair_freq.pop(pair, None)

        # scores move for every pair that shares a piece whose frequency changed
        for p in (a, b, merged):
            touched.update(piece_pairs[p])
        touched.discard(pair)
        for q in touched:
            fq = pair_freq.get(q, 0)
            if fq > 0:
                heapq.heappush(heap, (-score(q), -fq, q))
            else:
                pair_freq.pop(q, None)
    return Vocab(vocab)


def _wordpiece_word(word: str, start: int, vocab: Vocab) -> tuple[list[str], list[tuple[int, int]]]:
    if len(word) > MAX_WORD_CHARS:
        return [UNK], [(start, start + len(word) - 1)]
    pieces, spans = [], []
    i = 0
    while i < len(word):
        j = len(word)
        found = None
        while j > i:
            cand = word[i:j] if i == 0 else CONTINUATION + word[i:j]
            if cand in vocab.index:
                found = cand
                break
            j -= 1
        if found is None:
            return [UNK], [(start, start + len(word) - 1)]
        pieces.append(found)
        spans.append((start + i, start + j - 1))
        i = j
    return pieces, spans


class WordPieceTokenizer:
    """Longest-match-first segmentation over a trained Vocab."""

    def __init__(self, vocab: Vocab, char_vocab: CharVocab = CHAR_VOCAB):
        self.vocab = vocab
        self.char_vocab = char_vocab

    def segment(self, text: str) -> tuple[list[str], list[tuple[int, int]]]:
        tokens: list[str] = []
        spans: list[tuple[int, int]] = []
        for word, start in pre_tokenize(text):
            t, s = _wordpiece_word(word, start, self.vocab)
            tokens += t
            spans += s
        return tokens, spans

    def __call__(self, text: str) -> TokenizedText:
        tokens, spans = self.segment(text)
        return _wrap(tokens, spans, self.vocab, self.char_vocab.encode(text))


class WordTokenizer:
    """Regex word tokenizer (word-embedding ablation)."""

    def __init__(self, vocab: Vocab, char_vocab: CharVocab = CHAR_VOCAB):
        self.vocab = vocab
        self.char_vocab = char_vocab

    def __call__(self, text: str) -> TokenizedText:
        tokens, spans = [], []
        for m in _WORD_RE.finditer(text):
            tokens.append(m.group() if m.group() in self.vocab else UNK)
            spans.append((m.start(), m.end() - 1))
        return _wrap(tokens, spans, self.vocab, self.char_vocab.encode(text))


class CharTokenizer:
    """Every character is a token (char-embedding ablation).

    Token ids index the character vocabulary; [CLS] and [SEP] are appended
    after it at ``len(char_vocab)`` and ``len(char_vocab) + 1``.
    """

    def __init__(self, char_vocab: CharVocab = CHAR_VOCAB):
        self.char_vocab = char_vocab
        self.cls_id = len(char_vocab)
        self.sep_id = len(char_vocab) + 1
        self.pad_id = char_vocab.pad_id

    @property
    def size(self) -> int:
        return len(self.char_vocab) + 2

    def __call__(self, text: str) -> TokenizedText:
        char_ids = self.char_vocab.encode(text)
        return TokenizedText(
            token_ids=[self.cls_id] + char_ids + [self.sep_id],
            spans=[SENTINEL] + [(i, i) for i in range(len(text))] + [SENTINEL],
            char_ids=char_ids,
            tokens=[CLS] + list(text) + [SEP],
        )


def _wrap(tokens: list[str], spans: list[tuple[int, int]], vocab: Vocab, char_ids: list[int]) -> TokenizedText:
    ids = [vocab.cls_id] + [vocab.id(t) for t in tokens] + [vocab.sep_id]
    return TokenizedText(
        token_ids=ids,
        spans=[SENTINEL] + spans + [SENTINEL],
        char_ids=char_ids,
        tokens=[CLS] + tokens + [SEP],
    )


def train_word_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Most frequent regex words, ties broken lexically."""
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(_WORD_RE.findall(text))
    if not counts:
        raise EmptyCorpus("corpus contains no words")
    room = target_size - len(SPECIAL_TOKENS)
    if room < 1:
        raise VocabTooSmall(f"target size {target_size} leaves no room for words")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:room]
    return Vocab(list(SPECIAL_TOKENS) + [w for w, _ in ranked])


def concat_tokenized(parts: Sequence[TokenizedText], sep_id: int, cls_id: int, gap: int = 1) -> TokenizedText:
    """Join already-wrapped tokenizations into one [CLS] a [SEP] b [SEP] ... sequence.

    Character sequences are joined with ``gap`` padding-free spacer
    characters (spaces) so spans stay aligned with the combined text.
    """
    ids, spans, chars, toks = [cls_id], [SENTINEL], [], [CLS]
    offset = 0
    space = CHAR_VOCAB.index[" "]
    for k, part in enumerate(parts):
        if k:
            chars.extend([space] * gap)
            offset += gap
        part_toks = part.tokens or [""] * len(part.token_ids)
        for tid, span, tok in zip(part.token_ids[1:-1], part.spans[1:-1], part_toks[1:-1]):
            ids.append(tid)
            spans.append(span if span == SENTINEL else (span[0] + offset, span[1] + offset))
            toks.append(tok)
        chars.extend(part.char_ids)
        offset += len(part.char_ids)
        ids.append(sep_id)
        spans.append(SENTINEL)
        toks.append(SEP)
    if not parts:
        ids.append(sep_id)
        spans.append(SENTINEL)
        toks.append(SEP)
    return TokenizedText(ids, spans, chars, toks)


def pad_and_truncate(t: TokenizedText, max_len: int, pad_id: int = Vocab.pad_id) -> TokenizedText:
    """Force ``len(token_ids) == max_len``.

    Long inputs keep [CLS], the first ``max_len - 2`` content tokens and a
    re-appended closing token; characters past the last kept span are cut
    so the character sequence matches the kept text.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    n = len(t.token_ids)
    toks = t.tokens or [""] * n
    if n == max_len:
        return t
    if n < max_len:
        k = max_len - n
        return TokenizedText(
            t.token_ids + [pad_id] * k,
            t.spans + [SENTINEL] * k,
            t.char_ids,
            toks + [PAD] * k,
        )
    keep = max_len - 2
    ids = t.token_ids[: keep + 1] + [t.token_ids[-1]]
    spans = t.spans[: keep + 1] + [SENTINEL]
    last_end = max((e for _, e in spans if e >= 0), default=-1)
    return TokenizedText(ids, spans, t.char_ids[: last_end + 1], toks[: keep + 1] + [toks[-1]])


def tokenize(text: str, vocab: Vocab) -> TokenizedText:
    """WordPiece tokenization of ``text`` wrapped in [CLS] ... [SEP]."""
    return WordPieceTokenizer(vocab)(text)
