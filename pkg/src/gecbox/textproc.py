"""Byte-pair encoding over pre-tokenised text.

Segmentation starts from the characters of each token, with no end-of-word
symbol. Every subword except the last one of a token carries the
continuation marker as a suffix (``low@@ er``), so reverting is a plain join.
"""
from __future__ import annotations

import heapq
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

logger = logging.getLogger(__name__)

DEFAULT_MERGES = 50_000
MARKER = "@@"
_HEADER = "#gecbox-bpe v1"

Pair = tuple[str, str]


class BpeError(ValueError):
    pass


@dataclass
class BpeModel:
    merges: list[Pair]
    marker: str = MARKER
    ranks: dict[Pair, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self.ranks = {}
        for i, pair in enumerate(self.merges):
            if pair in self.ranks:
                raise BpeError(f"duplicate merge {pair}")
            self.ranks[pair] = i

    def save(self, fh: TextIO) -> None:
        fh.write(f"{_HEADER} marker={self.marker}\n")
        for a, b in self.merges:
            fh.write(f"{a} {b}\n")

    @classmethod
    def load(cls, fh: TextIO) -> "BpeModel":
        lines = fh.read().split("\n")
        if not lines or not lines[0].startswith("#"):
            raise BpeError("BPE model file must start with a '#' version line")
        marker = MARKER
        for part in lines[0].split():
            if part.startswith("marker="):
                marker = part[len("marker="):]
        merges = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise BpeError(f"line {lineno}: expected two symbols, got {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges, marker)


def _word_pairs(symbols: Sequence[str]) -> Counter:
    return Counter(zip(symbols, symbols[1:]))


def _merge_symbols(symbols: Sequence[str], pair: Pair) -> list[str]:
    a, b = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_learn(corpus: Iterable[Sequence[str]], num_merges: int = DEFAULT_MERGES,
              marker: str = MARKER) -> BpeModel:
    """Learn merges greedily by pair frequency; ties go to the smallest pair."""
    if num_merges < 1:
        raise BpeError("num_merges must be >= 1")
    vocab: Counter = Counter()
    for sent in corpus:
        vocab.update(sent)
    if not vocab:
        raise BpeError("cannot learn BPE from an empty corpus")
    for tok in vocab:
        if marker in tok:
            raise BpeError(f"token {tok!r} contains the continuation marker")

    words = [list(w) for w in sorted(vocab)]
    freqs = [vocab[w] for w in sorted(vocab)]
    stats: Counter = Counter()
    where: dict[Pair, set[int]] = defaultdict(set)
    for i, syms in enumerate(words):
        for pair, c in _word_pairs(syms).items():
            stats[pair] += c * freqs[i]
            where[pair].add(i)
    heap = [(-c, p) for p, c in stats.items()]
    heapq.heapify(heap)

    merges: list[Pair] = []
    while len(merges) < num_merges:
        best = None
        while heap:
            negc, pair = heapq.heappop(heap)
            if stats.get(pair, 0) == -negc and negc < 0:
                best = pair
                break
        if best is None:
            break
        merges.append(best)
        touched = set()
        for i in sorted(where.pop(best, ())):
            old = words[i]
            new = _merge_symbols(old, best)
            if new == old:
                continue
            for pair, c in _word_pairs(old).items():
                stats[pair] -= c * freqs[i]
                touched.add(pair)
                if pair != best and pair in where:
                    where[pair].discard(i)
            for pair, c in _word_pairs(new).items():
                stats[pair] += c * freqs[i]
                where[pair].add(i)
                touched.add(pair)
            words[i] = new
        for pair in touched:
            c = stats.get(pair, 0)
            if c <= 0:
                stats.pop(pair, None)
            else:
                heapq.heappush(heap, (-c, pair))
    if len(merges) < num_merges:
        logger.warning("only %d merges possible, %d requested", len(merges), num_merges)
    return BpeModel(merges, marker)


def segment_token(model: BpeModel, token: str) -> list[str]:
    symbols = list(token)
    ranks = model.ranks
    while len(symbols) > 1:
        best_rank = None
        best = None
        for pair in zip(symbols, symbols[1:]):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best = r, pair
        if best is None:
            break
        symbols = _merge_symbols(symbols, best)
    return symbols


def bpe_apply(model: BpeModel, tokens: Sequence[str]) -> list[str]:
    out = []
    cache: dict[str, list[str]] = {}
    for tok in tokens:
        if model.marker in tok:
            raise BpeError(f"token {tok!r} already contains the marker {model.marker!r}")
        if tok not in cache:
            pieces = segment_token(model, tok)
            cache[tok] = [p + model.marker for p in pieces[:-1]] + [pieces[-1]]
        out.extend(cache[tok])
    return out


def bpe_revert(tokens: Sequence[str], marker: str = MARKER) -> list[str]:
    out = []
    buf = ""
    for tok in tokens:
        if tok.endswith(marker):
            buf += tok[: -len(marker)]
        else:
            out.append(buf + tok)
            buf = ""
    if buf:
        logger.debug("trailing continuation marker on final token; joining with nothing")
        out.append(buf)
    return out


def lowercase_first(tokens: Sequence[str]) -> tuple[list[str], bool]:
    """Lowercase the sentence-initial token; returns whether it changed."""
    tokens = list(tokens)
    if tokens and tokens[0] != tokens[0].lower():
        tokens[0] = tokens[0].lower()
        return tokens, True
    return tokens, False


def restore_first(tokens: Sequence[str], was_upper: bool) -> list[str]:
    tokens = list(tokens)
    if was_upper and tokens:
        tokens[0] = tokens[0][:1].upper() + tokens[0][1:]
    return tokens


def read_lines(fh: TextIO) -> list[list[str]]:
    return [line.split() for line in fh.read().splitlines()]


def write_lines(fh: TextIO, sents: Iterable[Sequence[str]]) -> None:
    for s in sents:
        fh.write(" ".join(s) + "\n")
