"""Parallel corpora, M2 annotations, error-rate adaptation and synthetic data."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from .align import levenshtein_align
from .autodiff import rng_for

logger = logging.getLogger(__name__)

DEFAULT_OVERSAMPLE = 10
DEFAULT_TARGET_RATE = 0.15
DEFAULT_BATCH_SIZE = 200


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Edit:
    start: int
    end: int
    replacement: tuple[str, ...] = ()
    etype: str = "X"
    annotator: int = 0

    def __post_init__(self):
        object.__setattr__(self, "replacement", tuple(self.replacement))

    @property
    def is_noop(self) -> bool:
        return self.etype == "noop"

    @property
    def is_insertion(self) -> bool:
        return self.start == self.end

    def key(self) -> tuple:
        """Identity used for matching: span plus correction."""
        return (self.start, self.end, self.replacement)


@dataclass
class ParallelExample:
    src: list[str]
    trg: list[str]
    gold: list[Edit] | None = None
    domain_tag: str = "general"

    def annotations(self) -> dict[int, list[Edit]]:
        return group_by_annotator(self.gold or [])


@dataclass
class CorpusStats:
    sentence_count: int
    token_count: int
    error_tokens: int
    error_rate: float


@dataclass
class M2Sentence:
    src: list[str]
    edits: list[Edit] = field(default_factory=list)

    def annotations(self) -> dict[int, list[Edit]]:
        """Edits grouped by annotator; a noop line yields an empty set."""
        return group_by_annotator(self.edits)


def group_by_annotator(edits: Iterable[Edit]) -> dict[int, list[Edit]]:
    groups: dict[int, list[Edit]] = {}
    for e in edits:
        groups.setdefault(e.annotator, [])
        if not e.is_noop:
            groups[e.annotator].append(e)
    return groups


# ---------------------------------------------------------------------------
# M2 files
# ---------------------------------------------------------------------------

def parse_m2(stream: TextIO | Iterable[str]) -> list[M2Sentence]:
    sentences: list[M2Sentence] = []
    current: M2Sentence | None = None
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n")
        if not line:
            current = None
            continue
        if line.startswith("S"):
            if line != "S" and not line.startswith("S "):
                raise CorpusError(f"line {lineno}: malformed sentence line")
            current = M2Sentence(line[2:].split(" ") if len(line) > 2 else [])
            sentences.append(current)
        elif line.startswith("A "):
            if current is None:
                raise CorpusError(f"line {lineno}: annotation without preceding S line")
            fields = line[2:].split("|||")
            if len(fields) != 6:
                raise CorpusError(f"line {lineno}: expected 6 '|||' fields, got {len(fields)}")
            span = fields[0].split()
            if len(span) != 2:
                raise CorpusError(f"line {lineno}: malformed span {fields[0]!r}")
            try:
                start, end, annotator = int(span[0]), int(span[1]), int(fields[5])
            except ValueError:
                raise CorpusError(f"line {lineno}: non-integer span or annotator") from None
            etype, corr = fields[1], fields[2]
            if etype == "noop":
                current.edits.append(Edit(start, end, (), "noop", annotator))
                continue
            if not 0 <= start <= end <= len(current.src):
                raise CorpusError(f"line {lineno}: span {start}-{end} out of bounds "
                                  f"for sentence of {len(current.src)} tokens")
            repl = () if corr in ("", "-NONE-") else tuple(corr.split(" "))
            current.edits.append(Edit(start, end, repl, etype, annotator))
        else:
            raise CorpusError(f"line {lineno}: unexpected line {line[:20]!r}")
    return sentences


def format_m2(sentences: Iterable[M2Sentence]) -> str:
    blocks = []
    for s in sentences:
        lines = ["S " + " ".join(s.src)]
        for e in s.edits:
            corr = "-NONE-" if e.is_noop else " ".join(e.replacement)
            lines.append(f"A {e.start} {e.end}|||{e.etype}|||{corr}|||REQUIRED|||-NONE-|||{e.annotator}")
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def m2_from_examples(corpus: Sequence[ParallelExample]) -> list[M2Sentence]:
    out = []
    for ex in corpus:
        edits = list(ex.gold or [])
        if not edits:
            edits = [Edit(-1, -1, (), "noop", 0)]
        out.append(M2Sentence(list(ex.src), edits))
    return out


def examples_from_m2(sentences: Sequence[M2Sentence], annotator: int = 0,
                     domain_tag: str = "general") -> list[ParallelExample]:
    out = []
    for s in sentences:
        ann = s.annotations()
        edits = ann.get(annotator, [])
        out.append(ParallelExample(list(s.src), apply_edits(s.src, edits),
                                   [e for e in s.edits], domain_tag))
    return out


# ---------------------------------------------------------------------------
# edit application and error rates
# ---------------------------------------------------------------------------

def apply_edits(src: Sequence[str], edits: Sequence[Edit]) -> list[str]:
    edits = sorted((e for e in edits if not e.is_noop), key=lambda e: (e.start, e.end))
    for a, b in zip(edits, edits[1:]):
        if b.start < a.end or (a.is_insertion and b.is_insertion and a.start == b.start):
            raise CorpusError(f"overlapping edits {a.key()} and {b.key()}")
    out = list(src)
    for e in reversed(edits):
        if not 0 <= e.start <= e.end <= len(src):
            raise CorpusError(f"edit span {e.start}-{e.end} out of bounds")
        out[e.start:e.end] = list(e.replacement)
    return out


def pair_error_tokens(src: Sequence[str], trg: Sequence[str]) -> int:
    """Target tokens outside the identity part of the Levenshtein alignment."""
    if list(src) == list(trg):
        return 0
    links = levenshtein_align(src, trg)
    return sum(1 for t, s in links if s is None or src[s] != trg[t])


def error_rate(corpus: Sequence[ParallelExample]) -> CorpusStats:
    if not corpus:
        raise CorpusError("error_rate of an empty corpus")
    tokens = errors = 0
    for ex in corpus:
        tokens += len(ex.trg)
        errors += pair_error_tokens(ex.src, ex.trg)
    rate = errors / tokens if tokens else 0.0
    return CorpusStats(len(corpus), tokens, errors, rate)


def oversample(corpus: Sequence[ParallelExample], tag: str,
               factor: int = DEFAULT_OVERSAMPLE) -> list[ParallelExample]:
    """Repeat the pairs carrying ``tag`` so they occur ``factor`` times.

    The original corpus comes first; the extra copies follow, in corpus order.
    """
    if factor < 1:
        raise CorpusError("oversampling factor must be >= 1")
    tagged = [ex for ex in corpus if ex.domain_tag == tag]
    if not tagged:
        logger.warning("no pair carries tag %r; oversampling is a no-op", tag)
    return list(corpus) + tagged * (factor - 1)


def error_rate_adapt(corpus: Sequence[ParallelExample],
                     target_rate: float = DEFAULT_TARGET_RATE) -> list[ParallelExample]:
    """Drop error-free pairs, in corpus order, until the error rate reaches the target."""
    if not 0.0 < target_rate < 1.0:
        raise CorpusError("target_rate must be in (0, 1)")
    stats = error_rate(corpus)
    tokens, errors = stats.token_count, stats.error_tokens
    removed: set[int] = set()
    for i, ex in enumerate(corpus):
        if tokens and errors / tokens >= target_rate:
            break
        if ex.src == ex.trg:
            removed.add(i)
            tokens -= len(ex.trg)
    achieved = errors / tokens if tokens else 0.0
    if achieved < target_rate:
        logger.warning("target error rate %.4f unreachable; achieved %.4f", target_rate, achieved)
    return [ex for i, ex in enumerate(corpus) if i not in removed]


def make_batches(items: Sequence, target_tokens_per_batch: int | None = None,
                 batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0, epoch: int = 0,
                 length: Callable | None = None) -> list[list]:
    """Length-bucketed batches, deterministic for a given (seed, epoch).

    With ``target_tokens_per_batch`` each batch is filled up to that many
    tokens; otherwise every batch holds ``batch_size`` items (the last may be
    smaller).
    """
    if not items:
        return []
    if length is None:
        def length(x):
            return max(len(x.src), len(x.trg))
    rng = rng_for(seed, "batches", epoch)
    order = rng.permutation(len(items))
    order = sorted(order, key=lambda i: length(items[i]))
    chunks: list[list[int]] = []
    cur: list[int] = []
    cur_tokens = 0
    for i in order:
        n = length(items[i])
        if target_tokens_per_batch is not None:
            if cur and cur_tokens + n > target_tokens_per_batch:
                chunks.append(cur)
                cur, cur_tokens = [], 0
        elif len(cur) == batch_size:
            chunks.append(cur)
            cur = []
        cur.append(i)
        cur_tokens += n
    if cur:
        chunks.append(cur)
    perm = rng.permutation(len(chunks))
    return [[items[i] for i in chunks[j]] for j in perm]


# ---------------------------------------------------------------------------
# synthetic learner corpus
# ---------------------------------------------------------------------------

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "v", "z", "br", "gl", "tr", "pl", "kr"]
_VOWELS = ["a", "e", "i", "o", "u"]
_CODAS = ["", "", "n", "m", "l", "r", "k", "p"]
SINGULAR_DETS = ("a", "this")
PLURAL_DETS = ("some", "these")
PERIOD = "."


@dataclass
class Lexicon:
    nouns: list[str]
    noun_class: list[int]
    verbs: list[str]
    adjs: list[str]
    preps: list[str]
    misspell: dict[str, str]
    pos: dict[str, str]

    @property
    def size(self) -> int:
        return len(self.nouns) + len(self.verbs) + len(self.adjs) + len(self.preps) + 5


def _pseudo_words(n: int, rng: np.random.Generator, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    + _CODAS[rng.integers(len(_CODAS))] for _ in range(k))
        # plural and third-person forms append "s"; keep bases free of it
        if w.endswith("s") or w in taken or w + "s" in taken:
            continue
        taken.update({w, w + "s"})
        out.append(w)
    return out


def _misspelling(word: str, taken: set[str]) -> str:
    cands = []
    for i in range(1, len(word) - 1):
        cands.append(word[:i] + word[i + 1] + word[i] + word[i + 2:])
    for i in range(len(word)):
        cands.append(word[:i] + word[i] + word[i:])
    for c in cands:
        if c != word and c not in taken:
            taken.add(c)
            return c
    raise CorpusError(f"no free misspelling for {word!r}")


def build_lexicon(vocab_size: int) -> Lexicon:
    """Deterministic lexicon with ``vocab_size`` clean lemma types.

    Five function tokens (four determiners and the period) count towards the
    total; the rest splits into nouns, verbs, adjectives and prepositions.
    Surface forms (plurals, agreement, misspellings) come on top.
    """
    if vocab_size < 20:
        raise CorpusError("vocab_size must be at least 20")
    rng = rng_for(0, f"lexicon:{vocab_size}")
    n_content = vocab_size - 5
    n_preps = max(2, n_content // 10)
    n_nouns = int(n_content * 0.4)
    n_verbs = int(n_content * 0.25)
    n_adjs = n_content - n_preps - n_nouns - n_verbs
    taken = set(SINGULAR_DETS + PLURAL_DETS + (PERIOD,))
    nouns = _pseudo_words(n_nouns, rng, taken)
    verbs = _pseudo_words(n_verbs, rng, taken)
    adjs = _pseudo_words(n_adjs, rng, taken)
    preps = _pseudo_words(n_preps, rng, taken)
    noun_class = [int(c) for c in rng.integers(0, 2, size=n_nouns)]
    pos: dict[str, str] = {}
    for w in nouns:
        pos[w], pos[w + "s"] = "N", "NS"
    for w in verbs:
        pos[w], pos[w + "s"] = "V", "VS"
    for w in adjs:
        pos[w] = "A"
    for w in preps:
        pos[w] = "P"
    for d in SINGULAR_DETS + PLURAL_DETS:
        pos[d] = "D"
    pos[PERIOD] = "."
    misspell = {}
    for w in sorted(k for k, v in pos.items() if v in ("N", "NS", "V", "VS", "A")):
        misspell[w] = _misspelling(w, taken)
    return Lexicon(nouns, noun_class, verbs, adjs, preps, misspell, pos)


def _zipf_weights(n: int, domain: str) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** 0.8
    perm = rng_for(0, "domain:" + domain).permutation(n)
    w = w[perm]
    return w / w.sum()


def generate_clean(lex: Lexicon, n_sentences: int, rng: np.random.Generator,
                   domain: str = "general") -> list[list[str]]:
    wn = _zipf_weights(len(lex.nouns), domain)
    wv = _zipf_weights(len(lex.verbs), domain + ":v")
    wa = _zipf_weights(len(lex.adjs), domain + ":a")

    def noun_phrase(plural: bool) -> list[str]:
        i = int(rng.choice(len(lex.nouns), p=wn))
        det = (PLURAL_DETS if plural else SINGULAR_DETS)[lex.noun_class[i]]
        np_ = [det]
        if rng.random() < 0.4:
            np_.append(lex.adjs[int(rng.choice(len(lex.adjs), p=wa))])
        np_.append(lex.nouns[i] + ("s" if plural else ""))
        return np_

    out = []
    for _ in range(n_sentences):
        plural = bool(rng.random() < 0.4)
        verb = lex.verbs[int(rng.choice(len(lex.verbs), p=wv))]
        sent = noun_phrase(plural) + [verb if plural else verb + "s"]
        sent += noun_phrase(bool(rng.random() < 0.4))
        if rng.random() < 0.5:
            sent.append(lex.preps[int(rng.integers(len(lex.preps)))])
            sent += noun_phrase(bool(rng.random() < 0.4))
        sent.append(PERIOD)
        out.append(sent)
    return out


@dataclass
class CorruptionSpec:
    """Per-token probabilities of each corruption rule.

    ``article_drop`` applies to determiners, ``pluralization`` to nouns,
    ``substitution`` (replacement by the word's fixed misspelling) to content
    words, and ``token_swap`` to any two distinct adjacent word tokens.
    ``missed_correction`` leaves a sampled error uncorrected in the target,
    imitating sloppy annotation.
    """
    article_drop: float = 0.0
    pluralization: float = 0.0
    token_swap: float = 0.0
    substitution: float = 0.0
    missed_correction: float = 0.0

    def __post_init__(self):
        for name in ("article_drop", "pluralization", "token_swap", "substitution", "missed_correction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorpusError(f"{name} probability {v} outside [0, 1]")
        if self.article_drop + self.pluralization + self.token_swap + self.substitution > 1.0:
            raise CorpusError("rule probabilities must sum to at most 1")

    def scaled(self, factor: float) -> "CorruptionSpec":
        return CorruptionSpec(self.article_drop * factor, self.pluralization * factor,
                              self.token_swap * factor, self.substitution * factor,
                              self.missed_correction)

    @classmethod
    def for_error_rate(cls, rate: float, vocab_size: int = 200, domain: str = "general",
                       mix: tuple[float, float, float, float] = (1.0, 1.0, 0.3, 1.0),
                       missed_correction: float = 0.0) -> "CorruptionSpec":
        """Scale a rule mix so the expected token error rate equals ``rate``."""
        lex = build_lexicon(vocab_size)
        pilot = generate_clean(lex, 3000, rng_for(0, "pilot:" + domain), domain)
        base = cls(*[m / sum(mix) for m in mix], missed_correction=0.0)
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if expected_error_rate(base.scaled(mid), pilot, lex) < rate:
                lo = mid
            else:
                hi = mid
        spec = base.scaled(lo)
        spec.missed_correction = missed_correction
        return spec


def _rule_options(spec: CorruptionSpec, lex: Lexicon, sent: Sequence[str], i: int) -> list[tuple[str, float]]:
    tag = lex.pos.get(sent[i], "")
    opts = []
    if tag == "D" and spec.article_drop:
        opts.append(("drop", spec.article_drop))
    if tag in ("N", "NS") and spec.pluralization:
        opts.append(("plural", spec.pluralization))
    if (spec.token_swap and i + 2 < len(sent) and sent[i] != sent[i + 1]
            and lex.pos.get(sent[i + 1], "") != "."):
        opts.append(("swap", spec.token_swap))
    if tag in ("N", "NS", "V", "VS", "A") and spec.substitution:
        opts.append(("subst", spec.substitution))
    return opts


_RULE_COST = {"drop": (1, 1), "plural": (1, 1), "subst": (1, 1), "swap": (2, 2)}


def expected_error_rate(spec: CorruptionSpec, clean: Sequence[Sequence[str]], lex: Lexicon) -> float:
    """Exact expected fraction of errorful target tokens for ``clean`` under ``spec``."""
    keep = 1.0 - spec.missed_correction
    total = errors = 0.0
    for sent in clean:
        n = len(sent)
        f = np.zeros(n + 2)
        for i in range(n - 1, -1, -1):
            opts = _rule_options(spec, lex, sent, i)
            p_any = sum(p for _, p in opts)
            val = (1.0 - p_any) * f[i + 1]
            for rule, p in opts:
                cost, step = _RULE_COST[rule]
                val += p * (cost * keep + f[i + step])
            f[i] = val
        errors += f[0]
        total += n
    return errors / total


def _inflect(lex: Lexicon, word: str) -> str:
    return word[:-1] if lex.pos[word] == "NS" else word + "s"


def corrupt(sent: Sequence[str], spec: CorruptionSpec, lex: Lexicon,
            rng: np.random.Generator) -> tuple[list[str], list[Edit]]:
    """Corrupt a clean sentence; returns the erroneous source and gold edits on it."""
    src: list[str] = []
    edits: list[Edit] = []
    i = 0
    n = len(sent)
    while i < n:
        opts = _rule_options(spec, lex, sent, i)
        u = rng.random()
        chosen = None
        acc = 0.0
        for rule, p in opts:
            acc += p
            if u < acc:
                chosen = rule
                break
        k = len(src)
        if chosen == "drop":
            edits.append(Edit(k, k, (sent[i],), "ArtOrDet"))
            i += 1
        elif chosen == "plural":
            src.append(_inflect(lex, sent[i]))
            edits.append(Edit(k, k + 1, (sent[i],), "Nn"))
            i += 1
        elif chosen == "swap":
            src.extend([sent[i + 1], sent[i]])
            edits.append(Edit(k, k + 2, (sent[i], sent[i + 1]), "WO"))
            i += 2
        elif chosen == "subst":
            src.append(lex.misspell[sent[i]])
            edits.append(Edit(k, k + 1, (sent[i],), "Mec"))
            i += 1
        else:
            src.append(sent[i])
            i += 1
    return src, edits


def generate_synthetic(seed: int, vocab_size: int, n_sentences: int, corruption: CorruptionSpec,
                       domain: str = "general") -> list[ParallelExample]:
    """Synthetic learner corpus: (corrupted source, corrected target, gold edits).

    When ``missed_correction`` > 0, each error survives into the target with
    that probability and is then absent from the gold edits.
    """
    lex = build_lexicon(vocab_size)
    rng = rng_for(seed, "synthetic:" + domain)
    clean = generate_clean(lex, n_sentences, rng, domain)
    out = []
    for sent in clean:
        src, edits = corrupt(sent, corruption, lex, rng)
        if corruption.missed_correction and edits:
            kept = [e for e in edits if rng.random() >= corruption.missed_correction]
            trg = apply_edits(src, kept)
            edits = kept
        else:
            trg = list(sent)
        out.append(ParallelExample(src, trg, edits, domain))
    return out


def read_parallel(src_fh: TextIO, trg_fh: TextIO, domain_tag: str = "general") -> list[ParallelExample]:
    srcs = src_fh.read().splitlines()
    trgs = trg_fh.read().splitlines()
    if len(srcs) != len(trgs):
        raise CorpusError(f"source has {len(srcs)} lines, target has {len(trgs)}")
    out = []
    for s, t in zip(srcs, trgs):
        s, t = s.split(), t.split()
        if s and t:
            out.append(ParallelExample(s, t, None, domain_tag))
    return out
