"""Word alignment for edit weighting.

Alignments are functional in the target: one link per target position, to a
source index or to ``None`` (null). They are stored as a list of
``(target_index, source_index_or_None)`` sorted by target index.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

Alignment = list[tuple[int, "int | None"]]

DEFAULT_TENSION = 4.0
DEFAULT_P_NULL = 0.08
DEFAULT_LAMBDA = 3.0


class AlignError(ValueError):
    pass


def _levenshtein_table(src: Sequence[str], trg: Sequence[str]) -> list[list[int]]:
    n, m = len(src), len(trg)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        si = src[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            cost = 0 if si == trg[j - 1] else 1
            row[j] = min(prev[j - 1] + cost, prev[j] + 1, row[j - 1] + 1)
    return d


def levenshtein_distance(src: Sequence[str], trg: Sequence[str]) -> int:
    return _levenshtein_table(src, trg)[len(src)][len(trg)]


def levenshtein_align(src: Sequence[str], trg: Sequence[str]) -> Alignment:
    """Functional alignment read off one optimal unit-cost edit path.

    Walking back from the end, the preferred move is match, then
    substitution, then deletion of a source token, then insertion of a
    target token (which links to null).
    """
    d = _levenshtein_table(src, trg)
    i, j = len(src), len(trg)
    links: Alignment = []
    while i > 0 or j > 0:
        here = d[i][j]
        if i > 0 and j > 0 and src[i - 1] == trg[j - 1] and d[i - 1][j - 1] == here:
            links.append((j - 1, i - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and src[i - 1] != trg[j - 1] and d[i - 1][j - 1] + 1 == here:
            links.append((j - 1, i - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i - 1][j] + 1 == here:
            i -= 1
        else:
            links.append((j - 1, None))
            j -= 1
    links.reverse()
    return links


@dataclass
class AlignModel:
    ttable: dict[str, dict[str, float]]
    tension: float = DEFAULT_TENSION
    p_null: float = DEFAULT_P_NULL
    trg_vocab: set[str] = field(default_factory=set)
    log_likelihoods: list[float] = field(default_factory=list)

    NULL = "<null>"

    def prob(self, f: str, e: str | None) -> float:
        e = self.NULL if e is None else e
        if f not in self.trg_vocab or e not in self.ttable:
            return 1.0 / max(1, len(self.trg_vocab))
        return self.ttable[e].get(f, 0.0)


def _positional_prior(Tx: int, Ty: int, t: int, tension: float) -> np.ndarray:
    s = np.arange(1, Tx + 1) / Tx
    w = np.exp(-tension * np.abs((t + 1) / Ty - s))
    return w / w.sum()


def _pairs(corpus) -> list[tuple[list[str], list[str]]]:
    out = []
    for item in corpus:
        if hasattr(item, "src"):
            out.append((list(item.src), list(item.trg)))
        else:
            src, trg = item
            out.append((list(src), list(trg)))
    return out


def train_aligner(corpus, em_iterations: int = 5, tension: float = DEFAULT_TENSION,
                  p_null: float = DEFAULT_P_NULL) -> AlignModel:
    """EM for an IBM-2 style model with a fixed diagonal positional prior.

    The alignment prior puts ``p_null`` on null and spreads the rest over
    source positions proportionally to ``exp(-tension * |t/Ty - s/Tx|)``
    (1-based positions). Only the translation table is re-estimated, so each
    iteration is a true EM step and the likelihood cannot decrease.
    """
    if em_iterations < 1:
        raise AlignError("em_iterations must be >= 1")
    if tension <= 0 or not 0.0 <= p_null < 1.0:
        raise AlignError("need tension > 0 and p_null in [0, 1)")
    pairs = [(s, t) for s, t in _pairs(corpus) if s and t]
    if not pairs:
        raise AlignError("cannot train an aligner on an empty vocabulary")
    null = AlignModel.NULL
    cooc: dict[str, set[str]] = defaultdict(set)
    trg_vocab: set[str] = set()
    for src, trg in pairs:
        trg_vocab.update(trg)
        for e in src + [null]:
            cooc[e].update(trg)
    ttable = {e: {f: 1.0 / len(fs) for f in sorted(fs)} for e, fs in sorted(cooc.items())}
    model = AlignModel(ttable, tension, p_null, trg_vocab)

    priors: dict[tuple[int, int], list[np.ndarray]] = {}
    for _ in range(em_iterations):
        counts: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
        loglik = 0.0
        for src, trg in pairs:
            Tx, Ty = len(src), len(trg)
            key = (Tx, Ty)
            if key not in priors:
                priors[key] = [_positional_prior(Tx, Ty, t, tension) * (1.0 - p_null) for t in range(Ty)]
            pri = priors[key]
            for t, f in enumerate(trg):
                probs = [p_null * ttable[null][f]]
                probs.extend(pri[t][s] * ttable[e][f] for s, e in enumerate(src))
                total = sum(probs)
                loglik += math.log(total)
                counts[null][f] += probs[0] / total
                for s, e in enumerate(src):
                    counts[e][f] += probs[s + 1] / total
        model.log_likelihoods.append(loglik)
        for e, row in counts.items():
            z = sum(row.values())
            ttable[e] = {f: c / z for f, c in sorted(row.items())}
    return model


def corpus_log_likelihood(model: AlignModel, corpus) -> float:
    total = 0.0
    for src, trg in _pairs(corpus):
        for t, f in enumerate(trg):
            pri = _positional_prior(len(src), len(trg), t, model.tension) * (1.0 - model.p_null)
            p = model.p_null * model.prob(f, None)
            p += sum(pri[s] * model.prob(f, e) for s, e in enumerate(src))
            total += math.log(p)
    return total


def viterbi_align(model: AlignModel, src: Sequence[str], trg: Sequence[str]) -> Alignment:
    """Best link per target position; null is tried first and wins ties, then smaller s."""
    links: Alignment = []
    if not src:
        return [(t, None) for t in range(len(trg))]
    for t, f in enumerate(trg):
        pri = _positional_prior(len(src), len(trg), t, model.tension) * (1.0 - model.p_null)
        best, best_p = None, model.p_null * model.prob(f, None)
        for s, e in enumerate(src):
            p = pri[s] * model.prob(f, e)
            if p > best_p:
                best, best_p = s, p
        links.append((t, best))
    return links


@dataclass
class EditWeights:
    lambda_t: np.ndarray
    Lambda: float


def edit_weights(alignment: Alignment, src: Sequence[str], trg: Sequence[str],
                 Lambda: float = DEFAULT_LAMBDA) -> EditWeights:
    """Per-target-token loss weights: Lambda where the aligned source token differs.

    Null-aligned target tokens count as differing.
    """
    if Lambda < 1:
        raise AlignError("Lambda must be >= 1")
    if len(alignment) != len(trg) or [t for t, _ in alignment] != list(range(len(trg))):
        raise AlignError(f"alignment covers {len(alignment)} positions, target has {len(trg)}")
    w = np.ones(len(trg), dtype=np.float64)
    for t, s in alignment:
        if s is None:
            w[t] = Lambda
        elif not 0 <= s < len(src):
            raise AlignError(f"source index {s} out of range for {len(src)} tokens")
        elif src[s] != trg[t]:
            w[t] = Lambda
    return EditWeights(w, float(Lambda))


def format_alignment(alignment: Alignment) -> str:
    return " ".join(f"{s}-{t}" for t, s in alignment if s is not None)


def parse_alignment(line: str, trg_len: int) -> Alignment:
    links: dict[int, int] = {}
    for part in line.split():
        s, t = part.split("-")
        links[int(t)] = int(s)
    return [(t, links.get(t)) for t in range(trg_len)]


def write_alignments(fh: TextIO, alignments: Iterable[Alignment]) -> None:
    for a in alignments:
        fh.write(format_alignment(a) + "\n")
