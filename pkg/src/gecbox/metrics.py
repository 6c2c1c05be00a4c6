"""MaxMatch (M2) and GLEU scoring."""
from __future__ import annotations

import heapq
import math
import sys
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .autodiff import rng_for
from .corpus import Edit

MAX_UNCHANGED_WORDS = 2
GLEU_ITERATIONS = 500
GLEU_SEED = 0
GLEU_EPSILON = 1e-9


class MetricError(ValueError):
    pass


@dataclass
class M2Result:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_half: float

    def format(self) -> str:
        return (f"Precision : {self.precision:.4f}\n"
                f"Recall : {self.recall:.4f}\n"
                f"F_0.5 : {self.f_half:.4f}")


def prf(tp: int, proposed: int, gold: int, beta: float = 0.5) -> tuple[float, float, float]:
    """Precision, recall and F_beta with the 0/0 -> 1 convention for P and R."""
    p = tp / proposed if proposed > 0 else 1.0
    r = tp / gold if gold > 0 else 1.0
    b2 = beta * beta
    denom = b2 * p + r
    f = (1.0 + b2) * p * r / denom if denom > 0 else 0.0
    return p, r, f


def f_beta(precision: float, recall: float, beta: float = 0.5) -> float:
    b2 = beta * beta
    denom = b2 * precision + recall
    return (1.0 + b2) * precision * recall / denom if denom > 0 else 0.0


# ---------------------------------------------------------------------------
# edit lattice
# ---------------------------------------------------------------------------

@dataclass
class EditLattice:
    """Grid vertices (i, j) on optimal Levenshtein paths and the edges between them.

    Each edge is ``(u, v, edit)``; ``edit`` is None for an unchanged stretch.
    """
    src: list[str]
    hyp: list[str]
    vertices: list[tuple[int, int]]
    edges: dict[tuple[int, int], list[tuple[tuple[int, int], Edit | None]]] = field(default_factory=dict)


def _dist_tables(src, hyp):
    n, m = len(src), len(hyp)
    fwd = [[0] * (m + 1) for _ in range(n + 1)]
    bwd = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        for j in range(m + 1):
            if i == 0 or j == 0:
                fwd[i][j] = i + j
            else:
                c = 0 if src[i - 1] == hyp[j - 1] else 1
                fwd[i][j] = min(fwd[i - 1][j - 1] + c, fwd[i - 1][j] + 1, fwd[i][j - 1] + 1)
    for i in range(n, -1, -1):
        for j in range(m, -1, -1):
            if i == n or j == m:
                bwd[i][j] = (n - i) + (m - j)
            else:
                c = 0 if src[i] == hyp[j] else 1
                bwd[i][j] = min(bwd[i + 1][j + 1] + c, bwd[i + 1][j] + 1, bwd[i][j + 1] + 1)
    return fwd, bwd


def elementary_edges(src: Sequence[str], hyp: Sequence[str], tables=None):
    """Unit moves lying on some optimal path: (u, v, is_noop)."""
    n, m = len(src), len(hyp)
    fwd, bwd = tables if tables is not None else _dist_tables(src, hyp)
    best = fwd[n][m]

    def on_path(i, j):
        return fwd[i][j] + bwd[i][j] == best

    edges = []
    for i in range(n + 1):
        for j in range(m + 1):
            if not on_path(i, j):
                continue
            if i < n and j < m and on_path(i + 1, j + 1):
                c = 0 if src[i] == hyp[j] else 1
                if fwd[i + 1][j + 1] == fwd[i][j] + c:
                    edges.append(((i, j), (i + 1, j + 1), c == 0))
            if i < n and on_path(i + 1, j) and fwd[i + 1][j] == fwd[i][j] + 1:
                edges.append(((i, j), (i + 1, j), False))
            if j < m and on_path(i, j + 1) and fwd[i][j + 1] == fwd[i][j] + 1:
                edges.append(((i, j), (i, j + 1), False))
    return edges


def build_lattice(src: Sequence[str], hyp: Sequence[str],
                  max_unchanged_words: int = MAX_UNCHANGED_WORDS) -> EditLattice:
    """Edit lattice with transitive merges.

    Any route u -> v through at most ``max_unchanged_words`` unchanged tokens
    that rewrites ``src[i_u:i_v]`` into a different ``hyp[j_u:j_v]`` becomes a
    single edit edge. Every route between the same two vertices yields the
    same rewrite, so merges are keyed by their end points.
    """
    src, hyp = list(src), list(hyp)
    tables = _dist_tables(src, hyp)
    fwd = tables[0]
    base = elementary_edges(src, hyp, tables)
    succ: dict[tuple[int, int], list[tuple[tuple[int, int], bool]]] = {}
    verts = set()
    for u, v, noop in base:
        succ.setdefault(u, []).append((v, noop))
        verts.update((u, v))
    if not verts:
        verts.add((0, 0))
    order = sorted(verts, key=lambda x: (x[0] + x[1], x))
    rank = {v: i for i, v in enumerate(order)}
    lat = EditLattice(src, hyp, order)
    for u in order:
        # fewest unchanged tokens needed to reach each vertex from u, visited
        # in topological order through the reached frontier only
        reach: dict[tuple[int, int], int] = {u: 0}
        frontier = [rank[u]]
        while frontier:
            w = order[heapq.heappop(frontier)]
            for v, noop in succ.get(w, []):
                k = reach[w] + (1 if noop else 0)
                if k > max_unchanged_words:
                    continue
                old = reach.get(v)
                if old is None:
                    heapq.heappush(frontier, rank[v])
                    reach[v] = k
                elif k < old:
                    reach[v] = k
        out = []
        for v, noop in succ.get(u, []):
            if noop:
                out.append((v, None))
        base_cost = fwd[u[0]][u[1]]
        for v in sorted(reach):
            # both ends lie on optimal paths, so the spans differ exactly
            # when the optimal cost grows between them
            if fwd[v[0]][v[1]] > base_cost:
                out.append((v, Edit(u[0], v[0], tuple(hyp[u[1]:v[1]]))))
        lat.edges[u] = out
    return lat


def _gold_keys(gold: Sequence[Edit]) -> set:
    return {e.key() for e in gold if not e.is_noop}


def best_edit_sequence(lattice: EditLattice, gold: Sequence[Edit]) -> list[Edit]:
    """Path maximising gold matches; ties prefer fewer edits, then leftmost edits.

    A gold edit counts once even if the path proposes it repeatedly, which
    can only happen for identical insertions at one source position. The
    search state therefore carries the gold insertions already hit there.
    """
    keys = _gold_keys(gold)
    end = (len(lattice.src), len(lattice.hyp))
    memo: dict[tuple, tuple | None] = {}

    def solve(u, hit):
        state = (u, hit)
        if state in memo:
            return memo[state]
        if u == end:
            memo[state] = (0, 0, (), ())
            return memo[state]
        cand = None
        for v, edit in lattice.edges.get(u, []):
            nxt_hit = hit if v[0] == u[0] else frozenset()
            gain = 0
            if edit is not None and edit.key() in keys and edit.key() not in hit:
                gain = 1
                if edit.is_insertion and v[0] == u[0]:
                    nxt_hit = hit | {edit.key()}
            sub = solve(v, nxt_hit)
            if sub is None:
                continue
            neg_m, n_e, spans, seq = sub
            if edit is not None:
                item = (neg_m - gain, n_e + 1, ((edit.start, edit.end),) + spans, (edit,) + seq)
            else:
                item = sub
            if cand is None or item[:3] < cand[:3]:
                cand = item
        memo[state] = cand
        return cand

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * len(lattice.vertices) + 100))
    try:
        best = solve(lattice.vertices[0], frozenset())
    finally:
        sys.setrecursionlimit(limit)
    return [] if best is None else list(best[3])


def extract_system_edits(src: Sequence[str], hyp: Sequence[str], gold: Sequence[Edit] = (),
                         max_unchanged_words: int = MAX_UNCHANGED_WORDS) -> list[Edit]:
    if list(src) == list(hyp):
        return []
    lattice = build_lattice(src, hyp, max_unchanged_words)
    return best_edit_sequence(lattice, gold)


def count_matches(system: Sequence[Edit], gold: Sequence[Edit]) -> int:
    """Number of distinct gold edits proposed by the system."""
    return len(_gold_keys(gold) & {e.key() for e in system})


def m2_score(corpus: Sequence[tuple], beta: float = 0.5,
             max_unchanged_words: int = MAX_UNCHANGED_WORDS) -> M2Result:
    """Corpus-level M2.

    ``corpus`` holds ``(src, hyp, annotations)`` triples where annotations map
    annotator id to that annotator's edit list. Per sentence the annotator is
    chosen greedily to maximise the running corpus F score (then more
    matches, then fewer proposed+gold edits).
    """
    tp = proposed = gold_total = 0
    for src, hyp, ann_in in corpus:
        if isinstance(ann_in, dict):
            ann = ann_in if ann_in else {0: []}
        else:
            ann = {0: list(ann_in)}
        lattice = build_lattice(src, hyp, max_unchanged_words) if list(src) != list(hyp) else None
        choice = None
        for annotator in sorted(ann):
            gold = [e for e in ann[annotator] if not e.is_noop]
            system = best_edit_sequence(lattice, gold) if lattice is not None else []
            c = count_matches(system, gold)
            _, _, f = prf(tp + c, proposed + len(system), gold_total + len(gold), beta)
            cand = (f, c, -(len(system) + len(gold)))
            if choice is None or cand > choice[0]:
                choice = (cand, c, len(system), len(gold))
        _, c, n_sys, n_gold = choice
        tp += c
        proposed += n_sys
        gold_total += n_gold
    p, r, f = prf(tp, proposed, gold_total, beta)
    return M2Result(tp, proposed - tp, gold_total - tp, p, r, f)


def m2_score_examples(srcs, hyps, annotations_list, **kw) -> M2Result:
    if not (len(srcs) == len(hyps) == len(annotations_list)):
        raise MetricError(f"sentence count mismatch: {len(srcs)} sources, {len(hyps)} hypotheses, "
                          f"{len(annotations_list)} annotations")
    return m2_score(list(zip(srcs, hyps, annotations_list)), **kw)


# ---------------------------------------------------------------------------
# GLEU
# ---------------------------------------------------------------------------

@dataclass
class GleuResult:
    score: float
    precisions: list[float]
    brevity_penalty: float


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _sentence_stats(src, hyp, ref, n_max):
    stats = [len(hyp), len(ref)]
    for n in range(1, n_max + 1):
        h, r, s = _ngrams(hyp, n), _ngrams(ref, n), _ngrams(src, n)
        match = sum(min(c, r[g]) for g, c in h.items())
        penalty = sum(max(0, min(c, s[g]) - min(c, r[g])) for g, c in h.items())
        stats.append(max(0, match - penalty))
        stats.append(max(0, len(hyp) - n + 1))
    return stats


def gleu_score(srcs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]],
               references: Sequence[Sequence[Sequence[str]]], n_max: int = 4,
               iterations: int = GLEU_ITERATIONS, seed: int = GLEU_SEED) -> GleuResult:
    """Corpus GLEU with one reference sampled per sentence in every iteration.

    ``references[i]`` lists the references of sentence i. When every
    sentence has a single reference all iterations coincide, so only one is
    run.
    """
    if not (len(srcs) == len(hyps) == len(references)):
        raise MetricError("srcs, hyps and references must have equal length")
    if any(len(r) == 0 for r in references):
        raise MetricError("every sentence needs at least one reference")
    if all(len(r) == 1 for r in references):
        iterations = 1
    cache: dict[tuple[int, int], list[int]] = {}
    scores, precs_acc, bp_acc = [], [0.0] * n_max, 0.0
    for it in range(iterations):
        rng = rng_for(seed, "gleu", it)
        totals = [0] * (2 + 2 * n_max)
        for i, (src, hyp, refs) in enumerate(zip(srcs, hyps, references)):
            k = int(rng.integers(len(refs))) if len(refs) > 1 else 0
            if (i, k) not in cache:
                cache[(i, k)] = _sentence_stats(list(src), list(hyp), list(refs[k]), n_max)
            for j, v in enumerate(cache[(i, k)]):
                totals[j] += v
        h_len, r_len = totals[0], totals[1]
        precs = []
        for n in range(n_max):
            num, den = totals[2 + 2 * n], totals[3 + 2 * n]
            precs.append(num / den if den > 0 else 0.0)
        if h_len == 0:
            bp = 0.0
        else:
            bp = min(1.0, math.exp(1.0 - r_len / h_len))
        log_mean = sum(math.log(max(p, GLEU_EPSILON)) for p in precs) / n_max
        scores.append(bp * math.exp(log_mean))
        precs_acc = [a + p for a, p in zip(precs_acc, precs)]
        bp_acc += bp
    k = len(scores)
    return GleuResult(sum(scores) / k, [p / k for p in precs_acc], bp_acc / k)
