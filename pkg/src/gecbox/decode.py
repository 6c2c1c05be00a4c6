"""Beam search over ensembles with optional language-model fusion.

During search a prefix is scored by the mean of the member log-probs plus
alpha times the LM log-prob. Finished hypotheses are ranked by

    s(y|x) = (sum_i log P_i(y|x) + alpha * log P_LM(y)) / |y|

where |y| counts the end symbol. Padding and BOS are never generated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import BOS, EOS, PAD, DecoderLm, EncoderOutput, Seq2SeqModel, pad_ids

DEFAULT_BEAM = 24
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(21))


class DecodeError(ValueError):
    pass


@dataclass
class EnsembleSpec:
    members: list
    lm: object | None = None
    alpha: float = 0.0

    def __post_init__(self):
        if not self.members:
            raise DecodeError("an ensemble needs at least one member")
        if not all(hasattr(m, "encode") for m in self.members):
            raise DecodeError("ensemble members must be translation models, not language models")
        if self.alpha < 0:
            raise DecodeError("alpha must be >= 0")
        if self.lm is None and self.alpha != 0.0:
            raise DecodeError("alpha must be 0 without a language model")
        v = {m.config.vocab_size for m in self.members}
        if self.lm is not None:
            v.add(self.lm.config.vocab_size)
        if len(v) != 1:
            raise DecodeError("ensemble members and LM must share one vocabulary")

    @property
    def vocab_size(self) -> int:
        return self.members[0].config.vocab_size

    def with_alpha(self, alpha: float) -> "EnsembleSpec":
        return EnsembleSpec(self.members, self.lm, alpha)


@dataclass
class Hypothesis:
    tokens: list[int]
    member_logprobs: list[float]
    lm_logprob: float
    score: float
    finished: bool = True


@dataclass
class BeamResult:
    best: Hypothesis
    nbest: list[Hypothesis] = field(default_factory=list)


# ---------------------------------------------------------------------------
# per-model runners: row-batched decoder states
# ---------------------------------------------------------------------------

class _TmRunner:
    def __init__(self, model: Seq2SeqModel, srcs: Sequence[Sequence[int]]):
        self.model = model
        ids, mask = pad_ids(srcs, model.dtype)
        with ad.no_grad():
            enc = model.encode(ids, mask)
        self.ann = enc.annotations.data
        self.att = enc.att_proj.data
        self.mask = mask
        self.h0 = enc.init_state.data

    def start(self, sent: np.ndarray) -> np.ndarray:
        return self.h0[sent]

    def step(self, h: np.ndarray, sent: np.ndarray, prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        enc = EncoderOutput(Tensor(self.ann[sent]), self.mask[sent], None, Tensor(self.att[sent]))
        s, logp, _ = self.model.decode_step(Tensor(h), prev, enc)
        return s.data, logp


class _LmRunner:
    def __init__(self, lm: DecoderLm):
        self.lm = lm

    def start(self, sent: np.ndarray) -> np.ndarray:
        return np.zeros((len(sent), self.lm.config.rnn_dim), dtype=self.lm.dtype)

    def step(self, h, sent, prev):
        s, logp = self.lm.decode_step(Tensor(h), prev)
        return s.data, logp


def _runners(spec: EnsembleSpec, srcs):
    members = [_TmRunner(m, srcs) for m in spec.members]
    lm = None
    if spec.lm is not None:
        lm = _TmRunner(spec.lm, srcs) if isinstance(spec.lm, Seq2SeqModel) else _LmRunner(spec.lm)
    return members, lm


def _check_sources(srcs, vocab_size: int) -> None:
    for s in srcs:
        if len(s) == 0:
            raise DecodeError("cannot decode an empty source")
        if max(s) >= vocab_size or min(s) < 0:
            raise DecodeError("source id out of vocabulary range")


def _forbid(logp: np.ndarray) -> np.ndarray:
    logp = logp.copy()
    logp[:, PAD] = -np.inf
    logp[:, BOS] = -np.inf
    return logp


def _final_score(member_lps, lm_lp: float, alpha: float, length: int) -> float:
    return (float(np.sum(member_lps)) + alpha * lm_lp) / length


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def beam_search_batch(spec: EnsembleSpec, srcs: Sequence[Sequence[int]], beam_size: int = DEFAULT_BEAM,
                      max_len: int | None = None, nbest: int = 1) -> list[BeamResult]:
    """Decode several sentences at once; each is searched independently.

    ``max_len`` bounds the tokens before the end symbol (default: twice the
    source length plus ten).
    """
    if beam_size < 1:
        raise DecodeError("beam_size must be >= 1")
    srcs = [list(s) for s in srcs]
    if not srcs:
        return []
    _check_sources(srcs, spec.vocab_size)
    n_mem = len(spec.members)
    members, lm = _runners(spec, srcs)
    limits = [max_len if max_len is not None else 2 * len(s) + 10 for s in srcs]
    alpha = spec.alpha

    # live rows
    sent = np.arange(len(srcs))
    toks: list[list[int]] = [[] for _ in srcs]
    prefix = np.zeros(len(srcs))
    mem_lp = np.zeros((len(srcs), n_mem))
    lm_lp = np.zeros(len(srcs))
    h_mem = [r.start(sent) for r in members]
    h_lm = lm.start(sent) if lm is not None else None
    prev = np.full(len(srcs), BOS, dtype=np.int64)
    finished: list[list[Hypothesis]] = [[] for _ in srcs]
    t = 0
    while len(sent):
        t += 1
        step_lps = []
        for i, r in enumerate(members):
            h_mem[i], lp = r.step(h_mem[i], sent, prev)
            step_lps.append(lp.astype(np.float64))
        combined = step_lps[0] if n_mem == 1 else sum(step_lps) / n_mem
        if lm is not None:
            h_lm, lp = lm.step(h_lm, sent, prev)
            lm_step = lp.astype(np.float64)
            combined = combined + alpha * lm_step
        # masked after mixing so alpha = 0 never meets -inf
        cand = prefix[:, None] + _forbid(combined)
        V = cand.shape[1]
        for i, lim in enumerate(limits):
            if t > lim:
                rows = sent == i
                keep = cand[rows, EOS].copy()
                cand[rows] = -np.inf
                cand[rows, EOS] = keep

        new_rows, new_tok = [], []
        for s_idx in np.unique(sent):
            rows = np.flatnonzero(sent == s_idx)
            width = beam_size - len(finished[s_idx])
            flat = cand[rows].reshape(-1)
            order = np.argsort(-flat, kind="stable")[:width]
            for o in order:
                if not np.isfinite(flat[o]):
                    break
                r, tok = rows[o // V], int(o % V)
                if tok == EOS:
                    mlps = [mem_lp[r, k] + step_lps[k][r, tok] for k in range(n_mem)]
                    llp = lm_lp[r] + lm_step[r, tok] if lm is not None else 0.0
                    finished[s_idx].append(Hypothesis(list(toks[r]), mlps, float(llp),
                                                      _final_score(mlps, llp, alpha, len(toks[r]) + 1)))
                else:
                    new_rows.append(r)
                    new_tok.append(tok)
        new_rows = np.asarray(new_rows, dtype=np.int64)
        new_tok = np.asarray(new_tok, dtype=np.int64)

        # drop sentences whose search is over
        if len(new_rows):
            keep = np.ones(len(new_rows), dtype=bool)
            for s_idx in np.unique(sent[new_rows]):
                fin = finished[s_idx]
                sel = sent[new_rows] == s_idx
                if len(fin) >= beam_size:
                    keep &= ~sel
                    continue
                if len(fin) >= max(1, nbest):
                    worst = min(h.score for h in fin)
                    best_prefix = np.max(cand[new_rows[sel], new_tok[sel]])
                    # future tokens add at most 0 while |y| can grow up to the limit
                    bound = best_prefix / (limits[s_idx] + 1) if best_prefix < 0 else best_prefix
                    if bound <= worst:
                        keep &= ~sel
            new_rows, new_tok = new_rows[keep], new_tok[keep]

        prefix = cand[new_rows, new_tok]
        mem_lp = np.stack([mem_lp[new_rows, k] + step_lps[k][new_rows, new_tok] for k in range(n_mem)], axis=1) \
            if len(new_rows) else np.zeros((0, n_mem))
        if lm is not None:
            lm_lp = lm_lp[new_rows] + lm_step[new_rows, new_tok]
            h_lm = h_lm[new_rows]
        toks = [toks[r] + [int(k)] for r, k in zip(new_rows, new_tok)]
        h_mem = [h[new_rows] for h in h_mem]
        sent = sent[new_rows]
        prev = new_tok
    results = []
    for fin in finished:
        ranked = sorted(fin, key=lambda h: -h.score)
        if not ranked:
            raise DecodeError("search produced no finished hypothesis")
        results.append(BeamResult(ranked[0], ranked[:max(1, nbest)]))
    return results


def beam_search(spec: EnsembleSpec, src: Sequence[int], beam_size: int = DEFAULT_BEAM,
                max_len: int | None = None, nbest: int = 1) -> BeamResult:
    if len(src) == 0:
        raise DecodeError("cannot decode an empty source")
    return beam_search_batch(spec, [src], beam_size, max_len, nbest)[0]


def greedy_decode_batch(spec: EnsembleSpec, srcs: Sequence[Sequence[int]],
                        max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding with the same scoring as the beam search."""
    srcs = [list(s) for s in srcs]
    if not srcs:
        return []
    _check_sources(srcs, spec.vocab_size)
    members, lm = _runners(spec, srcs)
    limits = [max_len if max_len is not None else 2 * len(s) + 10 for s in srcs]
    n_mem = len(members)
    sent = np.arange(len(srcs))
    out: list[list[int]] = [[] for _ in srcs]
    h_mem = [r.start(sent) for r in members]
    h_lm = lm.start(sent) if lm is not None else None
    prev = np.full(len(srcs), BOS, dtype=np.int64)
    while len(sent):
        lps = []
        for i, r in enumerate(members):
            h_mem[i], lp = r.step(h_mem[i], sent, prev)
            lps.append(lp.astype(np.float64))
        combined = lps[0] if n_mem == 1 else sum(lps) / n_mem
        if lm is not None:
            h_lm, lp = lm.step(h_lm, sent, prev)
            combined = combined + spec.alpha * lp.astype(np.float64)
        tok = np.argmax(_forbid(combined), axis=1)
        keep = []
        for j, s_idx in enumerate(sent):
            if len(out[s_idx]) >= limits[s_idx]:
                tok[j] = EOS
            if tok[j] != EOS:
                out[s_idx].append(int(tok[j]))
                keep.append(j)
        keep = np.asarray(keep, dtype=np.int64)
        sent, prev = sent[keep], tok[keep]
        h_mem = [h[keep] for h in h_mem]
        if lm is not None:
            h_lm = h_lm[keep]
    return out


def greedy_decode(spec: EnsembleSpec, src: Sequence[int], max_len: int | None = None) -> list[int]:
    if len(src) == 0:
        raise DecodeError("cannot decode an empty source")
    return greedy_decode_batch(spec, [src], max_len)[0]


def force_decode(spec: EnsembleSpec, src: Sequence[int], y: Sequence[int]) -> tuple[list[float], float]:
    """Per-member and LM log-probs of ``y`` followed by the end symbol."""
    if len(y) == 0:
        raise DecodeError("y must be non-empty")
    members, lm = _runners(spec, [list(src)])
    sent = np.zeros(1, dtype=np.int64)
    seq = [BOS] + list(y) + [EOS]
    mem = [0.0] * len(members)
    lm_total = 0.0
    h_mem = [r.start(sent) for r in members]
    h_lm = lm.start(sent) if lm is not None else None
    for prev, nxt in zip(seq[:-1], seq[1:]):
        p = np.array([prev], dtype=np.int64)
        for i, r in enumerate(members):
            h_mem[i], lp = r.step(h_mem[i], sent, p)
            mem[i] += float(lp[0, nxt])
        if lm is not None:
            h_lm, lp = lm.step(h_lm, sent, p)
            lm_total += float(lp[0, nxt])
    return mem, lm_total


def ensemble_score(spec: EnsembleSpec, src: Sequence[int], y: Sequence[int]) -> float:
    mem, lm_lp = force_decode(spec, src, y)
    return _final_score(mem, lm_lp, spec.alpha, len(y) + 1)


# ---------------------------------------------------------------------------
# alpha search
# ---------------------------------------------------------------------------

@dataclass
class AlphaSearch:
    alpha: float
    curve: list[tuple[float, float]]


def select_alpha(curve: Sequence[tuple[float, float]]) -> float:
    """Alpha with the highest metric; ties go to the smaller alpha."""
    best_a, best_m = None, -np.inf
    for a, m in sorted(curve):
        if m > best_m:
            best_a, best_m = a, m
    return best_a


def tune_alpha(spec: EnsembleSpec, lm, dev_srcs: Sequence[Sequence[int]],
               metric: Callable[[list[list[int]]], float], beam_size: int = DEFAULT_BEAM,
               grid: Sequence[float] = ALPHA_GRID,
               decode: Callable[[EnsembleSpec, Sequence[Sequence[int]]], list[list[int]]] | None = None,
               ) -> AlphaSearch:
    """Decode the dev sources at every grid alpha and keep the best.

    ``metric`` maps the decoded id sequences (in dev order) to a score.
    """
    if not dev_srcs:
        raise DecodeError("dev set must be non-empty")
    if decode is None:
        def decode(sp, srcs):
            return [r.best.tokens for r in beam_search_batch(sp, srcs, beam_size)]
    curve = []
    for a in grid:
        sp = EnsembleSpec(spec.members, lm, float(a))
        curve.append((float(a), float(metric(decode(sp, dev_srcs)))))
    return AlphaSearch(select_alpha(curve), curve)
