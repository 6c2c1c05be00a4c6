"""Attentional encoder-decoder with a conditional GRU, and its decoder-only LM.

Parameter names are shared between the two models so that a trained LM can
be copied into the decoder by name. With ``tied=True`` one matrix ``emb``
serves as source embeddings, target embeddings and output layer.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, rng_for

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
DEFAULT_P_SRC = 0.2
DEFAULT_DROPOUT = 0.2
NEG_INF = -1e9


class ModelError(ValueError):
    pass


class Vocab:
    """Symbol table; ids 0-3 are pad, unk, bos, eos."""

    def __init__(self, symbols: Sequence[str] = ()):
        self.itos = list(SPECIALS)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        for s in symbols:
            if s not in self.stoi:
                self.stoi[s] = len(self.itos)
                self.itos.append(s)

    @classmethod
    def build(cls, sentences) -> "Vocab":
        seen: dict[str, None] = {}
        for sent in sentences:
            for tok in sent:
                seen.setdefault(tok, None)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, fh: TextIO) -> None:
        for s in self.itos:
            fh.write(s + "\n")

    @classmethod
    def load(cls, fh: TextIO) -> "Vocab":
        lines = fh.read().splitlines()
        if tuple(lines[:4]) != SPECIALS:
            raise ModelError("vocabulary file must start with the four reserved symbols")
        return cls(lines[4:])


@dataclass
class ModelConfig:
    vocab_size: int
    emb_dim: int = 512
    rnn_dim: int = 1024
    att_dim: int | None = None
    p_dropout_rnn: float = DEFAULT_DROPOUT
    p_src: float = 0.0
    tied: bool = False
    max_len: int = 100
    literal_src_dropout: bool = False

    def __post_init__(self):
        if min(self.vocab_size, self.emb_dim, self.rnn_dim) <= 0:
            raise ModelError("dimensions must be positive")
        if not (0.0 <= self.p_dropout_rnn < 1.0 and 0.0 <= self.p_src < 1.0):
            raise ModelError("dropout probabilities must be in [0, 1)")
        if self.att_dim is None:
            self.att_dim = self.rnn_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    trg_in: np.ndarray
    trg_out: np.ndarray
    trg_mask: np.ndarray
    weights: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.trg_mask.sum())


def pad_ids(seqs: Sequence[Sequence[int]], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=dtype)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1
    return ids, mask


def make_batch(src: Sequence[Sequence[int]] | None, trg: Sequence[Sequence[int]],
               weights: Sequence[Sequence[float]] | None = None, dtype=np.float32) -> Batch:
    """Pad id sequences. Targets gain BOS on input and EOS on output (weight 1)."""
    if src is not None:
        if any(len(s) == 0 for s in src):
            raise ModelError("empty source sequence")
        src_ids, src_mask = pad_ids(src, dtype)
    else:
        src_ids = src_mask = None
    trg_in, _ = pad_ids([[BOS] + list(t) for t in trg], dtype)
    trg_out, trg_mask = pad_ids([list(t) + [EOS] for t in trg], dtype)
    w = trg_mask.copy()
    if weights is not None:
        for i, (t, lam) in enumerate(zip(trg, weights)):
            if len(lam) != len(t):
                raise ModelError(f"edit weights of length {len(lam)} for target of length {len(t)}")
            w[i, :len(t)] = lam
    return Batch(src_ids, src_mask, trg_in, trg_out, trg_mask, w.astype(dtype))


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def source_word_dropout(embedded: Tensor, p_src: float = DEFAULT_P_SRC, training: bool = True,
                        rng: np.random.Generator | None = None, literal: bool = False) -> Tensor:
    """Drop whole source word vectors.

    Default: zero each position with probability ``p_src`` and scale the
    survivors by 1/(1-p_src). ``literal=True`` instead multiplies the dropped
    vectors by 1/p_src and leaves the others alone.
    """
    if not 0.0 <= p_src < 1.0:
        raise ModelError("p_src must be in [0, 1)")
    if not training or p_src == 0.0:
        return embedded
    B, T = embedded.shape[:2]
    drop = rng.random((B, T, 1)) < p_src
    if literal:
        mask = np.where(drop, 1.0 / p_src, 1.0)
    else:
        mask = np.where(drop, 0.0, 1.0 / (1.0 - p_src))
    return ad.apply_mask(embedded, mask.astype(embedded.dtype))


@dataclass
class _Masks:
    src_emb: np.ndarray | None = None
    src_word: np.ndarray | None = None
    fwd: np.ndarray | None = None
    bwd: np.ndarray | None = None
    trg_emb: np.ndarray | None = None
    dec1: np.ndarray | None = None
    dec2: np.ndarray | None = None


# ---------------------------------------------------------------------------
# shared decoder pieces
# ---------------------------------------------------------------------------

def _embedding_names(tied: bool) -> tuple[str, str, str]:
    return ("emb", "emb", "emb") if tied else ("enc.emb", "dec.emb", "out.emb")


def _add_gru(ps: ParamStore, prefix: str, in_dim: int, H: int) -> None:
    ps.add(prefix + ".W", (in_dim, 3 * H))
    ps.add(prefix + ".b", (3 * H,), "zeros")
    ps.add(prefix + ".U", (H, 3 * H))


def _add_decoder_core(ps: ParamStore, cfg: ModelConfig) -> None:
    V, E, H = cfg.vocab_size, cfg.emb_dim, cfg.rnn_dim
    _, dec_emb, out_emb = _embedding_names(cfg.tied)
    if dec_emb not in ps:
        ps.add(dec_emb, (V, E))
    if out_emb not in ps:
        ps.add(out_emb, (V, E))
    _add_gru(ps, "dec.gru1", E, H)
    ps.add("dec.out.Ws", (H, E))
    ps.add("dec.out.Wy", (E, E))
    ps.add("dec.out.b", (E,), "zeros")
    ps.add("dec.out.bias", (V,), "zeros")


def _logits(ps: ParamStore, cfg: ModelConfig, s: Tensor, y: Tensor, ctx: Tensor | None) -> Tensor:
    """Readout: tanh(s Ws + y Wy [+ ctx Wc] + b) projected onto the output embeddings."""
    pre = s @ ps["dec.out.Ws"] + y @ ps["dec.out.Wy"] + ps["dec.out.b"]
    if ctx is not None:
        pre = pre + ctx @ ps["dec.out.Wc"]
    t = ad.tanh(pre)
    return t @ ps[_embedding_names(cfg.tied)[2]].T + ps["dec.out.bias"]


def _masked_nll(logp: Tensor, batch: Batch) -> tuple[Tensor, np.ndarray]:
    tok_lp = ad.pick(logp, batch.trg_out)
    loss = -ad.sum_(ad.apply_mask(tok_lp, batch.weights))
    return loss, -tok_lp.data * batch.trg_mask


# ---------------------------------------------------------------------------
# sequence-to-sequence model
# ---------------------------------------------------------------------------

@dataclass
class EncoderOutput:
    annotations: Tensor
    mask: np.ndarray
    init_state: Tensor
    att_proj: Tensor


class Seq2SeqModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        cfg = config
        V, E, H, A = cfg.vocab_size, cfg.emb_dim, cfg.rnn_dim, cfg.att_dim
        ps = ParamStore(seed, dtype)
        src_emb, _, _ = _embedding_names(cfg.tied)
        ps.add(src_emb, (V, E))
        _add_gru(ps, "enc.fwd", E, H)
        _add_gru(ps, "enc.bwd", E, H)
        ps.add("dec.init.W", (2 * H, H))
        ps.add("dec.init.b", (H,), "zeros")
        _add_decoder_core(ps, cfg)
        ps.add("dec.att.W", (2 * H, A))
        ps.add("dec.att.b", (A,), "zeros")
        ps.add("dec.att.U", (H, A))
        ps.add("dec.att.v", (A, 1))
        _add_gru(ps, "dec.gru2", 2 * H, H)
        ps.add("dec.out.Wc", (2 * H, E))
        self.params = ps

    @property
    def dtype(self):
        return self.params.dtype

    def _masks(self, B: int, Tx: int, training: bool, step: int) -> _Masks:
        cfg = self.config
        if not training:
            return _Masks()
        E, H, p = cfg.emb_dim, cfg.rnn_dim, cfg.p_dropout_rnn
        dt = self.dtype
        m = _Masks()
        if p > 0:
            m.src_emb = ad.dropout_mask((B, 1, E), p, rng_for(self.seed, "drop:src_emb", step), dt)
            m.fwd = ad.dropout_mask((B, H), p, rng_for(self.seed, "drop:enc_fwd", step), dt)
            m.bwd = ad.dropout_mask((B, H), p, rng_for(self.seed, "drop:enc_bwd", step), dt)
            m.trg_emb = ad.dropout_mask((B, 1, E), p, rng_for(self.seed, "drop:trg_emb", step), dt)
            m.dec1 = ad.dropout_mask((B, H), p, rng_for(self.seed, "drop:dec1", step), dt)
            m.dec2 = ad.dropout_mask((B, H), p, rng_for(self.seed, "drop:dec2", step), dt)
        return m

    def encode(self, src: np.ndarray, src_mask: np.ndarray | None = None, training: bool = False,
               step: int = 0, masks: _Masks | None = None) -> EncoderOutput:
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src.shape[1] == 0:
            raise ModelError("cannot encode an empty sequence")
        if src.max() >= self.config.vocab_size:
            raise ModelError("source id out of vocabulary range")
        if src_mask is None:
            src_mask = np.ones(src.shape, dtype=self.dtype)
        ps, cfg = self.params, self.config
        B, T = src.shape
        if masks is None:
            masks = self._masks(B, T, training, step)
        x = ad.gather(ps[_embedding_names(cfg.tied)[0]], src)
        if training and cfg.p_src > 0:
            x = source_word_dropout(x, cfg.p_src, True, rng_for(self.seed, "drop:src_word", step),
                                    cfg.literal_src_dropout)
        if masks.src_emb is not None:
            x = ad.apply_mask(x, masks.src_emb)
        H = cfg.rnn_dim
        xf = x @ ps["enc.fwd.W"] + ps["enc.fwd.b"]
        xb = x @ ps["enc.bwd.W"] + ps["enc.bwd.b"]
        h = Tensor(np.zeros((B, H), dtype=self.dtype))
        fwd = []
        for t in range(T):
            h = ad.gru_cell(xf[:, t], h, ps["enc.fwd.U"], src_mask[:, t:t + 1], masks.fwd)
            fwd.append(h)
        h = Tensor(np.zeros((B, H), dtype=self.dtype))
        bwd = [None] * T
        for t in range(T - 1, -1, -1):
            h = ad.gru_cell(xb[:, t], h, ps["enc.bwd.U"], src_mask[:, t:t + 1], masks.bwd)
            bwd[t] = h
        ann = ad.concat([ad.stack(fwd, axis=1), ad.stack(bwd, axis=1)], axis=-1)
        lengths = src_mask.sum(axis=1, keepdims=True)
        pooled = ad.apply_mask(ad.sum_(ad.apply_mask(ann, src_mask[:, :, None]), axis=1), 1.0 / lengths)
        init = ad.tanh(pooled @ ps["dec.init.W"] + ps["dec.init.b"])
        att_proj = ann @ ps["dec.att.W"] + ps["dec.att.b"]
        return EncoderOutput(ann, src_mask, init, att_proj)

    def attend(self, s: Tensor, ann: Tensor, att_proj: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        ps = self.params
        B, T, _ = ann.shape
        q = ad.reshape(s @ ps["dec.att.U"], (B, 1, -1))
        energy = ad.reshape(ad.tanh(att_proj + q) @ ps["dec.att.v"], (B, T))
        energy = energy + ((1.0 - mask) * NEG_INF).astype(self.dtype)
        alpha = ad.softmax(energy, axis=-1)
        ctx = ad.reshape(ad.reshape(alpha, (B, 1, T)) @ ann, (B, -1))
        return ctx, alpha

    def _transition(self, s: Tensor, xw1: Tensor, enc: EncoderOutput, masks: _Masks,
                    ablate_source: bool = False):
        ps = self.params
        s1 = ad.gru_cell(xw1, s, ps["dec.gru1.U"], None, masks.dec1)
        if ablate_source:
            return s1, None, None
        ctx, alpha = self.attend(s1, enc.annotations, enc.att_proj, enc.mask)
        xw2 = ctx @ ps["dec.gru2.W"] + ps["dec.gru2.b"]
        s2 = ad.gru_cell(xw2, s1, ps["dec.gru2.U"], None, masks.dec2)
        return s2, ctx, alpha

    def start_state(self, enc: EncoderOutput, ablate_source: bool = False) -> Tensor:
        if ablate_source:
            B = enc.annotations.shape[0] if enc is not None else 1
            return Tensor(np.zeros((B, self.config.rnn_dim), dtype=self.dtype))
        return enc.init_state

    def decode_step(self, state: Tensor, prev_ids, enc: EncoderOutput | None,
                    ablate_source: bool = False) -> tuple[Tensor, np.ndarray, np.ndarray | None]:
        """One inference step: (next state, log-probs over V, attention weights).

        ``ablate_source`` drops everything that reads the source: the
        attention, the context vector and the second transition. The state then
        evolves exactly as in the decoder-only language model.
        """
        ps, cfg = self.params, self.config
        with ad.no_grad():
            y = ad.gather(ps[_embedding_names(cfg.tied)[1]], np.asarray(prev_ids, dtype=np.int64))
            xw1 = y @ ps["dec.gru1.W"] + ps["dec.gru1.b"]
            s, ctx, alpha = self._transition(state, xw1, enc, _Masks(), ablate_source)
            logp = ad.log_softmax(_logits(ps, cfg, s, y, ctx), axis=-1)
        return s, logp.data, None if alpha is None else alpha.data

    def loss(self, batch: Batch, training: bool = False, step: int = 0) -> tuple[Tensor, np.ndarray]:
        """Weighted negative log-likelihood summed over target tokens.

        Returns the scalar loss and the unweighted per-token NLL matrix.
        """
        ps, cfg = self.params, self.config
        B, Ty = batch.trg_in.shape
        masks = self._masks(B, batch.src.shape[1], training, step)
        enc = self.encode(batch.src, batch.src_mask, training, step, masks)
        y = ad.gather(ps[_embedding_names(cfg.tied)[1]], batch.trg_in)
        if masks.trg_emb is not None:
            y = ad.apply_mask(y, masks.trg_emb)
        xw1 = y @ ps["dec.gru1.W"] + ps["dec.gru1.b"]
        s = enc.init_state
        states, ctxs = [], []
        for t in range(Ty):
            s, ctx, _ = self._transition(s, xw1[:, t], enc, masks)
            states.append(s)
            ctxs.append(ctx)
        S = ad.stack(states, axis=1)
        C = ad.stack(ctxs, axis=1)
        logp = ad.log_softmax(_logits(ps, cfg, S, y, C), axis=-1)
        return _masked_nll(logp, batch)

    def sequence_logprob(self, src_ids: Sequence[int], trg_ids: Sequence[int]) -> float:
        """Teacher-forced log P(y + eos | x) summed over tokens."""
        batch = make_batch([src_ids], [trg_ids], dtype=self.dtype)
        with ad.no_grad():
            loss, _ = self.loss(batch)
        return -float(loss.data)


# ---------------------------------------------------------------------------
# decoder-only language model
# ---------------------------------------------------------------------------

class DecoderLm:
    """The decoder with every source-dependent part removed."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        ps = ParamStore(seed, dtype)
        _add_decoder_core(ps, config)
        self.params = ps

    @property
    def dtype(self):
        return self.params.dtype

    def start_state(self, n: int) -> Tensor:
        return Tensor(np.zeros((n, self.config.rnn_dim), dtype=self.dtype))

    def decode_step(self, state: Tensor, prev_ids) -> tuple[Tensor, np.ndarray]:
        ps, cfg = self.params, self.config
        with ad.no_grad():
            y = ad.gather(ps[_embedding_names(cfg.tied)[1]], np.asarray(prev_ids, dtype=np.int64))
            xw1 = y @ ps["dec.gru1.W"] + ps["dec.gru1.b"]
            s = ad.gru_cell(xw1, state, ps["dec.gru1.U"])
            logp = ad.log_softmax(_logits(ps, cfg, s, y, None), axis=-1)
        return s, logp.data

    def loss(self, batch: Batch, training: bool = False, step: int = 0) -> tuple[Tensor, np.ndarray]:
        ps, cfg = self.params, self.config
        B, Ty = batch.trg_in.shape
        y = ad.gather(ps[_embedding_names(cfg.tied)[1]], batch.trg_in)
        state_mask = None
        if training and cfg.p_dropout_rnn > 0:
            p = cfg.p_dropout_rnn
            y = ad.apply_mask(y, ad.dropout_mask((B, 1, cfg.emb_dim), p,
                                                 rng_for(self.seed, "drop:trg_emb", step), self.dtype))
            state_mask = ad.dropout_mask((B, cfg.rnn_dim), p, rng_for(self.seed, "drop:dec1", step), self.dtype)
        xw1 = y @ ps["dec.gru1.W"] + ps["dec.gru1.b"]
        s = self.start_state(B)
        states = []
        for t in range(Ty):
            s = ad.gru_cell(xw1[:, t], s, ps["dec.gru1.U"], None, state_mask)
            states.append(s)
        logp = ad.log_softmax(_logits(ps, cfg, ad.stack(states, axis=1), y, None), axis=-1)
        return _masked_nll(logp, batch)

    def sequence_logprob(self, trg_ids: Sequence[int]) -> float:
        batch = make_batch(None, [trg_ids], dtype=self.dtype)
        with ad.no_grad():
            loss, _ = self.loss(batch)
        return -float(loss.data)


# ---------------------------------------------------------------------------
# transfer and pre-training
# ---------------------------------------------------------------------------

@dataclass
class TransferReport:
    copied: list[str]
    random: list[str]


def transfer_from_lm(lm_state: dict[str, np.ndarray], model: Seq2SeqModel) -> TransferReport:
    """Copy every LM parameter into the same-named decoder parameter.

    All other parameters keep their fresh random initialisation.
    """
    ps = model.params
    for name, arr in sorted(lm_state.items()):
        if name not in ps:
            raise ModelError(f"LM parameter {name!r} has no counterpart in the translation model")
        if ps[name].shape != arr.shape:
            raise ModelError(f"{name}: LM shape {arr.shape} != model shape {ps[name].shape}")
    for name, arr in lm_state.items():
        ps[name].data = np.array(arr, dtype=ps.dtype)
    copied = sorted(lm_state)
    return TransferReport(copied, [n for n in ps.names() if n not in lm_state])


def embedding_param(config: ModelConfig) -> list[str]:
    """Names receiving pre-trained word vectors (one matrix when tied)."""
    names = _embedding_names(config.tied)
    return sorted(set(names))


def pretrain_embeddings(corpus: Sequence[Sequence[int]], vocab_size: int, dim: int = 512,
                        epochs: int = 5, window: int = 5, negatives: int = 5, seed: int = 0,
                        lr: float = 0.025, batch_pairs: int = 512) -> np.ndarray:
    """Skip-gram with negative sampling over id sequences.

    Returns the (vocab_size, dim) input-vector matrix. Rows of symbols that
    never occur keep their random initialisation.
    """
    corpus = [list(s) for s in corpus if len(s) > 0]
    if not corpus:
        raise ModelError("cannot pre-train embeddings on an empty corpus")
    rng = rng_for(seed, "skipgram")
    w_in = ((rng.random((vocab_size, dim)) - 0.5) / dim).astype(np.float64)
    w_out = np.zeros((vocab_size, dim))
    counts = np.zeros(vocab_size)
    for s in corpus:
        np.add.at(counts, s, 1)
    noise = counts ** 0.75
    noise /= noise.sum()
    centers, contexts = [], []
    for s in corpus:
        n = len(s)
        for i in range(n):
            for j in range(max(0, i - window), min(n, i + window + 1)):
                if j != i:
                    centers.append(s[i])
                    contexts.append(s[j])
    centers = np.asarray(centers, dtype=np.int64)
    contexts = np.asarray(contexts, dtype=np.int64)
    total_steps = epochs * max(1, int(np.ceil(len(centers) / batch_pairs)))
    step = 0

    def sig(x):
        return 1.0 / (1.0 + np.exp(-np.clip(x, -30, 30)))

    for epoch in range(epochs):
        erng = rng_for(seed, "skipgram:epoch", epoch)
        perm = erng.permutation(len(centers))
        for lo in range(0, len(perm), batch_pairs):
            idx = perm[lo:lo + batch_pairs]
            c, o = centers[idx], contexts[idx]
            neg = erng.choice(vocab_size, size=(len(idx), negatives), p=noise)
            alpha = lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            vc = w_in[c]
            targets = np.concatenate([o[:, None], neg], axis=1)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            vo = w_out[targets]
            score = sig(np.einsum("bd,bkd->bk", vc, vo))
            g = (labels - score) * alpha
            grad_c = np.einsum("bk,bkd->bd", g, vo)
            grad_o = g[:, :, None] * vc[:, None, :]
            np.add.at(w_out, targets.reshape(-1), grad_o.reshape(-1, dim))
            np.add.at(w_in, c, grad_c)
    return w_in


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))
