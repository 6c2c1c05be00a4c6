"""Command-line entry point: one subcommand per pipeline operation.

Heavy modules are imported inside the handlers so that ``--threads`` can pin
the BLAS thread count before numpy loads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager

WORKDIR_ENV = "GECBOX_WORKDIR"


class CliError(Exception):
    pass


@contextmanager
def _open_in(path):
    if path in (None, "-"):
        yield sys.stdin
    else:
        try:
            fh = open(path, encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc.strerror}") from None
        with fh:
            yield fh


@contextmanager
def _open_out(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as fh:
            yield fh


def _read_tokens(path) -> list[list[str]]:
    from .textproc import read_lines
    with _open_in(path) as fh:
        return read_lines(fh)


def _write_tokens(path, sents) -> None:
    from .textproc import write_lines
    with _open_out(path) as fh:
        write_lines(fh, sents)


def _pairs(src_path, trg_path, tag="general"):
    from .corpus import read_parallel
    with _open_in(src_path) as fs, _open_in(trg_path) as ft:
        return read_parallel(fs, ft, tag)


def _load_ckpt(path):
    from .train import load_checkpoint
    return load_checkpoint(path)


def _vocab_from(ckpt):
    from .model import SPECIALS, Vocab
    itos = ckpt.metadata.get("vocab")
    if not itos:
        raise CliError("checkpoint carries no vocabulary")
    return Vocab(itos[len(SPECIALS):])


def _load_vocab(path):
    from .model import Vocab
    with _open_in(path) as fh:
        return Vocab.load(fh)


def _load_bpe(path):
    if path is None:
        return None
    from .textproc import BpeModel
    with _open_in(path) as fh:
        return BpeModel.load(fh)


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------

def cmd_bpe_learn(a):
    from .textproc import bpe_learn
    sents = []
    for p in a.input:
        sents.extend(_read_tokens(p))
    model = bpe_learn(sents, a.merges)
    with _open_out(a.output) as fh:
        model.save(fh)
    if a.vocab_output:
        from .model import Vocab
        from .textproc import bpe_apply
        vocab = Vocab.build(bpe_apply(model, s) for s in sents)
        with _open_out(a.vocab_output) as fh:
            vocab.save(fh)


def cmd_bpe_apply(a):
    from .textproc import bpe_apply
    bpe = _load_bpe(a.model)
    _write_tokens(a.output, (bpe_apply(bpe, s) for s in _read_tokens(a.input)))


def cmd_bpe_revert(a):
    from .textproc import bpe_revert
    _write_tokens(a.output, (bpe_revert(s, a.marker) for s in _read_tokens(a.input)))


def cmd_synth(a):
    from .corpus import CorruptionSpec, format_m2, generate_synthetic, m2_from_examples
    spec = CorruptionSpec.for_error_rate(a.error_rate, a.vocab_size, a.domain,
                                         missed_correction=a.missed_correction)
    data = generate_synthetic(a.seed, a.vocab_size, a.sentences, spec, a.domain)
    _write_tokens(a.prefix + ".src", (e.src for e in data))
    _write_tokens(a.prefix + ".trg", (e.trg for e in data))
    with open(a.prefix + ".m2", "w", encoding="utf-8") as fh:
        fh.write(format_m2(m2_from_examples(data)))


def cmd_corpus_stats(a):
    from .corpus import error_rate
    s = error_rate(_pairs(a.src, a.trg))
    print(f"sentences\t{s.sentence_count}\ntokens\t{s.token_count}\n"
          f"error_tokens\t{s.error_tokens}\nerror_rate\t{s.error_rate:.4f}")


def cmd_adapt(a):
    from .corpus import error_rate_adapt, oversample
    data = _pairs(a.src, a.trg)
    if a.tags:
        with _open_in(a.tags) as fh:
            tags = fh.read().split()
        if len(tags) != len(data):
            raise CliError(f"{len(tags)} domain tags for {len(data)} pairs")
        for ex, t in zip(data, tags):
            ex.domain_tag = t
    if a.oversample_tag:
        data = oversample(data, a.oversample_tag, a.factor)
    if a.target_rate is not None:
        data = error_rate_adapt(data, a.target_rate)
    _write_tokens(a.prefix + ".src", (e.src for e in data))
    _write_tokens(a.prefix + ".trg", (e.trg for e in data))


def cmd_align_train(a):
    from .align import train_aligner
    m = train_aligner(_pairs(a.src, a.trg), a.iterations, a.tension, a.p_null)
    blob = {"tension": m.tension, "p_null": m.p_null, "ttable": m.ttable,
            "trg_vocab": sorted(m.trg_vocab), "log_likelihoods": m.log_likelihoods}
    with _open_out(a.output) as fh:
        json.dump(blob, fh)


def cmd_align(a):
    from .align import AlignModel, format_alignment, levenshtein_align, viterbi_align
    data = _pairs(a.src, a.trg)
    if a.model:
        with _open_in(a.model) as fh:
            b = json.load(fh)
        m = AlignModel(b["ttable"], b["tension"], b["p_null"], set(b["trg_vocab"]))
        links = (viterbi_align(m, e.src, e.trg) for e in data)
    else:
        links = (levenshtein_align(e.src, e.trg) for e in data)
    with _open_out(a.output) as fh:
        for l in links:
            fh.write(format_alignment(l) + "\n")


def cmd_edit_weights(a):
    from .align import edit_weights, parse_alignment
    data = _pairs(a.src, a.trg)
    with _open_in(a.alignment) as fh:
        lines = fh.read().splitlines()
    if len(lines) != len(data):
        raise CliError(f"{len(lines)} alignment lines for {len(data)} pairs")
    with _open_out(a.output) as fh:
        for line, e in zip(lines, data):
            w = edit_weights(parse_alignment(line, len(e.trg)), e.src, e.trg, a.Lambda)
            fh.write(" ".join(f"{x:g}" for x in w.lambda_t) + "\n")


def cmd_pretrain_emb(a):
    from .model import pretrain_embeddings
    from .train import Checkpoint, save_checkpoint
    vocab = _load_vocab(a.vocab)
    ids = [vocab.encode(s) for s in _read_tokens(a.input)]
    emb = pretrain_embeddings(ids, len(vocab), a.dim, a.epochs, a.window, a.negatives, a.seed)
    save_checkpoint(a.output, Checkpoint({"emb": emb}, {"kind": "embeddings", "vocab": vocab.itos}))


def _model_config(a, vocab_size):
    from .model import ModelConfig
    return ModelConfig(vocab_size=vocab_size, emb_dim=a.emb_dim, rnn_dim=a.rnn_dim,
                       p_dropout_rnn=a.dropout, p_src=getattr(a, "p_src", 0.0), tied=a.tied)


def cmd_pretrain_lm(a):
    from .train import model_checkpoint, pretrain_decoder_lm, save_checkpoint
    vocab = _load_vocab(a.vocab)
    ids = [vocab.encode(s) for s in _read_tokens(a.input)]
    lm, ppl = pretrain_decoder_lm(ids, _model_config(a, len(vocab)), a.epochs, a.seed, a.lr)
    save_checkpoint(a.output, model_checkpoint(lm, seed=a.seed, vocab=vocab.itos))
    if ppl:
        print(f"final batch perplexity\t{ppl[-1]:.4f}")


def cmd_train(a):
    from .model import Seq2SeqModel, transfer_from_lm
    from .train import TrainConfig, TrainItem, average_checkpoints, save_checkpoint, train
    vocab = _load_vocab(a.vocab)
    data = _pairs(a.src, a.trg)
    weights = [None] * len(data)
    if a.weights:
        with _open_in(a.weights) as fh:
            weights = [[float(x) for x in line.split()] for line in fh.read().splitlines()]
        if len(weights) != len(data):
            raise CliError(f"{len(weights)} weight lines for {len(data)} pairs")
    items = [TrainItem(vocab.encode(e.src), vocab.encode(e.trg), w) for e, w in zip(data, weights)]
    dev = [TrainItem(vocab.encode(e.src), vocab.encode(e.trg)) for e in _pairs(a.dev_src, a.dev_trg)]
    model = Seq2SeqModel(_model_config(a, len(vocab)), seed=a.seed)
    if a.init_lm:
        lm = _load_ckpt(a.init_lm)
        rep = transfer_from_lm(lm.tensors, model)
        logging.info("copied %d LM tensors, %d fresh", len(rep.copied), len(rep.random))
    if a.init_emb:
        from .model import embedding_param
        emb = _load_ckpt(a.init_emb).tensors["emb"]
        for name in embedding_param(model.config):
            model.params[name].data = emb.astype(model.dtype)
    cfg = TrainConfig(lr=a.lr, schedule=a.schedule, warmup_steps=a.warmup, patience=a.patience,
                      checkpoint_every=a.checkpoint_every, keep_best_k=a.keep_best, Lambda=a.Lambda,
                      seed=a.seed, batch_size=a.batch_size, max_epochs=a.max_epochs, max_steps=a.max_steps)
    res = train(model, items, dev, cfg, log_path=a.output + ".log.tsv", metadata={"vocab": vocab.itos})
    for i, c in enumerate(res.checkpoints):
        save_checkpoint(f"{a.output}.best{i + 1}.gecf", c)
    save_checkpoint(a.output + ".gecf", average_checkpoints(res.checkpoints))
    print(f"steps\t{res.steps}\nvalidations\t{res.validations}\nstopped_early\t{res.stopped_early}")


def cmd_avg_ckpt(a):
    from .train import average_checkpoints, save_checkpoint
    ckpts = [_load_ckpt(p) for p in a.inputs]
    if len(ckpts) < 8:
        logging.warning("averaging %d checkpoints (fewer than the usual 8)", len(ckpts))
    save_checkpoint(a.output, average_checkpoints(ckpts))


def _ensemble(a):
    from .decode import EnsembleSpec
    from .train import CheckpointError, model_from_checkpoint
    paths = [p for p in a.models.split(",") if p]
    if not paths:
        raise CliError("--models needs at least one checkpoint")
    ckpts = [_load_ckpt(p) for p in paths]
    vocab = _vocab_from(ckpts[0])
    for p, c in zip(paths, ckpts):
        if c.metadata.get("vocab") != vocab.itos:
            raise CliError(f"{p}: vocabulary differs from the first model")
    try:
        members = [model_from_checkpoint(c) for c in ckpts]
        lm = model_from_checkpoint(_load_ckpt(a.lm)) if a.lm else None
    except CheckpointError as exc:
        raise CliError(str(exc)) from None
    if lm is None and a.alpha:
        raise CliError("--alpha needs --lm")
    return EnsembleSpec(members, lm, a.alpha if lm is not None else 0.0), vocab


def _encode_all(sents, vocab, bpe):
    from .textproc import bpe_apply
    return [vocab.encode(bpe_apply(bpe, s) if bpe else s) for s in sents]


def _decode_all(outs, vocab, bpe):
    from .textproc import bpe_revert
    return [bpe_revert(vocab.decode(o)) if bpe else vocab.decode(o) for o in outs]


def cmd_correct(a):
    from .decode import beam_search_batch
    sents = _read_tokens(a.input)
    if not sents:
        _write_tokens(a.output, [])
        return
    spec, vocab = _ensemble(a)
    bpe = _load_bpe(a.bpe)
    todo = [i for i, s in enumerate(sents) if s]
    results = beam_search_batch(spec, _encode_all([sents[i] for i in todo], vocab, bpe), a.beam,
                                a.max_len, nbest=max(1, a.nbest)) if todo else []
    by_idx = dict(zip(todo, results))
    with _open_out(a.output) as fh:
        for i in range(len(sents)):
            r = by_idx.get(i)
            if a.nbest:
                for h in (r.nbest if r else []):
                    toks = _decode_all([h.tokens], vocab, bpe)[0]
                    fh.write(f"{i} ||| {' '.join(toks)} ||| {h.score:.6f}\n")
            else:
                fh.write(" ".join(_decode_all([r.best.tokens], vocab, bpe)[0] if r else []) + "\n")


def cmd_tune_alpha(a):
    from .corpus import parse_m2
    from .decode import EnsembleSpec, beam_search_batch, tune_alpha
    from .metrics import m2_score
    spec, vocab = _ensemble(a)
    if spec.lm is None:
        raise CliError("tune-alpha needs --lm")
    bpe = _load_bpe(a.bpe)
    with _open_in(a.gold) as fh:
        gold = parse_m2(fh)
    srcs = _encode_all([g.src for g in gold], vocab, bpe)

    def metric(outs):
        hyps = _decode_all(outs, vocab, bpe)
        return m2_score([(g.src, h, g.annotations()) for g, h in zip(gold, hyps)]).f_half

    def decode(sp, batch):
        return [r.best.tokens for r in beam_search_batch(sp, batch, a.beam, a.max_len)]

    res = tune_alpha(EnsembleSpec(spec.members), spec.lm, srcs, metric, a.beam, decode=decode)
    print("alpha\tf05")
    for al, m in res.curve:
        print(f"{al:.1f}\t{m:.4f}")
    print(f"best\t{res.alpha:.1f}")


def cmd_m2_score(a):
    from .corpus import parse_m2
    from .metrics import m2_score_examples
    hyps = _read_tokens(a.hyp)
    with _open_in(a.gold) as fh:
        gold = parse_m2(fh)
    r = m2_score_examples([g.src for g in gold], hyps, [g.annotations() for g in gold],
                          max_unchanged_words=a.max_unchanged_words, beta=a.beta)
    print(r.format())


def cmd_gleu_score(a):
    from .metrics import gleu_score
    srcs, hyps = _read_tokens(a.src), _read_tokens(a.hyp)
    refs = [_read_tokens(p) for p in a.ref]
    for p, r in zip(a.ref, refs):
        if len(r) != len(srcs):
            raise CliError(f"{p}: {len(r)} lines, source has {len(srcs)}")
    if len(hyps) != len(srcs):
        raise CliError(f"hypothesis has {len(hyps)} lines, source has {len(srcs)}")
    res = gleu_score(srcs, hyps, [list(rs) for rs in zip(*refs)], iterations=a.iter, seed=a.seed)
    print(f"{res.score:.4f}")


def cmd_experiment(a):
    from .experiment import ExperimentConfig, report_tsv, run_experiment
    cfg = ExperimentConfig.load(a.config) if a.config else ExperimentConfig.from_dict({})
    if a.set:
        cfg = cfg.with_overrides(a.set)
    workdir = a.workdir or os.environ.get(WORKDIR_ENV) or "gecbox-work"
    results = run_experiment(cfg, workdir)
    sys.stdout.write(report_tsv(results, cfg.raw["eval"]["report_metric"]))


def cmd_report(a):
    from .experiment import report_tsv
    with _open_in(a.scores) as fh:
        results = json.load(fh)
    with _open_out(a.output) as fh:
        fh.write(report_tsv(results, a.metric))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gecbox", description="Neural grammatical error correction toolkit")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (set before numpy loads)")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded, bit-reproducible runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("bpe-learn", cmd_bpe_learn, "learn BPE merges from tokenised text")
    sp.add_argument("--input", nargs="+", required=True)
    sp.add_argument("--merges", type=int, default=50_000)
    sp.add_argument("--output", required=True)
    sp.add_argument("--vocab-output", help="also write the shared vocabulary of the segmented input")

    sp = add("bpe-apply", cmd_bpe_apply, "segment text with a BPE model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", default="-")
    sp.add_argument("--output", default="-")

    sp = add("bpe-revert", cmd_bpe_revert, "join BPE segments back into words")
    sp.add_argument("--input", default="-")
    sp.add_argument("--output", default="-")
    sp.add_argument("--marker", default="@@")

    sp = add("synth", cmd_synth, "generate a synthetic learner corpus (.src/.trg/.m2)")
    sp.add_argument("--prefix", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--vocab-size", type=int, default=200)
    sp.add_argument("--sentences", type=int, default=10_000)
    sp.add_argument("--error-rate", type=float, default=0.15)
    sp.add_argument("--missed-correction", type=float, default=0.0)
    sp.add_argument("--domain", default="general")

    sp = add("corpus-stats", cmd_corpus_stats, "token error rate of a parallel corpus")
    sp.add_argument("--src", required=True)
    sp.add_argument("--trg", required=True)

    sp = add("adapt", cmd_adapt, "domain oversampling and error-rate adaptation")
    sp.add_argument("--src", required=True)
    sp.add_argument("--trg", required=True)
    sp.add_argument("--prefix", required=True)
    sp.add_argument("--tags", help="file with one domain tag per pair")
    sp.add_argument("--oversample-tag")
    sp.add_argument("--factor", type=int, default=10)
    sp.add_argument("--target-rate", type=float)

    sp = add("align-train", cmd_align_train, "train the EM word aligner")
    sp.add_argument("--src", required=True)
    sp.add_argument("--trg", required=True)
    sp.add_argument("--iterations", type=int, default=5)
    sp.add_argument("--tension", type=float, default=4.0)
    sp.add_argument("--p-null", type=float, default=0.08)
    sp.add_argument("--output", required=True)

    sp = add("align", cmd_align, "align pairs (EM model, or Levenshtein without --model)")
    sp.add_argument("--src", required=True)
    sp.add_argument("--trg", required=True)
    sp.add_argument("--model")
    sp.add_argument("--output", default="-")

    sp = add("edit-weights", cmd_edit_weights, "per-token loss weights from alignments")
    sp.add_argument("--src", required=True)
    sp.add_argument("--trg", required=True)
    sp.add_argument("--alignment", required=True)
    sp.add_argument("--Lambda", type=float, default=3.0)
    sp.add_argument("--output", default="-")

    sp = add("pretrain-emb", cmd_pretrain_emb, "skip-gram embeddings for a vocabulary")
    sp.add_argument("--input", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--dim", type=int, default=512)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--window", type=int, default=5)
    sp.add_argument("--negatives", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", required=True)

    def model_flags(sp):
        sp.add_argument("--vocab", required=True)
        sp.add_argument("--emb-dim", type=int, default=512)
        sp.add_argument("--rnn-dim", type=int, default=1024)
        sp.add_argument("--dropout", type=float, default=0.2)
        sp.add_argument("--tied", action="store_true")
        sp.add_argument("--seed", type=int, default=0)

    sp = add("pretrain-lm", cmd_pretrain_lm, "train the decoder-only language model")
    sp.add_argument("--input", required=True)
    model_flags(sp)
    sp.add_argument("--epochs", type=int, default=2)
    sp.add_argument("--lr", type=float, default=0.001)
    sp.add_argument("--output", required=True)

    sp = add("train", cmd_train, "train a correction model")
    sp.add_argument("--src", required=True)
    sp.add_argument("--trg", required=True)
    sp.add_argument("--dev-src", required=True)
    sp.add_argument("--dev-trg", required=True)
    sp.add_argument("--weights", help="edit-weight file (one line per pair)")
    model_flags(sp)
    sp.add_argument("--p-src", type=float, default=0.0)
    sp.add_argument("--init-lm")
    sp.add_argument("--init-emb")
    sp.add_argument("--lr", type=float, default=0.0003)
    sp.add_argument("--schedule", choices=["constant", "warmup_invsqrt"], default="constant")
    sp.add_argument("--warmup", type=int, default=16_000)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--checkpoint-every", type=int, default=500)
    sp.add_argument("--keep-best", type=int, default=8)
    sp.add_argument("--Lambda", type=float, default=1.0)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--max-epochs", type=int, default=10)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--output", required=True, help="output prefix")

    sp = add("avg-ckpt", cmd_avg_ckpt, "average checkpoints element-wise")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--output", required=True)

    def decode_flags(sp):
        sp.add_argument("--models", required=True, help="comma-separated checkpoint paths")
        sp.add_argument("--lm")
        sp.add_argument("--alpha", type=float, default=0.0)
        sp.add_argument("--beam", type=int, default=24)
        sp.add_argument("--bpe")
        sp.add_argument("--max-len", type=int, help="output length cap in tokens (default 2*source+10)")

    sp = add("correct", cmd_correct, "correct sentences with an ensemble (+LM)")
    decode_flags(sp)
    sp.add_argument("--nbest", type=int, default=0)
    sp.add_argument("--input", default="-")
    sp.add_argument("--output", default="-")

    sp = add("tune-alpha", cmd_tune_alpha, "grid-search the LM weight on a dev M2 file")
    decode_flags(sp)
    sp.add_argument("--gold", required=True)

    sp = add("m2-score", cmd_m2_score, "MaxMatch precision, recall and F0.5")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--gold", required=True)
    sp.add_argument("--max-unchanged-words", type=int, default=2)
    sp.add_argument("--beta", type=float, default=0.5)

    sp = add("gleu-score", cmd_gleu_score, "GLEU against one or more references")
    sp.add_argument("--src", required=True)
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", nargs="+", required=True)
    sp.add_argument("--iter", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("experiment", cmd_experiment, "run the cumulative ablation pipeline from a config")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--workdir")

    sp = add("report", cmd_report, "TSV report from an experiment's scores.json")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--metric", default="test_f05")
    sp.add_argument("--output", default="-")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = 1 if args.deterministic else args.threads
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, OSError, ValueError, KeyError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"gecbox {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
