"""Acceptance criteria 1-13.

Each test records one PASS/FAIL line (printed at the end of the session)
before asserting. Tolerances and budgets are pinned as module constants.
The trend criteria (6, 7, 8, 10) share one cache of trained runs on the
default experiment config; a full pass takes roughly two hours on one core.
"""
import json
import random
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest

from gecbox import corpus, metrics
from gecbox.align import edit_weights, levenshtein_align, train_aligner, viterbi_align
from gecbox.decode import ALPHA_GRID, EnsembleSpec, beam_search_batch, tune_alpha
from gecbox.experiment import Experiment, ExperimentConfig
from gecbox.model import DecoderLm, ModelConfig, Seq2SeqModel, Vocab, make_batch
from gecbox.train import (
    TrainConfig,
    TrainItem,
    average_checkpoints,
    edit_weighted_mle_loss,
    mle_loss,
    model_from_checkpoint,
    train,
)

from oracles import (
    bijective_corpus,
    brute_force_matches,
    gradcheck,
    op_cases,
    random_case,
    random_graph,
    tiny_model_case,
)

# criterion 1
F_TOL = 0.05
# criterion 2
M2_CASES, M2_BUDGET_S = 200, 60.0
# criterion 3
FD_MIN_CONFIGS, FD_MAX_REL, FD_BUDGET_S = 50, 1e-4, 300.0
# criterion 4
LOSS_BATCHES, DECOMP_REL = 100, 1e-10
# criterion 5
OVERFIT_SENTENCES, OVERFIT_VOCAB, OVERFIT_RATE = 10_000, 200, 0.15
OVERFIT_DIM, OVERFIT_BUDGET_S = 64, 15 * 60.0
OVERFIT_HELD_IN, OVERFIT_DEV = 1000, 300
MIN_EXACT, MIN_DEV_F = 0.90, 0.70
# criteria 6, 7, 8, 10
SEEDS = (1, 2, 3, 4)
REPLICATIONS = ((1, 2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12))
TREND_STAGE = "+error-adapt"
AVG_MAX_DROP = 0.02
# criterion 11
EM_MIN_ACCURACY = 0.99


# ---------------------------------------------------------------------------
# 1-4: formulas, oracles and gradients
# ---------------------------------------------------------------------------

def test_c01_f05_formula(verdict):
    rows = [((0.708, 0.095), 30.9), ((0.653, 0.271), 51.0)]
    got = [100 * metrics.f_beta(p, r) for (p, r), _ in rows]
    ok = all(abs(g - want) <= F_TOL for g, (_, want) in zip(got, rows))
    detail = ", ".join(f"F(P={p}, R={r}) = {g:.4f} vs {want} +/- {F_TOL}" for ((p, r), want), g in zip(rows, got))
    verdict(1, "F0.5 formula", ok, detail)
    assert ok, detail


def test_c02_m2_matches_brute_force(verdict):
    rng = random.Random(2024)
    t0 = time.monotonic()
    agree = 0
    for _ in range(M2_CASES):
        src, hyp, gold = random_case(rng)
        system = metrics.extract_system_edits(src, hyp, gold)
        want, _ = brute_force_matches(src, hyp, [e.key() for e in gold])
        agree += metrics.count_matches(system, gold) == want
    elapsed = time.monotonic() - t0
    ok = agree == M2_CASES and elapsed < M2_BUDGET_S
    verdict(2, "M2 oracle equivalence", ok, f"{agree}/{M2_CASES} cases agree in {elapsed:.1f}s")
    assert ok


def test_c03_gradient_suite(verdict):
    t0 = time.monotonic()
    errors = {}
    for name, build in sorted(op_cases().items()):
        rng = np.random.default_rng(31)
        inputs, forward = build(rng)
        errors[f"op:{name}"] = gradcheck(inputs, forward, rng)
    for seed in range(15):
        rng = np.random.default_rng(500 + seed)
        inputs, forward, _ = random_graph(rng)
        errors[f"graph:{seed}"] = gradcheck(inputs, forward, rng)
    for seed in range(5):
        for tied in (False, True):
            rng = np.random.default_rng(900 + seed)
            _, inputs, forward = tiny_model_case(rng, tied=tied)
            errors[f"model:{seed}:{'tied' if tied else 'untied'}"] = gradcheck(inputs, forward, rng)
    elapsed = time.monotonic() - t0
    worst = max(errors, key=errors.get)
    ok = len(errors) >= FD_MIN_CONFIGS and errors[worst] < FD_MAX_REL and elapsed < FD_BUDGET_S
    verdict(3, "finite-difference gradients", ok,
            f"{len(errors)} configs, worst {worst} rel {errors[worst]:.2e}, {elapsed:.0f}s")
    assert ok


def _word_pairs(rng, n):
    words = [f"w{i}" for i in range(12)]
    out = []
    for _ in range(n):
        src = [rng.choice(words) for _ in range(rng.randint(1, 7))]
        trg = list(src)
        for _ in range(rng.randint(0, 3)):
            op = rng.random()
            if op < 0.5 and trg:
                trg[rng.randrange(len(trg))] = rng.choice(words)
            elif op < 0.75 and len(trg) > 1:
                del trg[rng.randrange(len(trg))]
            else:
                trg.insert(rng.randint(0, len(trg)), rng.choice(words))
        out.append((src, trg))
    return out


def test_c04_edit_weighted_identity(verdict):
    rng = random.Random(4)
    vocab = Vocab.build([[f"w{i}" for i in range(12)]])
    model = Seq2SeqModel(ModelConfig(vocab_size=len(vocab), emb_dim=6, rnn_dim=7, att_dim=5),
                         seed=4, dtype=np.float64)
    bitwise = 0
    worst_rel = 0.0
    for _ in range(LOSS_BATCHES):
        pairs = _word_pairs(rng, rng.randint(1, 5))
        lam3 = [list(edit_weights(levenshtein_align(s, t), s, t, 3.0).lambda_t) for s, t in pairs]
        lam1 = [list(edit_weights(levenshtein_align(s, t), s, t, 1.0).lambda_t) for s, t in pairs]
        batch = make_batch([vocab.encode(s) for s, _ in pairs], [vocab.encode(t) for _, t in pairs],
                           dtype=np.float64)
        plain = mle_loss(model, batch, backward=False)
        one = edit_weighted_mle_loss(model, batch, lam1, backward=False)
        bitwise += np.float64(plain.total).tobytes() == np.float64(one.total).tobytes()
        three = edit_weighted_mle_loss(model, batch, lam3, backward=False)
        edit_nll = sum(plain.per_token_nll[i, j] for i, ws in enumerate(lam3) for j, w in enumerate(ws) if w == 3.0)
        want = plain.total + 2.0 * edit_nll
        worst_rel = max(worst_rel, abs(three.total - want) / abs(want))
    ok = bitwise == LOSS_BATCHES and worst_rel <= DECOMP_REL
    verdict(4, "edit-weighted MLE identity", ok,
            f"Lambda=1 bitwise on {bitwise}/{LOSS_BATCHES} batches; Lambda=3 worst rel err {worst_rel:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 5: end-to-end overfit under a wall-clock budget
# ---------------------------------------------------------------------------

def _decode_words(vocab, spec, sentences, beam=12):
    srcs = [vocab.encode(s) for s in sentences]
    return [vocab.decode(r.best.tokens) for r in beam_search_batch(spec, srcs, beam)]


@pytest.mark.slow
def test_c05_end_to_end_overfit(verdict):
    spec = corpus.CorruptionSpec.for_error_rate(OVERFIT_RATE, OVERFIT_VOCAB)
    data = corpus.generate_synthetic(51, OVERFIT_VOCAB, OVERFIT_SENTENCES, spec)
    dev = corpus.generate_synthetic(52, OVERFIT_VOCAB, OVERFIT_DEV, spec)
    vocab = Vocab.build([e.src for e in data] + [e.trg for e in data])
    items = [TrainItem(vocab.encode(e.src), vocab.encode(e.trg)) for e in data]
    dev_items = [TrainItem(vocab.encode(e.src), vocab.encode(e.trg)) for e in dev]
    cfg = ModelConfig(vocab_size=len(vocab), emb_dim=OVERFIT_DIM, rnn_dim=OVERFIT_DIM,
                      p_dropout_rnn=0.0, p_src=0.0)
    model = Seq2SeqModel(cfg, seed=1)

    def dev_f05(m):
        hyps = _decode_words(vocab, EnsembleSpec([m]), [e.src for e in dev], beam=1)
        return metrics.m2_score([(e.src, h, e.annotations()) for e, h in zip(dev, hyps)]).f_half

    tcfg = TrainConfig(lr=0.004, schedule="warmup_invsqrt", warmup_steps=300, checkpoint_every=500,
                       patience=10, max_epochs=10_000, max_seconds=OVERFIT_BUDGET_S, seed=1)
    t0 = time.monotonic()
    res = train(model, items, dev_items, tcfg, dev_metric=dev_f05)
    trained_s = time.monotonic() - t0
    final = EnsembleSpec([model_from_checkpoint(average_checkpoints(res.checkpoints))])
    held_in = data[:OVERFIT_HELD_IN]
    hyps = _decode_words(vocab, final, [e.src for e in held_in])
    exact = float(np.mean([h == e.trg for h, e in zip(hyps, held_in)]))
    dev_hyps = _decode_words(vocab, final, [e.src for e in dev])
    f = metrics.m2_score([(e.src, h, e.annotations()) for e, h in zip(dev, dev_hyps)]).f_half
    ok = exact >= MIN_EXACT and f >= MIN_DEV_F
    verdict(5, "end-to-end overfit", ok,
            f"held-in exact match {exact:.4f} (>= {MIN_EXACT}), dev F0.5 {f:.4f} (>= {MIN_DEV_F}), "
            f"{res.steps} steps in {trained_s:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6, 7, 8, 10: directional trends on the default synthetic experiment
# ---------------------------------------------------------------------------

class Runs:
    """Trains each (stage, Lambda, seed) run at most once."""

    def __init__(self):
        self.exp = Experiment(ExperimentConfig.from_dict({}))
        self._cache = {}

    def get(self, stage, seed, Lambda=1.0):
        key = (stage, float(Lambda), seed)
        if key not in self._cache:
            self._cache[key] = self.exp.train_run(stage, seed, Lambda=Lambda)
        return self._cache[key]

    def mean(self, stage, key, Lambda=1.0, seeds=SEEDS):
        return float(np.mean([self.get(stage, s, Lambda).metrics[key] for s in seeds]))


@pytest.fixture(scope="module")
def runs():
    return Runs()


@pytest.mark.slow
def test_c06_edit_weighting_trades_precision_for_recall(runs, verdict):
    r1, r3 = runs.mean(TREND_STAGE, "dev_r", 1.0), runs.mean(TREND_STAGE, "dev_r", 3.0)
    p1, p3 = runs.mean(TREND_STAGE, "dev_p", 1.0), runs.mean(TREND_STAGE, "dev_p", 3.0)
    ok = r3 > r1 and p3 <= p1
    verdict(6, "edit weighting P/R trade-off", ok,
            f"mean dev recall {r1:.4f} -> {r3:.4f}, precision {p1:.4f} -> {p3:.4f} (Lambda 1 -> 3, {len(SEEDS)} seeds)")
    assert ok


@pytest.mark.slow
def test_c07_ensemble_precision(runs, verdict):
    exp = runs.exp
    details, ok = [], True
    for seeds in REPLICATIONS:
        members = [runs.get(TREND_STAGE, s) for s in seeds]
        single = float(np.mean([m.metrics["dev_p"] for m in members]))
        spec = EnsembleSpec([m.model for m in members])
        hyps = exp.translate(spec, [e.src for e in exp.data.dev], exp.cfg.raw["decode"]["beam"])
        ens = exp.score(exp.data.dev, hyps, "dev", with_gleu=False)["dev_p"]
        ok &= ens >= single
        details.append(f"seeds {seeds[0]}-{seeds[-1]}: ensemble {ens:.4f} vs mean single {single:.4f}")
    verdict(7, "ensemble precision", ok, "; ".join(details))
    assert ok


@pytest.mark.slow
def test_c08_dropout_and_error_adaptation_improve(runs, verdict):
    stages = ("baseline", "+dropout-src", "+domain-adapt", "+error-adapt")
    f = {s: runs.mean(s, "dev_f05") for s in stages}
    ok = f["+dropout-src"] > f["baseline"] and f["+error-adapt"] > f["+domain-adapt"]
    verdict(8, "source dropout and error adaptation", ok,
            ", ".join(f"{s} {f[s]:.4f}" for s in stages) + f" (mean dev F0.5 over {len(SEEDS)} seeds)")
    assert ok


@pytest.mark.slow
def test_c10_checkpoint_averaging(runs, verdict):
    exp = runs.exp
    drops = []
    for seed in SEEDS:
        r = runs.get(TREND_STAGE, seed)
        # the log's dev metric uses the dev beam, so the averaged model is scored the same way
        best_single = max(row.dev_metric for row in r.log)
        drops.append(best_single - exp.dev_f05(EnsembleSpec([r.model])))
    ok = max(drops) <= AVG_MAX_DROP
    verdict(10, "checkpoint averaging", ok,
            "dev F0.5 drop vs best single checkpoint per seed: " + ", ".join(f"{d:+.4f}" for d in drops)
            + f" (limit {AVG_MAX_DROP})")
    if not ok:
        # a soft criterion: reported, not fatal
        warnings.warn(f"checkpoint averaging lost up to {max(drops):.4f} dev F0.5")


# ---------------------------------------------------------------------------
# 9, 11, 12: contracts of the alpha search, aligners and GLEU
# ---------------------------------------------------------------------------

def test_c09_alpha_search_contract(verdict):
    V = 10
    rng = np.random.default_rng(9)
    mcfg = ModelConfig(vocab_size=V, emb_dim=5, rnn_dim=6, att_dim=4)
    member = Seq2SeqModel(mcfg, seed=1, dtype=np.float64)
    lm = DecoderLm(mcfg, seed=2, dtype=np.float64)
    for m in (member, lm):
        for _, t in m.params.items():
            t.data = t.data + rng.standard_normal(t.shape)
    srcs = [[int(x) for x in rng.integers(4, V, size=int(rng.integers(2, 6)))] for _ in range(12)]
    golds = [[int(x) for x in rng.integers(4, V, size=len(s))] for s in srcs]
    words = [[[str(x) for x in seq] for seq in group] for group in (srcs, golds)]
    annotations = [metrics.extract_system_edits(s, g) for s, g in zip(*words)]

    def f05(out):
        hyps = [[str(x) for x in o] for o in out]
        return metrics.m2_score([(s, h, a) for s, h, a in zip(words[0], hyps, annotations)]).f_half

    spec = EnsembleSpec([member])
    res = tune_alpha(spec, lm, srcs, f05, beam_size=3)
    curve = dict(res.curve)
    best = max(curve.values())
    contract = (res.alpha in ALPHA_GRID and [a for a, _ in res.curve] == list(ALPHA_GRID)
                and curve[res.alpha] == best and res.alpha == min(a for a, v in res.curve if v == best))
    dup = tune_alpha(spec, member, srcs, f05, beam_size=3)
    flat = len({v for _, v in dup.curve}) == 1 and dup.alpha == 0.0
    ok = contract and flat
    verdict(9, "alpha search contract", ok,
            f"alpha*={res.alpha} attains max {best:.4f} of a {len(res.curve)}-point curve; "
            f"duplicate-member curve {'flat' if flat else 'not flat'} with alpha*={dup.alpha}")
    assert ok


def test_c11_aligner_recovery(verdict):
    data, gold = bijective_corpus(2000, vocab=50, seed=11)
    model = train_aligner(data, 5)
    hit = total = 0
    for (src, trg), g in zip(data, gold):
        a = viterbi_align(model, src, trg)
        hit += sum(x == y for x, y in zip(a, g))
        total += len(g)
    accuracy = hit / total
    rng = random.Random(11)
    identical = [[f"w{rng.randrange(30)}" for _ in range(rng.randint(0, 12))] for _ in range(1000)]
    identity = sum(levenshtein_align(s, s) == [(i, i) for i in range(len(s))] for s in identical)
    ok = accuracy >= EM_MIN_ACCURACY and identity == len(identical)
    verdict(11, "aligner recovery", ok,
            f"EM link accuracy {accuracy:.4f} after 5 iterations; Levenshtein identity {identity}/{len(identical)}")
    assert ok


GLEU_FIXTURES = [
    # source, reference, hypothesis with exactly one of the reference's corrections
    ("he go to school every days .", "he goes to school every day .", "he goes to school every days ."),
    ("she have two cat .", "she has two cats .", "she has two cat ."),
    ("i am agree with this opinion .", "i agree with this opinion .", "i agree with this opinion ."),
    ("there is many reason for it .", "there are many reasons for it .", "there are many reason for it ."),
    ("we discussed about a problem yesterday .", "we discussed the problem yesterday .",
     "we discussed a problem yesterday ."),
    ("the informations was useful for me .", "the information was useful to me .",
     "the information was useful for me ."),
]


def test_c12_gleu_sanity(verdict):
    srcs = [s.split() for s, _, _ in GLEU_FIXTURES]
    refs = [r.split() for _, r, _ in GLEU_FIXTURES]
    fixed = [h.split() for _, _, h in GLEU_FIXTURES]
    perfect = metrics.gleu_score(srcs, refs, [[r] for r in refs]).score
    below = 0
    for s, r, h in zip(srcs, refs, fixed):
        untouched = metrics.gleu_score([s], [s], [[r]]).score
        one_fix = metrics.gleu_score([s], [h], [[r]]).score
        below += untouched < one_fix
    corpus_untouched = metrics.gleu_score(srcs, srcs, [[r] for r in refs]).score
    corpus_fixed = metrics.gleu_score(srcs, fixed, [[r] for r in refs]).score
    ok = perfect == pytest.approx(1.0, abs=1e-12) and below == len(GLEU_FIXTURES) and corpus_untouched < corpus_fixed
    verdict(12, "GLEU sanity", ok,
            f"perfect {perfect:.4f}; uncorrected below one-fix on {below}/{len(GLEU_FIXTURES)} fixtures; "
            f"corpus {corpus_untouched:.4f} < {corpus_fixed:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 13: bitwise reproducibility of the experiment subcommand
# ---------------------------------------------------------------------------

TINY_EXPERIMENT = {
    "data": {"n_general": 60, "n_in_domain": 12, "n_dev": 10, "n_test": 10, "n_mono": 40},
    "model": {"emb_dim": 8, "rnn_dim": 8},
    "train": {"max_steps": 6, "checkpoint_every": 3, "batch_size": 16, "warmup_steps": 3},
    "pretrain": {"emb_epochs": 1, "lm_epochs": 1},
    "decode": {"beam": 3, "max_len": 12, "alpha": 0.3},
    "eval": {"gleu_iterations": 20},
    "runs": {"seeds": [1, 2]},
}


@pytest.mark.slow
def test_c13_experiment_is_bitwise_reproducible(tmp_path, verdict):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(TINY_EXPERIMENT))
    outputs = []
    for k in range(2):
        work = tmp_path / f"work{k}"
        proc = subprocess.run([sys.executable, "-m", "gecbox.cli", "--deterministic", "experiment",
                               "--config", str(config), "--workdir", str(work)],
                              capture_output=True, text=True, check=True)
        (run_dir,) = work.glob("run-*")
        scores = json.loads((run_dir / "scores.json").read_text())
        outputs.append((proc.stdout, scores, sorted(p.name for p in run_dir.iterdir()),
                        {p.name: p.read_bytes() for p in run_dir.glob("*.gecf")}))
    (out_a, sc_a, files_a, ck_a), (out_b, sc_b, files_b, ck_b) = outputs
    n_stages = len(sc_a["stages"])

    def numbers(x):
        if isinstance(x, dict):
            return [v for k in sorted(x) for v in numbers(x[k])]
        if isinstance(x, list):
            return [v for item in x for v in numbers(item)]
        return [np.float64(x).tobytes()] if isinstance(x, (int, float)) and not isinstance(x, bool) else []

    same_numbers = numbers(sc_a) == numbers(sc_b) and len(numbers(sc_a)) > 0
    ok = out_a == out_b and same_numbers and files_a == files_b and ck_a == ck_b
    verdict(13, "bitwise reproducibility", ok,
            f"{len(numbers(sc_a))} reported numbers over {n_stages} stages, report and {len(ck_a)} "
            f"checkpoints {'identical' if ok else 'differ'}")
    assert ok
