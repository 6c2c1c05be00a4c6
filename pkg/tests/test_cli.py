"""Subcommands chained into a miniature pipeline, plus error exits."""
import json

import numpy as np
import pytest

from gecbox.cli import main
from gecbox.corpus import parse_m2
from gecbox.experiment import STAGES
from gecbox.train import load_checkpoint

MODEL_FLAGS = ["--emb-dim", "6", "--rnn-dim", "6", "--dropout", "0.0", "--seed", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--prefix", str(d / "train"), "--seed", "1", "--vocab-size", "40",
                 "--sentences", "120", "--error-rate", "0.2"]) == 0
    assert main(["synth", "--prefix", str(d / "dev"), "--seed", "2", "--vocab-size", "40",
                 "--sentences", "15", "--error-rate", "0.2"]) == 0
    assert main(["bpe-learn", "--input", str(d / "train.src"), str(d / "train.trg"), "--merges", "30",
                 "--output", str(d / "bpe"), "--vocab-output", str(d / "vocab")]) == 0
    for split in ("train", "dev"):
        for side in ("src", "trg"):
            assert main(["bpe-apply", "--model", str(d / "bpe"), "--input", str(d / f"{split}.{side}"),
                         "--output", str(d / f"{split}.bpe.{side}")]) == 0
    assert main(["train", "--src", str(d / "train.bpe.src"), "--trg", str(d / "train.bpe.trg"),
                 "--dev-src", str(d / "dev.bpe.src"), "--dev-trg", str(d / "dev.bpe.trg"),
                 "--vocab", str(d / "vocab"), *MODEL_FLAGS, "--lr", "0.01", "--max-steps", "6",
                 "--checkpoint-every", "2", "--batch-size", "40", "--output", str(d / "m")]) == 0
    assert main(["pretrain-lm", "--input", str(d / "train.bpe.trg"), "--vocab", str(d / "vocab"),
                 *MODEL_FLAGS, "--epochs", "1", "--output", str(d / "lm.gecf")]) == 0
    return d


def test_synth_outputs_agree(work):
    src = (work / "train.src").read_text().splitlines()
    trg = (work / "train.trg").read_text().splitlines()
    with open(work / "train.m2", encoding="utf-8") as fh:
        gold = parse_m2(fh)
    assert len(src) == len(trg) == len(gold) == 120
    assert [" ".join(g.src) for g in gold] == src


def test_corpus_stats(work, capsys):
    code, out, _ = run(capsys, "corpus-stats", "--src", work / "train.src", "--trg", work / "train.trg")
    assert code == 0
    fields = dict(line.split("\t") for line in out.splitlines())
    assert int(fields["sentences"]) == 120
    assert 0.1 < float(fields["error_rate"]) < 0.3


def test_bpe_revert_round_trip(work, capsys):
    out = work / "reverted"
    assert run(capsys, "bpe-revert", "--input", work / "train.bpe.src", "--output", out)[0] == 0
    assert out.read_text() == (work / "train.src").read_text()


def test_vocab_file_has_reserved_symbols(work):
    lines = (work / "vocab").read_text().splitlines()
    assert lines[:4] == ["<pad>", "<unk>", "<s>", "</s>"]


def test_adapt(work, capsys):
    code, _, _ = run(capsys, "adapt", "--src", work / "train.src", "--trg", work / "train.trg",
                     "--prefix", work / "adapted", "--target-rate", "0.3")
    assert code == 0
    code, out, _ = run(capsys, "corpus-stats", "--src", work / "adapted.src", "--trg", work / "adapted.trg")
    rate = float(dict(line.split("\t") for line in out.splitlines())["error_rate"])
    assert rate >= 0.3 or int(dict(line.split("\t") for line in out.splitlines())["sentences"]) < 120


def test_align_and_edit_weights(work, capsys):
    args = ["--src", work / "train.src", "--trg", work / "train.trg"]
    assert run(capsys, "align-train", *args, "--iterations", "3", "--output", work / "am.json")[0] == 0
    blob = json.loads((work / "am.json").read_text())
    assert len(blob["log_likelihoods"]) == 3
    assert run(capsys, "align", *args, "--model", work / "am.json", "--output", work / "em.align")[0] == 0
    assert run(capsys, "align", *args, "--output", work / "lev.align")[0] == 0
    assert len((work / "lev.align").read_text().splitlines()) == 120
    code, out, _ = run(capsys, "edit-weights", *args, "--alignment", work / "lev.align", "--Lambda", "3")
    assert code == 0
    lines = out.splitlines()
    trg = (work / "train.trg").read_text().splitlines()
    assert [len(line.split()) for line in lines] == [len(t.split()) for t in trg]
    assert {x for line in lines for x in line.split()} <= {"1", "3"}


def test_train_artifacts(work):
    assert (work / "m.gecf").exists()
    best = sorted(work.glob("m.best*.gecf"))
    assert 1 <= len(best) <= 8
    log = (work / "m.log.tsv").read_text().splitlines()
    assert log[0] == "step\tlr\ttrain_loss\tdev_loss\tdev_metric" and len(log) == 4
    ckpt = load_checkpoint(work / "m.gecf")
    assert ckpt.metadata["vocab"] == (work / "vocab").read_text().splitlines()


def test_avg_ckpt_warns_below_eight(work, capsys, caplog):
    best = sorted(str(p) for p in work.glob("m.best*.gecf"))
    code, _, _ = run(capsys, "avg-ckpt", *best, "--output", work / "avg.gecf")
    assert code == 0 and "fewer than the usual 8" in caplog.text


def test_pretrain_emb(work, capsys):
    code, _, _ = run(capsys, "pretrain-emb", "--input", work / "train.bpe.trg", "--vocab", work / "vocab",
                     "--dim", "6", "--epochs", "1", "--output", work / "emb.gecf")
    assert code == 0
    ckpt = load_checkpoint(work / "emb.gecf")
    n_vocab = len((work / "vocab").read_text().splitlines())
    assert ckpt.tensors["emb"].shape == (n_vocab, 6)


def test_correct(work, capsys):
    out = work / "hyp"
    code, _, _ = run(capsys, "correct", "--models", work / "m.gecf", "--beam", "3", "--bpe", work / "bpe",
                     "--input", work / "dev.src", "--output", out)
    assert code == 0
    assert len(out.read_text().splitlines()) == 15
    code, nb, _ = run(capsys, "correct", "--models", f"{work / 'm.gecf'},{work / 'm.gecf'}", "--lm",
                      work / "lm.gecf", "--alpha", "0.5", "--beam", "3", "--bpe", work / "bpe", "--nbest", "2",
                      "--max-len", "12", "--input", work / "dev.src")
    assert code == 0
    rows = [line.split(" ||| ") for line in nb.splitlines()]
    assert {int(r[0]) for r in rows} == set(range(15))
    assert all(len(r) == 3 and float(r[2]) <= 0 for r in rows)


def test_correct_empty_input(work, capsys):
    empty = work / "empty"
    empty.write_text("")
    code, out, _ = run(capsys, "correct", "--models", work / "m.gecf", "--input", empty)
    assert code == 0 and out == ""


def test_correct_keeps_blank_lines(work, capsys):
    f = work / "blank"
    f.write_text("\n" + (work / "dev.src").read_text().splitlines()[0] + "\n\n")
    code, out, _ = run(capsys, "correct", "--models", work / "m.gecf", "--beam", "2", "--bpe", work / "bpe",
                       "--input", f)
    assert code == 0
    lines = out.split("\n")
    assert lines[0] == "" and lines[2] == "" and len(lines) == 4


def test_tune_alpha(work, capsys):
    code, out, _ = run(capsys, "tune-alpha", "--models", work / "m.gecf", "--lm", work / "lm.gecf",
                       "--beam", "2", "--max-len", "12", "--bpe", work / "bpe", "--gold", work / "dev.m2")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "alpha\tf05" and len(lines) == 23
    curve = {float(a): float(f) for a, f in (line.split("\t") for line in lines[1:22])}
    best = float(lines[-1].split("\t")[1])
    assert best in curve and curve[best] == max(curve.values())


def test_m2_and_gleu_scores(work, capsys):
    code, out, _ = run(capsys, "m2-score", "--hyp", work / "dev.trg", "--gold", work / "dev.m2")
    assert code == 0
    assert out.splitlines() == ["Precision : 1.0000", "Recall : 1.0000", "F_0.5 : 1.0000"]
    code, out, _ = run(capsys, "gleu-score", "--src", work / "dev.src", "--hyp", work / "dev.trg",
                       "--ref", work / "dev.trg")
    assert code == 0 and out.strip() == "1.0000"


def test_report_mean_column(tmp_path, capsys):
    runs = [{"test_f05": 0.1, "dev_f05": 0.0}, {"test_f05": 0.4, "dev_f05": 0.0}, {"test_f05": 0.35, "dev_f05": 0.0}]
    results = {"seeds": [1, 2, 3], "stages": {
        "+dropout-src": {"runs": runs, "ensemble": {"test_f05": 0.5}, "ensemble_lm": None},
        "baseline": {"runs": runs[::-1], "ensemble": {"test_f05": 0.45}, "ensemble_lm": {"test_f05": 0.47}},
    }}
    path = tmp_path / "scores.json"
    path.write_text(json.dumps(results))
    code, out, _ = run(capsys, "report", "--scores", path)
    assert code == 0
    rows = [line.split("\t") for line in out.splitlines()]
    assert rows[0] == ["stage", "run1", "run2", "run3", "mean", "ensemble", "ensemble+LM"]
    assert [r[0] for r in rows[1:]] == ["baseline", "+dropout-src"]
    for r in rows[1:]:
        assert float(r[4]) == pytest.approx(np.mean([float(x) for x in r[1:4]]), abs=5e-5)
    assert rows[2][6] == "NA"
    assert run(capsys, "report", "--scores", path, "--metric", "nope")[0] == 1


def test_stage_list():
    assert STAGES == ("baseline", "+dropout-src", "+domain-adapt", "+error-adapt",
                      "+tied-emb", "+edit-mle", "+pretrain-emb", "+pretrain-dec")


@pytest.mark.parametrize("argv,needle", [
    (["m2-score", "--hyp", "/nonexistent/h", "--gold", "/nonexistent/g"], "cannot read"),
    (["avg-ckpt", "/nonexistent.gecf", "--output", "/tmp/x.gecf"], "no such checkpoint"),
    (["experiment", "--set", "train.nope=1"], "unknown config key"),
    (["experiment", "--set", "runs.stages=[\"+bogus\"]"], "unknown stage"),
])
def test_error_exits(capsys, argv, needle):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert needle in err and err.startswith(f"gecbox {argv[0]}: error:")


def test_alpha_without_lm_is_rejected(work, capsys):
    code, _, err = run(capsys, "correct", "--models", work / "m.gecf", "--alpha", "0.3", "--input", work / "dev.src")
    assert code == 1 and "--alpha needs --lm" in err


def test_incompatible_checkpoint_is_rejected(work, capsys):
    code, _, err = run(capsys, "correct", "--models", work / "emb.gecf", "--input", work / "dev.src")
    assert code == 1


def test_lm_as_member_is_rejected(work, capsys):
    code, _, err = run(capsys, "correct", "--models", work / "lm.gecf", "--input", work / "dev.src")
    assert code == 1 and "language model" in err
