"""Experiment configs and the cumulative ablation pipeline.

A config is a JSON object with the sections listed in ``DEFAULTS``; unknown
keys are rejected. Stages are applied incrementally in ``STAGES`` order, so
``+error-adapt`` also includes source dropout and domain oversampling.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import align, corpus, metrics, model, textproc
from .corpus import CorruptionSpec, ParallelExample
from .decode import EnsembleSpec, beam_search_batch, greedy_decode_batch, tune_alpha
from .model import ModelConfig, Seq2SeqModel, Vocab
from .train import (Checkpoint, TrainConfig, TrainItem, average_checkpoints,
                    model_from_checkpoint, pretrain_decoder_lm, save_checkpoint, train)

logger = logging.getLogger(__name__)

STAGES = ("baseline", "+dropout-src", "+domain-adapt", "+error-adapt",
          "+tied-emb", "+edit-mle", "+pretrain-emb", "+pretrain-dec")

DEFAULTS: dict = {
    "data": {
        "seed": 1,
        "vocab_size": 200,
        "n_general": 3000,
        "n_in_domain": 300,
        "n_dev": 300,
        "n_test": 300,
        "n_mono": 5000,
        "general_error_rate": 0.10,
        "in_domain_error_rate": 0.06,
        "eval_error_rate": 0.15,
        "missed_correction": 0.2,
        "bpe_merges": textproc.DEFAULT_MERGES,
        "paths": None,
    },
    "adapt": {
        "oversample_factor": corpus.DEFAULT_OVERSAMPLE,
        "target_error_rate": corpus.DEFAULT_TARGET_RATE,
        "in_domain_tag": "in-domain",
        "aligner": "em",
        "em_iterations": 5,
    },
    "model": {
        "emb_dim": 64,
        "rnn_dim": 64,
        "att_dim": None,
        "p_dropout_rnn": 0.2,
        "p_src": model.DEFAULT_P_SRC,
        "max_len": 100,
        "literal_src_dropout": False,
    },
    "train": {
        "lr": 0.004,
        "schedule": "warmup_invsqrt",
        "warmup_steps": 300,
        "patience": 10,
        "checkpoint_every": 100,
        "keep_best_k": 8,
        "Lambda": 3.0,
        "batch_size": 64,
        "max_epochs": 1000,
        "max_steps": 3000,
        "clip_norm": 1.0,
    },
    "pretrain": {
        "emb_epochs": 5,
        "emb_window": 5,
        "emb_negatives": 5,
        "lm_epochs": 2,
        "lm_lr": 0.002,
        "lm_seed": 0,
    },
    "decode": {
        "beam": 12,
        "dev_beam": 1,
        "alpha": "tune",
        "lm_fusion": True,
        "max_len": None,
    },
    "eval": {
        "gleu_iterations": metrics.GLEU_ITERATIONS,
        "report_metric": "test_f05",
    },
    "runs": {
        "seeds": [1, 2, 3, 4],
        "stages": list(STAGES),
    },
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "ExperimentConfig":
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def with_overrides(self, assignments: Sequence[str]) -> "ExperimentConfig":
        """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
        d = copy.deepcopy(self.raw)
        for a in assignments:
            if "=" not in a:
                raise ConfigError(f"override {a!r} is not key=value")
            key, val = a.split("=", 1)
            try:
                val = json.loads(val)
            except json.JSONDecodeError:
                pass
            parts = key.split(".")
            node = d
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = val
        return ExperimentConfig.from_dict(d)

    def validate(self) -> None:
        stages = self.raw["runs"]["stages"]
        for s in stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}; known: {', '.join(STAGES)}")
        if len(self.raw["runs"]["seeds"]) < 1:
            raise ConfigError("runs.seeds must list at least one seed")
        alpha = self.raw["decode"]["alpha"]
        if alpha != "tune" and not isinstance(alpha, (int, float)):
            raise ConfigError("decode.alpha must be a number or \"tune\"")
        try:
            self.train_config(1.0, 0)
            ModelConfig(vocab_size=10, **self.raw["model"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def stages(self) -> list[str]:
        """Requested stages in canonical (cumulative) order."""
        return [s for s in STAGES if s in self.raw["runs"]["stages"]]

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["runs"]["seeds"])

    def hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def train_config(self, Lambda: float, seed: int) -> TrainConfig:
        t = dict(self.raw["train"])
        t["Lambda"] = Lambda
        return TrainConfig(seed=seed, **t)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def stage_flags(stage: str) -> dict[str, bool]:
    """Which modifications are active at ``stage`` (all earlier ones are)."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    idx = STAGES.index(stage)
    return {name: i <= idx for i, name in enumerate(STAGES)}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    general: list[ParallelExample]
    in_domain: list[ParallelExample]
    dev: list[ParallelExample]
    test: list[ParallelExample]
    mono: list[list[str]]


def build_data(cfg: ExperimentConfig) -> Dataset:
    d = cfg.raw["data"]
    tag = cfg.raw["adapt"]["in_domain_tag"]
    if d["paths"]:
        return _read_data(d["paths"], tag)
    V, seed = d["vocab_size"], d["seed"]
    gen_spec = CorruptionSpec.for_error_rate(d["general_error_rate"], V, "general",
                                             missed_correction=d["missed_correction"])
    in_spec = CorruptionSpec.for_error_rate(d["in_domain_error_rate"], V, tag,
                                            missed_correction=d["missed_correction"])
    # evaluation data is denser in errors than the in-domain training data and fully annotated
    clean_spec = CorruptionSpec.for_error_rate(d["eval_error_rate"], V, tag)
    general = corpus.generate_synthetic(seed, V, d["n_general"], gen_spec, "general")
    in_domain = corpus.generate_synthetic(seed + 1000, V, d["n_in_domain"], in_spec, tag)
    dev = corpus.generate_synthetic(seed + 2000, V, d["n_dev"], clean_spec, tag)
    test = corpus.generate_synthetic(seed + 3000, V, d["n_test"], clean_spec, tag)
    lex = corpus.build_lexicon(V)
    mono = corpus.generate_clean(lex, d["n_mono"], corpus.rng_for(seed + 4000, "mono"), tag)
    return Dataset(general, in_domain, dev, test, [list(s) for s in mono])


def _read_data(paths: dict, tag: str) -> Dataset:
    def pair(key, domain):
        if key not in paths:
            return []
        src, trg = paths[key]
        with open(src, encoding="utf-8") as fs, open(trg, encoding="utf-8") as ft:
            return corpus.read_parallel(fs, ft, domain)

    def m2(key):
        with open(paths[key], encoding="utf-8") as fh:
            sents = corpus.parse_m2(fh)
        return corpus.examples_from_m2(sents, domain_tag=tag)

    mono = []
    if "mono" in paths:
        with open(paths["mono"], encoding="utf-8") as fh:
            mono = textproc.read_lines(fh)
    return Dataset(pair("general", "general"), pair("in_domain", tag), m2("dev_m2"), m2("test_m2"), mono)


def stage_corpus(data: Dataset, cfg: ExperimentConfig, stage: str) -> list[ParallelExample]:
    flags = stage_flags(stage)
    a = cfg.raw["adapt"]
    train = list(data.general) + list(data.in_domain)
    if flags["+domain-adapt"]:
        train = corpus.oversample(train, a["in_domain_tag"], a["oversample_factor"])
    if flags["+error-adapt"]:
        train = corpus.error_rate_adapt(train, a["target_error_rate"])
    return train


# ---------------------------------------------------------------------------
# the experiment
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    stage: str
    seed: int
    metrics: dict[str, float]
    model: Seq2SeqModel
    checkpoints: list[Checkpoint]
    log: list = field(default_factory=list)


def _split_metrics(prefix: str, m2: metrics.M2Result, gleu: float) -> dict[str, float]:
    return {f"{prefix}_p": m2.precision, f"{prefix}_r": m2.recall, f"{prefix}_f05": m2.f_half,
            f"{prefix}_gleu": gleu}


class Experiment:
    """Shared state for one config: data, BPE, vocabulary and cached pre-training."""

    def __init__(self, cfg: ExperimentConfig, workdir: str | Path | None = None):
        self.cfg = cfg
        self.hash = cfg.hash()
        self.workdir = Path(workdir) / f"run-{self.hash[:12]}" if workdir is not None else None
        if self.workdir is not None:
            self.workdir.mkdir(parents=True, exist_ok=True)
            (self.workdir / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
        self.data = build_data(cfg)
        texts = [e.src for e in self.data.general + self.data.in_domain]
        texts += [e.trg for e in self.data.general + self.data.in_domain] + self.data.mono
        self.bpe = textproc.bpe_learn(texts, cfg.raw["data"]["bpe_merges"])
        self.vocab = Vocab.build(textproc.bpe_apply(self.bpe, s) for s in texts)
        self._emb: np.ndarray | None = None
        self._lm = None
        self._items: dict[tuple[str, bool], list[TrainItem]] = {}

    # -- text helpers ------------------------------------------------------

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return self.vocab.encode(textproc.bpe_apply(self.bpe, tokens))

    def decode_ids(self, ids: Sequence[int]) -> list[str]:
        return textproc.bpe_revert(self.vocab.decode(ids))

    def model_config(self, stage: str) -> ModelConfig:
        flags = stage_flags(stage)
        m = dict(self.cfg.raw["model"])
        if not flags["+dropout-src"]:
            m["p_src"] = 0.0
        return ModelConfig(vocab_size=len(self.vocab), tied=flags["+tied-emb"], **m)

    def lambda_for(self, stage: str) -> float:
        return float(self.cfg.raw["train"]["Lambda"]) if stage_flags(stage)["+edit-mle"] else 1.0

    def train_items(self, stage: str, Lambda: float = 1.0) -> list[TrainItem]:
        key = (stage, Lambda)
        if key in self._items:
            return self._items[key]
        examples = stage_corpus(self.data, self.cfg, stage)
        pairs = [(textproc.bpe_apply(self.bpe, e.src), textproc.bpe_apply(self.bpe, e.trg)) for e in examples]
        weights: list[list[float] | None] = [None] * len(pairs)
        if Lambda != 1.0:
            a = self.cfg.raw["adapt"]
            if a["aligner"] == "em":
                am = align.train_aligner(pairs, a["em_iterations"])
                links = [align.viterbi_align(am, s, t) for s, t in pairs]
            else:
                links = [align.levenshtein_align(s, t) for s, t in pairs]
            weights = [list(align.edit_weights(l, s, t, Lambda).lambda_t) for l, (s, t) in zip(links, pairs)]
        items = [TrainItem(self.vocab.encode(s), self.vocab.encode(t), w)
                 for (s, t), w in zip(pairs, weights) if s and t]
        self._items[key] = items
        return items

    def dev_items(self) -> list[TrainItem]:
        return [TrainItem(self.encode(e.src), self.encode(e.trg)) for e in self.data.dev]

    # -- pre-training ------------------------------------------------------

    def pretrained_embeddings(self, dim: int) -> np.ndarray:
        if self._emb is None:
            p = self.cfg.raw["pretrain"]
            mono = [self.encode(s) for s in self.data.mono]
            self._emb = model.pretrain_embeddings(mono, len(self.vocab), dim, p["emb_epochs"],
                                                  p["emb_window"], p["emb_negatives"], seed=p["lm_seed"])
        return self._emb

    def language_model(self, config: ModelConfig, with_embeddings: bool):
        key = (config.tied, with_embeddings)
        if self._lm is None or self._lm[0] != key:
            p = self.cfg.raw["pretrain"]
            mono = [self.encode(s) for s in self.data.mono]
            init = self.pretrained_embeddings(config.emb_dim) if with_embeddings else None
            lm, _ = pretrain_decoder_lm(mono, config, p["lm_epochs"], p["lm_seed"], p["lm_lr"], init_embeddings=init)
            self._lm = (key, lm)
        return self._lm[1]

    # -- evaluation --------------------------------------------------------

    def translate(self, spec: EnsembleSpec, sentences: Sequence[Sequence[str]], beam: int) -> list[list[str]]:
        srcs = [self.encode(s) for s in sentences]
        max_len = self.cfg.raw["decode"]["max_len"]
        if beam == 1:
            out = greedy_decode_batch(spec, srcs, max_len)
        else:
            out = [r.best.tokens for r in beam_search_batch(spec, srcs, beam, max_len)]
        return [self.decode_ids(o) for o in out]

    def score(self, split: Sequence[ParallelExample], hyps: Sequence[Sequence[str]], prefix: str,
              with_gleu: bool = True) -> dict[str, float]:
        m2 = metrics.m2_score([(e.src, h, e.annotations()) for e, h in zip(split, hyps)])
        g = 0.0
        if with_gleu:
            g = metrics.gleu_score([e.src for e in split], hyps, [[e.trg] for e in split],
                                   iterations=self.cfg.raw["eval"]["gleu_iterations"]).score
        return _split_metrics(prefix, m2, g)

    def dev_f05(self, spec: EnsembleSpec, beam: int | None = None) -> float:
        beam = self.cfg.raw["decode"]["dev_beam"] if beam is None else beam
        hyps = self.translate(spec, [e.src for e in self.data.dev], beam)
        return self.score(self.data.dev, hyps, "dev", with_gleu=False)["dev_f05"]

    def evaluate(self, spec: EnsembleSpec, beam: int | None = None) -> dict[str, float]:
        beam = self.cfg.raw["decode"]["beam"] if beam is None else beam
        out = {}
        for name, split in (("dev", self.data.dev), ("test", self.data.test)):
            hyps = self.translate(spec, [e.src for e in split], beam)
            out.update(self.score(split, hyps, name))
        return out

    # -- training ------------------------------------------------------------

    def build_model(self, stage: str, seed: int) -> Seq2SeqModel:
        flags = stage_flags(stage)
        config = self.model_config(stage)
        m = Seq2SeqModel(config, seed=seed)
        if flags["+pretrain-emb"]:
            emb = self.pretrained_embeddings(config.emb_dim)
            for name in model.embedding_param(config):
                m.params[name].data = emb.astype(m.dtype)
        if flags["+pretrain-dec"]:
            lm = self.language_model(config, flags["+pretrain-emb"])
            model.transfer_from_lm(lm.params.state_dict(), m)
        return m

    def train_run(self, stage: str, seed: int, Lambda: float | None = None,
                  evaluate: bool = True) -> RunResult:
        Lambda = self.lambda_for(stage) if Lambda is None else Lambda
        items = self.train_items(stage, Lambda)
        m = self.build_model(stage, seed)
        tcfg = self.cfg.train_config(Lambda, seed)
        log_path = None
        if self.workdir is not None:
            log_path = self.workdir / f"train.{_slug(stage)}.seed{seed}.lambda{Lambda:g}.tsv"
            log_path.unlink(missing_ok=True)

        def dev_metric(mod):
            return self.dev_f05(EnsembleSpec([mod]))

        res = train(m, items, self.dev_items(), tcfg, dev_metric=dev_metric, log_path=log_path,
                    metadata={"config_hash": self.hash, "stage": stage, "Lambda": Lambda})
        best = res.checkpoints
        if len(best) < tcfg.keep_best_k:
            logger.warning("only %d checkpoints available for averaging (wanted %d)", len(best), tcfg.keep_best_k)
        avg = average_checkpoints(best)
        final = model_from_checkpoint(avg)
        if self.workdir is not None:
            save_checkpoint(self.workdir / f"model.{_slug(stage)}.seed{seed}.lambda{Lambda:g}.gecf", avg)
        scores = self.evaluate(EnsembleSpec([final])) if evaluate else {}
        return RunResult(stage, seed, scores, final, best, res.log)

    def ensemble_scores(self, models: Sequence[Seq2SeqModel], stage: str) -> tuple[dict, dict | None, float | None]:
        spec = EnsembleSpec(list(models))
        ens = self.evaluate(spec)
        d = self.cfg.raw["decode"]
        if not d["lm_fusion"]:
            return ens, None, None
        flags = stage_flags(stage)
        lm = self.language_model(models[0].config, flags["+pretrain-emb"])
        alpha = d["alpha"]
        if alpha == "tune":
            dev_srcs = [self.encode(e.src) for e in self.data.dev]

            def metric(out):
                hyps = [self.decode_ids(o) for o in out]
                return self.score(self.data.dev, hyps, "dev", with_gleu=False)["dev_f05"]

            alpha = tune_alpha(spec, lm, dev_srcs, metric, beam_size=d["beam"]).alpha
        fused = self.evaluate(EnsembleSpec(list(models), lm, float(alpha)))
        return ens, fused, float(alpha)


def _slug(stage: str) -> str:
    return stage.replace("+", "plus-")


# ---------------------------------------------------------------------------
# full pipeline and report
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, workdir: str | Path | None = None) -> dict:
    """Every requested stage for every seed, then the ensemble and ensemble+LM."""
    exp = Experiment(cfg, workdir)
    results: dict = {"config_hash": exp.hash, "seeds": cfg.seeds, "stages": {}}
    for stage in cfg.stages:
        runs = [exp.train_run(stage, s) for s in cfg.seeds]
        per_run = [r.metrics for r in runs]
        keys = list(per_run[0])
        entry = {
            "runs": per_run,
            "mean": {k: float(np.mean([r[k] for r in per_run])) for k in keys},
        }
        if len(runs) > 1:
            ens, fused, alpha = exp.ensemble_scores([r.model for r in runs], stage)
            entry["ensemble"] = ens
            entry["ensemble_lm"] = fused
            entry["alpha"] = alpha
        results["stages"][stage] = entry
        logger.info("%s: mean %s", stage, entry["mean"])
    if exp.workdir is not None:
        with open(exp.workdir / "scores.json", "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
        with open(exp.workdir / "report.tsv", "w", encoding="utf-8") as fh:
            fh.write(report_tsv(results, cfg.raw["eval"]["report_metric"]))
    return results


def report_rows(results: dict, metric: str = "test_f05") -> list[list[str]]:
    seeds = results["seeds"]
    header = ["stage"] + [f"run{i + 1}" for i in range(len(seeds))] + ["mean", "ensemble", "ensemble+LM"]
    rows = [header]

    def fmt(x):
        return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"

    for stage in STAGES:
        if stage not in results["stages"]:
            continue
        e = results["stages"][stage]
        if metric not in e["runs"][0]:
            raise ConfigError(f"unknown metric {metric!r}")
        vals = [r[metric] for r in e["runs"]]
        ens = e.get("ensemble") or {}
        fused = e.get("ensemble_lm") or {}
        rows.append([stage] + [fmt(v) for v in vals]
                    + [fmt(float(np.mean(vals))), fmt(ens.get(metric)), fmt(fused.get(metric))])
    return rows


def report_tsv(results: dict, metric: str = "test_f05") -> str:
    return "".join("\t".join(r) + "\n" for r in report_rows(results, metric))
