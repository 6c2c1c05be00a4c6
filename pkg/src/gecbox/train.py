"""Losses, Adam, early stopping, checkpoints and the training loop."""
from __future__ import annotations

import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .corpus import make_batches
from .model import Batch, DecoderLm, ModelConfig, embedding_param, make_batch

logger = logging.getLogger(__name__)

DEFAULT_LR = 0.0003
DEFAULT_WARMUP = 16_000
DEFAULT_PATIENCE = 10
DEFAULT_CHECKPOINT_EVERY = 500
DEFAULT_KEEP_BEST = 8
DEFAULT_LM_EPOCHS = 2
CHECKPOINT_MAGIC = b"GECF"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossResult:
    total: float
    n_tokens: int
    per_token_nll: np.ndarray

    @property
    def per_token(self) -> float:
        return self.total / max(1, self.n_tokens)


def _run_loss(model, batch: Batch, backward: bool, training: bool, step: int) -> LossResult:
    if backward:
        model.params.zero_grad()
        loss, nll = model.loss(batch, training, step)
        loss.backward()
    else:
        with ad.no_grad():
            loss, nll = model.loss(batch, training, step)
    return LossResult(float(loss.data), batch.n_tokens, nll)


def mle_loss(model, batch: Batch, backward: bool = True, training: bool = False, step: int = 0) -> LossResult:
    """Summed token NLL with every weight equal to one; gradients land in ``model.params``."""
    plain = Batch(batch.src, batch.src_mask, batch.trg_in, batch.trg_out, batch.trg_mask,
                  batch.trg_mask.copy())
    return _run_loss(model, plain, backward, training, step)


def weight_matrix(batch: Batch, weights: Sequence[Sequence[float]]) -> np.ndarray:
    """Per-token weights padded to the batch, with weight 1 on the end symbol."""
    lengths = batch.trg_mask.sum(axis=1).astype(int) - 1
    if len(weights) != len(lengths):
        raise TrainingError(f"{len(weights)} weight vectors for a batch of {len(lengths)}")
    w = batch.trg_mask.copy()
    for i, (lam, n) in enumerate(zip(weights, lengths)):
        if len(lam) != n:
            raise TrainingError(f"sentence {i}: {len(lam)} edit weights for {n} target tokens")
        w[i, :n] = lam
    return w


def edit_weighted_mle_loss(model, batch: Batch, weights: Sequence[Sequence[float]] | None = None,
                           backward: bool = True, training: bool = False, step: int = 0) -> LossResult:
    """Each target token's NLL scaled by its edit weight before summation.

    ``weights`` defaults to the ones stored in the batch.
    """
    w = batch.weights if weights is None else weight_matrix(batch, weights).astype(batch.weights.dtype)
    weighted = Batch(batch.src, batch.src_mask, batch.trg_in, batch.trg_out, batch.trg_mask, w)
    return _run_loss(model, weighted, backward, training, step)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def learning_rate(step: int, base: float = DEFAULT_LR, schedule: str = "constant",
                  warmup_steps: int = DEFAULT_WARMUP) -> float:
    """lr at 1-based ``step``; warmup_invsqrt is base * min(step/w, sqrt(w/step))."""
    if schedule == "constant":
        return base
    if schedule == "warmup_invsqrt":
        step = max(step, 1)
        return base * min(step / warmup_steps, math.sqrt(warmup_steps / step))
    raise TrainingError(f"unknown schedule {schedule!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; params without a gradient are skipped."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise TrainingError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def clip_gradients(ps: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    grads = [t for _, t in ps.items() if t.grad is not None]
    total = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for t in grads))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for t in grads:
            # gradients may alias arrays owned by other nodes; never scale in place
            t.grad = t.grad * s
    return total


# ---------------------------------------------------------------------------
# early stopping and checkpoint retention
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Stops after ``patience`` consecutive validations without a new minimum."""

    def __init__(self, patience: int = DEFAULT_PATIENCE):
        if patience < 1:
            raise TrainingError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.bad = 0
        self.validations = 0

    def update(self, dev_loss: float) -> bool:
        """Record one validation; True means stop now."""
        self.validations += 1
        if dev_loss < self.best:
            self.best = dev_loss
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


class CheckpointKeeper:
    """Best ``k`` checkpoints by dev metric (higher is better, earlier wins ties)."""

    def __init__(self, k: int = DEFAULT_KEEP_BEST):
        if k < 1:
            raise TrainingError("keep_best_k must be >= 1")
        self.k = k
        self.kept: list[tuple[float, int, Checkpoint]] = []

    def offer(self, metric: float, step: int, ckpt: Checkpoint) -> None:
        self.kept.append((metric, step, ckpt))
        self.kept.sort(key=lambda x: (-x[0], x[1]))
        del self.kept[self.k:]

    def best(self) -> list[Checkpoint]:
        return [c for _, _, c in self.kept]


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def write_checkpoint(fh, ckpt: Checkpoint) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<Q", len(meta)))
    fh.write(meta)


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint file")
    return b


def read_checkpoint(fh) -> Checkpoint:
    if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, n).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    (n,) = struct.unpack("<Q", _read_exact(fh, 8))
    meta = json.loads(_read_exact(fh, n).decode("utf-8"))
    return Checkpoint(tensors, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, ckpt)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            return read_checkpoint(fh)
    except FileNotFoundError:
        raise CheckpointError(f"no such checkpoint: {path}") from None


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, ckpt)
    return buf.getvalue()


def average_checkpoints(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Element-wise mean; all checkpoints must share names and shapes."""
    if not ckpts:
        raise CheckpointError("nothing to average")
    names = set(ckpts[0].tensors)
    for c in ckpts[1:]:
        if set(c.tensors) != names:
            raise CheckpointError("checkpoints have different parameter names")
        for n in names:
            if c.tensors[n].shape != ckpts[0].tensors[n].shape:
                raise CheckpointError(f"{n}: shape mismatch between checkpoints")
    out = {}
    for n in sorted(names):
        acc = np.zeros(ckpts[0].tensors[n].shape, dtype=np.float64)
        for c in ckpts:
            acc += c.tensors[n]
        out[n] = (acc / len(ckpts)).astype(ckpts[0].tensors[n].dtype)
    meta = dict(ckpts[0].metadata)
    meta["averaged_from"] = [c.metadata.get("step") for c in ckpts]
    return Checkpoint(out, meta)


def model_checkpoint(model, **metadata) -> Checkpoint:
    meta = {"config": model.config.to_dict(), "kind": type(model).__name__}
    meta.update(metadata)
    return Checkpoint(model.params.state_dict(), meta)


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32):
    from .model import Seq2SeqModel
    kind = ckpt.metadata.get("kind", "Seq2SeqModel")
    config = ModelConfig(**ckpt.metadata["config"])
    cls = {"Seq2SeqModel": Seq2SeqModel, "DecoderLm": DecoderLm}.get(kind)
    if cls is None:
        raise CheckpointError(f"unknown model kind {kind!r}")
    model = cls(config, seed=int(ckpt.metadata.get("seed", 0)), dtype=dtype)
    try:
        model.params.load_state_dict(ckpt.tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not fit a {kind}: {exc}") from None
    return model


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = DEFAULT_LR
    schedule: str = "constant"
    warmup_steps: int = DEFAULT_WARMUP
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = DEFAULT_PATIENCE
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY
    keep_best_k: int = DEFAULT_KEEP_BEST
    Lambda: float = 1.0
    seed: int = 0
    batch_size: int = 64
    max_epochs: int = 10
    max_steps: int | None = None
    max_seconds: float | None = None
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.patience < 1 or self.keep_best_k < 1 or self.warmup_steps < 1:
            raise TrainingError("patience, keep_best_k and warmup_steps must be >= 1")
        if self.schedule not in ("constant", "warmup_invsqrt"):
            raise TrainingError(f"unknown schedule {self.schedule!r}")
        if self.checkpoint_every < 1 or self.batch_size < 1:
            raise TrainingError("checkpoint_every and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainItem:
    """Id-level training pair; ``weights`` are per-target-token edit weights."""
    src: list[int]
    trg: list[int]
    weights: list[float] | None = None


@dataclass
class LogRow:
    step: int
    lr: float
    train_loss: float
    dev_loss: float
    dev_metric: float


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    log: list[LogRow]
    steps: int
    stopped_early: bool
    validations: int


def items_to_batch(items: Sequence[TrainItem], dtype, weighted: bool) -> Batch:
    src = [it.src for it in items] if items[0].src is not None else None
    weights = [it.weights for it in items] if weighted and items[0].weights is not None else None
    return make_batch(src, [it.trg for it in items], weights, dtype)


def dev_loss(model, dev: Sequence[TrainItem], batch_size: int = 64) -> float:
    total = tokens = 0
    for lo in range(0, len(dev), batch_size):
        batch = items_to_batch(dev[lo:lo + batch_size], model.dtype, weighted=False)
        r = mle_loss(model, batch, backward=False)
        total += r.total
        tokens += r.n_tokens
    return total / max(1, tokens)


def _item_length(it: TrainItem) -> int:
    return max(len(it.src) if it.src is not None else 0, len(it.trg))


def train(model, data: Sequence[TrainItem], dev: Sequence[TrainItem], config: TrainConfig,
          dev_metric: Callable | None = None, log_path: str | Path | None = None,
          metadata: dict | None = None) -> TrainResult:
    """Adam training with periodic validation.

    Early stopping watches dev cross-entropy; checkpoints are ranked by
    ``dev_metric(model)`` (higher is better; negative dev loss when absent).
    Edit weights are used when ``config.Lambda != 1`` and items carry them.
    """
    if not dev:
        raise TrainingError("dev set must be non-empty")
    if not data:
        raise TrainingError("training set is empty")
    cfg = config
    weighted = cfg.Lambda != 1.0
    stopper = EarlyStopper(cfg.patience)
    keeper = CheckpointKeeper(cfg.keep_best_k)
    state = AdamState()
    log: list[LogRow] = []
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a", encoding="utf-8")
        if log_fh.tell() == 0:
            log_fh.write("step\tlr\ttrain_loss\tdev_loss\tdev_metric\n")
    step = 0
    stopped = False
    run_loss = run_tokens = 0.0
    t0 = time.monotonic()
    out_of_budget = False

    def validate():
        nonlocal run_loss, run_tokens
        dl = dev_loss(model, dev)
        metric = dev_metric(model) if dev_metric is not None else -dl
        lr = learning_rate(max(step, 1), cfg.lr, cfg.schedule, cfg.warmup_steps)
        row = LogRow(step, lr, run_loss / max(1.0, run_tokens), dl, float(metric))
        log.append(row)
        if log_fh is not None:
            log_fh.write(f"{row.step}\t{row.lr:.6g}\t{row.train_loss:.6f}\t{row.dev_loss:.6f}\t{row.dev_metric:.6f}\n")
            log_fh.flush()
        run_loss = run_tokens = 0.0
        meta = {"step": step, "dev_loss": dl, "dev_metric": float(metric), "seed": model.seed}
        meta.update(metadata or {})
        keeper.offer(float(metric), step, model_checkpoint(model, **meta))
        logger.info("step %d dev_loss %.4f dev_metric %.4f", step, dl, metric)
        return stopper.update(dl)

    try:
        for epoch in range(cfg.max_epochs):
            batches = make_batches(list(data), batch_size=cfg.batch_size, seed=cfg.seed,
                                   epoch=epoch, length=_item_length)
            for items in batches:
                step += 1
                batch = items_to_batch(items, model.dtype, weighted)
                r = _run_loss(model, batch, backward=True, training=True, step=step)
                if not math.isfinite(r.total):
                    raise TrainingError(f"non-finite loss {r.total} at step {step} (epoch {epoch})")
                clip_gradients(model.params, cfg.clip_norm)
                lr = learning_rate(step, cfg.lr, cfg.schedule, cfg.warmup_steps)
                ps = model.params
                adam_step({n: t.data for n, t in ps.items()}, {n: t.grad for n, t in ps.items()},
                          state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                run_loss += float(r.per_token_nll.sum())
                run_tokens += r.n_tokens
                if step % cfg.checkpoint_every == 0:
                    if validate():
                        stopped = True
                        break
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                if cfg.max_seconds is not None and time.monotonic() - t0 > cfg.max_seconds:
                    out_of_budget = True
                    break
            if stopped or out_of_budget or (cfg.max_steps is not None and step >= cfg.max_steps):
                break
        if not stopped and (not log or log[-1].step != step):
            validate()
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(keeper.best(), log, step, stopped, stopper.validations)


def pretrain_decoder_lm(corpus: Sequence[Sequence[int]], config: ModelConfig,
                        epochs: int = DEFAULT_LM_EPOCHS, seed: int = 0, lr: float = 1e-3,
                        batch_size: int = 64, dtype=np.float32,
                        init_embeddings: np.ndarray | None = None) -> tuple[DecoderLm, list[float]]:
    """Next-token MLE for the decoder-only LM; returns the model and per-batch perplexities.

    ``init_embeddings`` (V, emb_dim) seeds every embedding matrix of the LM.
    """
    if epochs < 1:
        raise TrainingError("epochs must be >= 1")
    lm = DecoderLm(config, seed=seed, dtype=dtype)
    if init_embeddings is not None:
        for name in embedding_param(config):
            if name in lm.params:
                lm.params[name].data = np.array(init_embeddings, dtype=lm.dtype)
    items = [TrainItem(None, list(s)) for s in corpus if len(s) > 0]
    if not items:
        raise TrainingError("empty language-model corpus")
    state = AdamState()
    ppl = []
    step = 0
    for epoch in range(epochs):
        for chunk in make_batches(items, batch_size=batch_size, seed=seed, epoch=epoch,
                                  length=lambda it: len(it.trg)):
            step += 1
            batch = make_batch(None, [it.trg for it in chunk], dtype=dtype)
            r = _run_loss(lm, batch, backward=True, training=True, step=step)
            if not math.isfinite(r.total):
                raise TrainingError(f"non-finite LM loss at step {step}")
            clip_gradients(lm.params, 1.0)
            adam_step({n: t.data for n, t in lm.params.items()},
                      {n: t.grad for n, t in lm.params.items()}, state, lr)
            ppl.append(math.exp(r.per_token))
    return lm, ppl


# ---------------------------------------------------------------------------
# multiple seeds
# ---------------------------------------------------------------------------

@dataclass
class MultiSeedResult:
    seeds: list[int]
    per_run: list[dict[str, float]]
    mean: dict[str, float]
    ensemble: dict[str, float] | None

    def table(self) -> list[list[str]]:
        """Rows: one per run, then mean and ensemble; columns are the metric names."""
        keys = list(self.per_run[0])
        rows = [["run"] + keys]
        for seed, r in zip(self.seeds, self.per_run):
            rows.append([f"seed={seed}"] + [f"{r[k]:.4f}" for k in keys])
        rows.append(["mean"] + [f"{self.mean[k]:.4f}" for k in keys])
        if self.ensemble is not None:
            rows.append(["ensemble"] + [f"{self.ensemble.get(k, float('nan')):.4f}" for k in keys])
        return rows


def multi_seed_experiment(run_fn: Callable[[int], tuple[dict[str, float], object]], n_runs: int = 4,
                          seeds: Sequence[int] | None = None,
                          ensemble_fn: Callable[[list], dict[str, float]] | None = None) -> MultiSeedResult:
    """Train ``n_runs`` models via ``run_fn(seed) -> (metrics, model)`` and score their ensemble."""
    if n_runs < 2:
        raise TrainingError("n_runs must be >= 2")
    seeds = list(seeds) if seeds is not None else list(range(1, n_runs + 1))
    if len(seeds) != n_runs:
        raise TrainingError(f"{len(seeds)} seeds given for {n_runs} runs")
    per_run, models = [], []
    for s in seeds:
        metrics, model = run_fn(s)
        per_run.append(dict(metrics))
        models.append(model)
    mean = {k: float(np.mean([r[k] for r in per_run])) for k in per_run[0]}
    ensemble = ensemble_fn(models) if ensemble_fn is not None else None
    return MultiSeedResult(seeds, per_run, mean, ensemble)
