"""Optimizer, schedule, pretraining tiers and the two-stage training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import layers as Lyr
from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data import Triple
from .errors import ConfigError, IntegrityError, NumericError
from .model import LSTModel, ParamStore, pad_frames, text_lm_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "stage", "split", "loss", "lr"]
FRONTEND_TIERS = ("ctc", "ssl", "random")
BACKEND_TIERS = ("mt", "lm", "random")


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def decays(name: str, arr: np.ndarray) -> bool:
    """Weight decay applies to matrices only (not biases or norm gains)."""
    return arr.ndim >= 2


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               wd: float = 0.01) -> None:
    """One in-place AdamW update over ``params`` (only the names given are touched)."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise IntegrityError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if wd and decays(name, p):
            p -= p.dtype.type(lr * wd) * p
        m *= p.dtype.type(beta1)
        m += p.dtype.type(1.0 - beta1) * g
        v *= p.dtype.type(beta2)
        v += p.dtype.type(1.0 - beta2) * g * g
        p -= p.dtype.type(lr) * (m / p.dtype.type(bc1)) / (np.sqrt(v / p.dtype.type(bc2)) + p.dtype.type(eps))


def lr_at(step: int, total_steps: int, peak: float, warmup_ratio: float = 0.03,
          floor: float = 0.0) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``floor`` (default 0)."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    w = int(round(warmup_ratio * total_steps))
    if w > 0 and step < w:
        return peak * step / w
    if total_steps == w:
        return peak
    frac = (step - w) / (total_steps - w)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


# -- configuration ----------------------------------------------------------------

@dataclass
class StageConfig:
    stage: int = 1
    data: str = "st"
    epochs: int = 6
    lr: float = 1e-3
    batch_size: int = 64
    warmup_ratio: float = 0.03
    weight_decay: float = 0.01
    eval_interval: int = 50
    save_interval: int = 200
    lr_floor: float = 0.0
    seed: int = 1
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.data not in ("asr", "st"):
            raise ConfigError(f"stage data must be 'asr' or 'st', got {self.data!r}")

    @property
    def frozen_groups(self) -> tuple[str, ...]:
        return ("frontend", "backend") if self.stage == 1 else ("frontend",)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainConfig:
    epochs: int = 4
    lr: float = 1e-3
    batch_size: int = 64
    warmup_ratio: float = 0.03
    weight_decay: float = 0.01
    mask_ratio: float = 0.3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- batching ---------------------------------------------------------------------

def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffled minibatches.

    Batches deliberately mix lengths: length-sorted batches stalled learning
    of the position-dependent reordering in experiments.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xBA7C4]))
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def encode_frontend(model: LSTModel, triples: Sequence[Triple], batch_size: int = 128) -> list[np.ndarray]:
    """Frozen-frontend representations, one (T_i, d_enc) array per example."""
    out: list[np.ndarray | None] = [None] * len(triples)
    order = sorted(range(len(triples)), key=lambda i: (triples[i].duration, i))
    with T.no_grad():
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            h, valid = model.encode_speech([triples[i].speech for i in idx])
            for j, i in enumerate(idx):
                out[i] = h.data[j, : valid[j].sum()].copy()
    return out


@dataclass
class Encoded:
    """Cached frontend outputs paired with label sequences."""

    reps: list[np.ndarray]
    labels: list[list[int]]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.reps)

    def batch(self, idx) -> tuple[T.Tensor, np.ndarray, list[list[int]]]:
        h, valid = pad_frames([self.reps[i] for i in idx], self.reps[0].dtype)
        return T.Tensor(h), valid, [self.labels[i] for i in idx]


def make_encoded(model: LSTModel, triples: Sequence[Triple], mode: str) -> Encoded:
    from .model import labels_for
    return Encoded(encode_frontend(model, triples), [labels_for(t, mode) for t in triples],
                   [t.id for t in triples])


def eval_loss(model: LSTModel, data: Encoded, batch_size: int = 250) -> float:
    """Token-weighted mean loss over a cached split."""
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(data), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(data)))
            h, valid, labels = data.batch(idx)
            n = sum(len(l) + 1 for l in labels)
            total += model.loss_from_representation(h, valid, labels).item() * n
            count += n
    return total / count


# -- stage training -----------------------------------------------------------------

@dataclass
class StageResult:
    final_checkpoint: Path | None
    metrics: list[dict]
    checkpoints: list[Path]
    state: AdamWState


class MetricsLog:
    def __init__(self, path: Path | None):
        self.rows: list[dict] = []
        self.path = path
        if path is not None:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def add(self, step: int, stage: int, split: str, loss: float, lr: float) -> None:
        row = {"step": step, "stage": stage, "split": split, "loss": loss, "lr": lr}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([step, stage, split, repr(float(loss)), repr(float(lr))])


def _optimize(store: ParamStore, loss_fn: Callable[[np.ndarray], T.Tensor], n_examples: int,
              batch_size: int, epochs: int, peak_lr: float, warmup_ratio: float, wd: float,
              seed: int, lr_floor: float = 0.0, max_steps: int | None = None,
              on_step: Callable | None = None) -> AdamWState:
    """Generic minibatch AdamW loop shared by pretraining and stage training."""
    names = store.trainable()
    params = {n: store[n].data for n in names}
    state = AdamWState()
    total = steps_per_epoch(n_examples, batch_size) * epochs
    if max_steps is not None:
        total = min(total, max_steps)
    step = 0
    for epoch in range(epochs):
        for idx in epoch_batches(n_examples, batch_size, seed, epoch):
            if step >= total:
                return state
            step += 1
            T.zero_grad(store.tensors.values())
            loss = loss_fn(idx)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}")
            grads = T.backward(loss, [store[n] for n in names])
            lr = lr_at(step, total, peak_lr, warmup_ratio, lr_floor)
            adamw_step(params, dict(zip(names, grads)), state, lr, wd=wd)
            if on_step is not None:
                on_step(step, total, value, lr, state)
    return state


def train_stage(model: LSTModel, cfg: StageConfig, train: Encoded, dev: Encoded | None = None,
                out_dir=None, tag: str = "stage", meta: dict | None = None) -> StageResult:
    """Train adapter (stage 1) or adapter + backend (stage 2) on cached frontend outputs.

    Frozen groups are excluded from the update set, so their bytes never change.
    """
    store = model.store
    store.freeze(cfg.frozen_groups)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(out_dir / f"{tag}.metrics.csv" if out_dir is not None else None)
    saved: list[Path] = []
    last_good: list[Path | None] = [None]
    window: list[float] = []
    meta = dict(meta or {})
    meta.update({"stage_config": cfg.to_dict(), "model": model.cfg.to_dict()})

    def checkpoint(step, state, name):
        if out_dir is None:
            return None
        ck = Checkpoint.from_store(store, moments={n: (state.m[n], state.v[n]) for n in state.m},
                                   step=step, meta=meta)
        path = save_checkpoint(ck, out_dir / name)
        last_good[0] = path
        return path

    if dev is not None:
        metrics.add(0, cfg.stage, "dev", eval_loss(model, dev), 0.0)

    def on_step(step, total, value, lr, state):
        window.append(value)
        if step % cfg.eval_interval == 0 or step == total:
            metrics.add(step, cfg.stage, "train", float(np.mean(window)), lr)
            window.clear()
            if dev is not None:
                metrics.add(step, cfg.stage, "dev", eval_loss(model, dev), lr)
        if out_dir is not None and step % cfg.save_interval == 0 and step != total:
            saved.append(checkpoint(step, state, f"{tag}.step{step}.ckpt"))

    def loss_fn(idx):
        h, valid, labels = train.batch(idx)
        return model.loss_from_representation(h, valid, labels)

    try:
        state = _optimize(store, loss_fn, len(train), cfg.batch_size, cfg.epochs, cfg.lr,
                          cfg.warmup_ratio, cfg.weight_decay, cfg.seed, cfg.lr_floor,
                          cfg.max_steps, on_step)
    except NumericError as e:
        raise NumericError(f"{e}; last good checkpoint: {last_good[0]}") from None
    final = checkpoint(state.t, state, f"{tag}.final.ckpt")
    return StageResult(final, metrics.rows, saved, state)


# -- pretraining tiers ----------------------------------------------------------------

def ctc_head_init(model: LSTModel, seed: int) -> dict[str, T.Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC7C]))
    d, c = model.cfg.d_enc, model.cfg.n_source + 1
    return {"w": T.param(rng.normal(0, 1 / math.sqrt(d), (d, c)).astype(model.dtype)),
            "b": T.param(np.zeros(c, dtype=model.dtype))}


def ctc_batch_loss(model: LSTModel, head: dict, triples: Sequence[Triple]) -> tuple[T.Tensor, int]:
    """Sum of per-utterance CTC losses divided by the frame count (nats/frame)."""
    v = model.vocab
    h, valid = model.encode_speech([t.speech for t in triples])
    logp = T.log_softmax(T.linear(h, head["w"], head["b"]))
    total = None
    frames = 0
    for b, t in enumerate(triples):
        n = t.duration
        target = [v.source_index(tok) for tok in t.transcription]
        term = Lyr.ctc_loss(T.select(logp, (b, slice(0, n))), target)
        total = term if total is None else T.add(total, term)
        frames += n
    return T.scale(total, 1.0 / frames), frames


def ssl_parts_init(model: LSTModel, seed: int) -> dict[str, T.Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x551]))
    d, f = model.cfg.d_enc, model.cfg.d_frames
    return {"w": T.param(rng.normal(0, 1 / math.sqrt(d), (d, f)).astype(model.dtype)),
            "b": T.param(np.zeros(f, dtype=model.dtype)),
            "mask": T.param(rng.normal(0, 1.0, f).astype(model.dtype))}


def ssl_mask(valid: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Mask round(ratio * T_b) (at least one) random valid frames per row."""
    mask = np.zeros_like(valid)
    for b in range(valid.shape[0]):
        n = int(valid[b].sum())
        k = max(1, int(round(ratio * n)))
        mask[b, rng.choice(n, size=k, replace=False)] = True
    return mask


def ssl_batch_loss(model: LSTModel, parts: dict, triples: Sequence[Triple], ratio: float,
                   rng: np.random.Generator) -> T.Tensor:
    frames, valid = pad_frames([t.speech for t in triples], model.dtype)
    masked = ssl_mask(valid, ratio, rng)
    h = model.frontend_encode(frames, valid, mask_vector=parts["mask"], masked=masked)
    return Lyr.masked_reconstruction_loss(frames, h, masked, parts)


def pretrain_frontend(model: LSTModel, tier: str, cfg: PretrainConfig, asr_train: Sequence[Triple] | None,
                      asr_dev: Sequence[Triple] | None = None) -> dict:
    """Train the frontend group in place; temporary heads are discarded afterwards.

    Returns a summary with the tier and (for ctc) the dev loss in nats/frame.
    """
    if tier not in FRONTEND_TIERS:
        raise ConfigError(f"unknown frontend tier {tier!r}")
    summary: dict = {"tier": tier}
    if tier == "random":
        summary["provenance"] = "init-only"
        return summary
    if not asr_train:
        raise ConfigError(f"frontend tier {tier!r} needs an ASR corpus")
    if tier == "ssl" and not 0.0 < cfg.mask_ratio < 1.0:
        raise ConfigError(f"ssl masking ratio must lie in (0, 1), got {cfg.mask_ratio}")
    store = model.store
    store.freeze(("adapter", "backend"))
    if tier == "ctc":
        head = ctc_head_init(model, cfg.seed)
        loss_fn = lambda idx: ctc_batch_loss(model, head, [asr_train[i] for i in idx])[0]
    else:
        head = ssl_parts_init(model, cfg.seed)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x55]))
        loss_fn = lambda idx: ssl_batch_loss(model, head, [asr_train[i] for i in idx], cfg.mask_ratio, rng)
    for k, t in head.items():
        store.tensors[f"_head.{k}"] = t
        store.groups[f"_head.{k}"] = "frontend"
    try:
        _optimize(store, loss_fn, len(asr_train), cfg.batch_size, cfg.epochs, cfg.lr,
                  cfg.warmup_ratio, cfg.weight_decay, cfg.seed)
        if asr_dev:
            with T.no_grad():
                if tier == "ctc":
                    tot = frames = 0
                    for lo in range(0, len(asr_dev), 100):
                        loss, n = ctc_batch_loss(model, head, asr_dev[lo:lo + 100])
                        tot += loss.item() * n
                        frames += n
                    summary["dev_ctc_per_frame"] = tot / frames
                else:
                    drng = np.random.default_rng(1234)
                    vals = [ssl_batch_loss(model, head, asr_dev[lo:lo + 100], cfg.mask_ratio, drng).item()
                            for lo in range(0, len(asr_dev), 100)]
                    summary["dev_reconstruction"] = float(np.mean(vals))
    finally:
        for k in head:
            del store.tensors[f"_head.{k}"]
            del store.groups[f"_head.{k}"]
        store.freeze(())
    return summary


def mt_sequence(t: Triple, vocab) -> tuple[list[int], int]:
    """[BOS] x [SEP] y [EOS] and the index of the first target token."""
    seq = [vocab.BOS] + list(t.transcription) + [vocab.SEP] + list(t.translation) + [vocab.EOS]
    return seq, len(t.transcription) + 2


def lm_sequence(t: Triple, vocab) -> tuple[list[int], int]:
    return [vocab.BOS] + list(t.translation) + [vocab.EOS], 1


def backend_dev_perplexity(model: LSTModel, dev: Sequence[Triple], tier: str = "mt") -> float:
    """exp(mean NLL) over target-side tokens + EOS of held-out text."""
    make = mt_sequence if tier == "mt" else lm_sequence
    total = count = 0.0
    with T.no_grad():
        for lo in range(0, len(dev), 250):
            rows = [make(t, model.vocab) for t in dev[lo:lo + 250]]
            seqs = [r[0] for r in rows]
            n = sum(len(s) - r[1] for s, r in zip(seqs, rows))
            total += text_lm_loss(model, seqs, [r[1] for r in rows]).item() * n
            count += n
    return math.exp(total / count)


def pretrain_backend(model: LSTModel, tier: str, cfg: PretrainConfig, text_train: Sequence[Triple] | None,
                     text_dev: Sequence[Triple] | None = None) -> dict:
    """Causal-LM pretraining of the backend group in place."""
    if tier not in BACKEND_TIERS:
        raise ConfigError(f"unknown backend tier {tier!r}")
    summary: dict = {"tier": tier}
    if tier == "random":
        summary["provenance"] = "init-only"
        return summary
    if not text_train:
        raise ConfigError(f"backend tier {tier!r} needs a text corpus")
    v = model.vocab
    for t in text_train[:50]:
        if any(not 0 <= tok < v.size for tok in list(t.transcription) + list(t.translation or [])):
            raise ConfigError("text corpus uses ids outside the model vocabulary")
    make = mt_sequence if tier == "mt" else lm_sequence
    seqs = [make(t, v)[0] for t in text_train]
    store = model.store
    store.freeze(("frontend", "adapter"))
    try:
        _optimize(store, lambda idx: text_lm_loss(model, [seqs[i] for i in idx]), len(seqs),
                  cfg.batch_size, cfg.epochs, cfg.lr, cfg.warmup_ratio, cfg.weight_decay, cfg.seed)
    finally:
        store.freeze(())
    if text_dev:
        summary["dev_perplexity"] = backend_dev_perplexity(model, text_dev, tier)
    return summary
