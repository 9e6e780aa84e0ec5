"""Preference-alignment training loop.

The reference policy is snapshotted once, before the first update, and its
log-probabilities for every pair are cached. Updates use AdamW with a
linear-warmup cosine schedule. Batches are drawn from a seeded permutation
of the dataset; when it runs out a fresh permutation fills the batch, so
every batch is full.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, FormatError, ValidationError
from .losses import LossConfig, batch_loss
from .rng import derive_seed
from .spans import dataset_hash, validate
from .toylm import ToyLM, ToyModelConfig, batch_logprobs, snapshot

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    lr_max: float = 1e-3
    schedule: str = "cosine"
    warmup_ratio: float = 0.0
    steps: int = 100
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr_max < 0:
            raise ConfigurationError("lr_max must be non-negative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigurationError("warmup_ratio must lie in [0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError("schedule must be 'cosine' or 'constant'")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["optimizer"] = {"name": "AdamW", "beta1": ADAM_BETA1, "beta2": ADAM_BETA2,
                          "eps": ADAM_EPS}
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "optimizer"}
        d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss: float
    rank_term: float
    tkl_term: float
    total_margin: float
    grad_norm: float
    update_norm: float

    FIELDS = ("step", "lr", "loss", "rank_term", "tkl_term", "total_margin",
              "grad_norm", "update_norm")

    def row(self):
        return [self.step] + [repr(float(getattr(self, f))) for f in self.FIELDS[1:]]


def lr_at(step, cfg):
    """Learning rate for 1-based update ``step``.

    Linear warmup to ``lr_max`` over ``floor(warmup_ratio * steps)`` updates,
    then ``lr_max * 0.5 * (1 + cos(pi * progress))`` with progress running
    from 0 at the end of warmup to 1 at the final step.
    """
    if cfg.schedule == "constant":
        return cfg.lr_max
    warm = int(cfg.warmup_ratio * cfg.steps)
    if warm and step <= warm:
        return cfg.lr_max * step / warm
    progress = (step - warm) / max(1, cfg.steps - warm)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over a flat parameter vector."""

    def __init__(self, n, weight_decay=0.0):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.weight_decay = weight_decay

    def update(self, theta, grad, lr):
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1 - ADAM_BETA2) * grad * grad
        m_hat = self.m / (1 - ADAM_BETA1 ** self.t)
        v_hat = self.v / (1 - ADAM_BETA2 ** self.t)
        return theta - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + self.weight_decay * theta)


def _reference_logprobs(reference, pairs, chunk=32):
    cache = {}
    for i in range(0, len(pairs), chunk):
        part = pairs[i:i + chunk]
        items = [(p.prompt, p.preferred) for p in part] + [(p.prompt, p.non_preferred) for p in part]
        lps = batch_logprobs(reference, items)
        for j, p in enumerate(part):
            cache[p.id] = (lps[j], lps[len(part) + j])
    return cache


def check_dataset(pairs, method):
    if not pairs:
        raise ValidationError("dataset is empty")
    for p in pairs:
        problems = validate(p, method)
        if problems:
            raise ValidationError(f"pair {p.id!r} is invalid for {method}: " + "; ".join(problems),
                                  problems, pair_id=p.id)
    if len({p.id for p in pairs}) != len(pairs):
        raise ValidationError("pair ids must be unique")


class Trainer:
    """Stateful optimisation loop; see :func:`train` for the one-call form."""

    def __init__(self, model, dataset, cfg, reference=None):
        check_dataset(dataset, cfg.loss.method)
        self.model = model
        self.dataset = list(dataset)
        self.cfg = cfg
        self.reference = reference if reference is not None else snapshot(model)
        self.optimizer = AdamW(model.n_params, cfg.weight_decay)
        self.step_count = 0
        self.rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
        self._order = []
        self._cursor = 0
        self.metrics = []
        self._ref_cache = _reference_logprobs(self.reference, self.dataset)
        self.data_hash = dataset_hash(self.dataset)

    @property
    def done(self):
        return self.step_count >= self.cfg.steps

    def _next_batch(self):
        out = []
        while len(out) < self.cfg.batch_size:
            if self._cursor >= len(self._order):
                self._order = self.rng.permutation(len(self.dataset)).tolist()
                self._cursor = 0
            take = min(self.cfg.batch_size - len(out), len(self._order) - self._cursor)
            out += self._order[self._cursor:self._cursor + take]
            self._cursor += take
            if len(self.dataset) < self.cfg.batch_size and len(out) >= len(self.dataset):
                break
        return [self.dataset[i] for i in out]

    def loss_on(self, pairs):
        """Differentiable mean loss and breakdowns of the current policy on ``pairs``."""
        items = [(p.prompt, p.preferred) for p in pairs] + [(p.prompt, p.non_preferred) for p in pairs]
        lps = batch_logprobs(self.model, items)
        n = len(pairs)
        refs = [self._ref_cache[p.id] for p in pairs]
        return batch_loss(self.cfg.loss, pairs, lps[:n], lps[n:],
                          [r[0] for r in refs], [r[1] for r in refs])

    def step(self):
        if self.done:
            raise ConfigurationError("training already finished")
        s = self.step_count + 1
        lr = lr_at(s, self.cfg)
        batch = self._next_batch()
        loss, parts = self.loss_on(batch)
        ad.backward(loss)
        grad = self.model.grad_flat()
        grad_norm = float(np.linalg.norm(grad))
        if self.cfg.clip_norm is not None and grad_norm > self.cfg.clip_norm:
            grad = grad * (self.cfg.clip_norm / grad_norm)
        theta = self.model.get_flat()
        new = self.optimizer.update(theta, grad, lr)
        self.model.set_flat(new)
        self.step_count = s
        m = StepMetrics(
            step=s, lr=lr, loss=loss.item(),
            rank_term=float(np.mean([b.rank_term for b in parts])),
            tkl_term=float(np.mean([b.tkl_term for b in parts])),
            total_margin=float(np.mean([b.total_margin for b in parts])),
            grad_norm=grad_norm,
            update_norm=float(np.linalg.norm(new - theta)),
        )
        self.metrics.append(m)
        return m

    def run(self, n_steps=None, metrics_path=None):
        """Train until done (or for ``n_steps`` more updates)."""
        target = self.cfg.steps if n_steps is None else min(self.cfg.steps, self.step_count + n_steps)
        new = []
        while self.step_count < target:
            new.append(self.step())
        if metrics_path is not None:
            write_metrics(self.metrics, metrics_path)
        return new

    def mean_loss(self, pairs=None):
        """Mean loss over ``pairs`` (default: the training set), no update."""
        pairs = self.dataset if pairs is None else pairs
        total = 0.0
        for i in range(0, len(pairs), 32):
            chunk = pairs[i:i + 32]
            total += self.loss_on(chunk)[0].item() * len(chunk)
        return total / len(pairs)

    # ---------------------------------------------------------- checkpoints
    def save(self, path):
        write_checkpoint(self, path)

    @classmethod
    def resume(cls, path, dataset):
        return read_checkpoint(path, dataset)


def train(model, dataset, cfg, reference=None, metrics_path=None):
    """Align ``model`` in place; returns ``(model, metrics)``."""
    tr = Trainer(model, dataset, cfg, reference)
    tr.run(metrics_path=metrics_path)
    return model, tr.metrics


def resume(checkpoint, dataset):
    """Rebuild a :class:`Trainer` from a checkpoint file written by this version."""
    return read_checkpoint(checkpoint, dataset)


# ------------------------------------------------------------ file formats

CKPT_MAGIC = b"RRPOCKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sII")


def write_checkpoint(tr, path):
    header = {
        "version": CKPT_VERSION,
        "train_config": tr.cfg.to_dict(),
        "model_config": dataclasses.asdict(tr.model.config),
        "step": tr.step_count,
        "adam_t": tr.optimizer.t,
        "dataset_hash": tr.data_hash,
        "rng_state": tr.rng.bit_generator.state,
        "order": tr._order,
        "cursor": tr._cursor,
        "n_params": tr.model.n_params,
        "metrics": [dataclasses.asdict(m) for m in tr.metrics],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = np.concatenate([tr.model.get_flat(), tr.optimizer.m, tr.optimizer.v,
                             tr.reference.get_flat()])
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(arrays.astype("<f8").tobytes())


def _parse_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError("checkpoint truncated")
    magic, version, n = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError("not a trainer checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    header = json.loads(buf[_CKPT_HEAD.size:_CKPT_HEAD.size + n])
    arrays = np.frombuffer(buf, dtype="<f8", offset=_CKPT_HEAD.size + n)
    k = header["n_params"]
    if arrays.size != 4 * k:
        raise FormatError("checkpoint array section has the wrong size")
    return header, arrays


def is_checkpoint(path):
    with open(path, "rb") as fh:
        return fh.read(len(CKPT_MAGIC)) == CKPT_MAGIC


def load_checkpoint_model(path):
    """The trained policy stored in a checkpoint, without its optimiser state."""
    header, arrays = _parse_checkpoint(path)
    model = ToyLM(ToyModelConfig(**header["model_config"]))
    model.set_flat(arrays[:header["n_params"]])
    return model


def read_checkpoint(path, dataset):
    header, arrays = _parse_checkpoint(path)
    k = header["n_params"]
    dataset = list(dataset)
    if dataset_hash(dataset) != header["dataset_hash"]:
        raise FormatError("dataset hash differs from the one recorded in the checkpoint")
    mcfg = ToyModelConfig(**header["model_config"])
    model = ToyLM(mcfg)
    model.set_flat(arrays[:k])
    ref_model = ToyLM(mcfg)
    ref_model.set_flat(arrays[3 * k:])
    cfg = TrainConfig.from_dict(header["train_config"])
    tr = Trainer(model, dataset, cfg, reference=snapshot(ref_model))
    tr.optimizer.m = arrays[k:2 * k].copy()
    tr.optimizer.v = arrays[2 * k:3 * k].copy()
    tr.optimizer.t = header["adam_t"]
    tr.step_count = header["step"]
    tr.rng.bit_generator.state = header["rng_state"]
    tr._order = header["order"]
    tr._cursor = header["cursor"]
    tr.metrics = [StepMetrics(**m) for m in header["metrics"]]
    return tr


def write_metrics(metrics, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(StepMetrics.FIELDS)
        for m in metrics:
            w.writerow(m.row())


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [StepMetrics(int(r["step"]), *(float(r[f]) for f in StepMetrics.FIELDS[1:])) for r in rows]


# ------------------------------------------------------------------- SFT


def pretrain(model, tasks, steps=300, lr=3e-3, batch_size=16, seed=0, weight_decay=0.0):
    """Supervised fine-tuning on ground-truth answers of clean-video tasks.

    Produces the base model that alignment starts from. Returns per-step
    mean token cross-entropy.
    """
    cfg = TrainConfig(lr_max=lr, steps=steps, batch_size=batch_size, seed=seed,
                      weight_decay=weight_decay, warmup_ratio=0.05)
    opt = AdamW(model.n_params, weight_decay)
    rng = np.random.default_rng(derive_seed(seed, "sft"))
    history = []
    for s in range(1, steps + 1):
        idx = rng.choice(len(tasks), size=min(batch_size, len(tasks)), replace=False)
        items = [(tasks[i].prompt(), tasks[i].answer) for i in idx]
        lps = batch_logprobs(model, items)
        n_tok = sum(len(a) for _, a in items)
        loss = -ad.sum_(ad.stack([lp.realized.sum() for lp in lps])) * (1.0 / n_tok)
        ad.backward(loss)
        model.set_flat(opt.update(model.get_flat(), model.grad_flat(), lr_at(s, cfg)))
        history.append(loss.item())
    return history


__all__ = ["TrainConfig", "StepMetrics", "Trainer", "AdamW", "lr_at", "train", "resume",
           "pretrain", "write_metrics", "read_metrics", "load_checkpoint_model", "is_checkpoint"]
