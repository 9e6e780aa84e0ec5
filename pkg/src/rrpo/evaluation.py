"""Held-out accuracy, divergence from the base model and the hacking probe."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .datagen import verify
from .errors import EvaluationError, ShapeError
from .toylm import ToyLM, batch_logprobs, greedy_decode

N_PROBES = 64


@dataclass
class EvalReport:
    method: str
    accuracy: float
    mean_seq_kl: float
    pref_loglik_drop: float
    n_tasks: int = 0
    n_probes: int = 0

    def to_record(self):
        return json.dumps(asdict(self), sort_keys=True)


def _answer(model, task):
    if isinstance(model, ToyLM):
        return greedy_decode(model, task.prompt(), max_len=len(task.answer) + 2)
    return model(task, task.video)


def accuracy(model, tasks, exclude_ids=()):
    """Fraction of ``tasks`` answered correctly.

    ``model`` is a :class:`ToyLM` (greedy decoding) or any callable
    ``(task, video) -> tokens``. ``exclude_ids`` are ids seen in training;
    any overlap with ``tasks`` is refused.
    """
    tasks = list(tasks)
    if not tasks:
        raise EvaluationError("no tasks to evaluate")
    overlap = {t.id for t in tasks} & set(exclude_ids)
    if overlap:
        raise EvaluationError(f"{len(overlap)} evaluation task(s) also used in training, "
                              f"e.g. {sorted(overlap)[0]!r}")
    correct = sum(verify(t, _answer(model, t)) == "correct" for t in tasks)
    return correct / len(tasks)


def make_probes(tasks, n=N_PROBES):
    """(prompt, reference answer) probes from the first ``n`` tasks."""
    return [(t.prompt(), list(t.answer)) for t in list(tasks)[:n]]


def seq_kl(base_logp, aligned_logp):
    """Sum over positions of KL(base || aligned); inputs are (T, V) log-probs."""
    b = np.asarray(base_logp, dtype=np.float64)
    a = np.asarray(aligned_logp, dtype=np.float64)
    if b.shape != a.shape:
        raise ShapeError(f"distribution shapes differ: {b.shape} vs {a.shape}")
    return float(np.sum(np.exp(b) * (b - a)))


def divergence_from_dists(base_dists, aligned_dists):
    if len(base_dists) != len(aligned_dists):
        raise ShapeError("probe counts differ")
    if not base_dists:
        raise EvaluationError("no probes")
    return float(np.mean([seq_kl(b, a) for b, a in zip(base_dists, aligned_dists)]))


def _dists(model, probes):
    out = []
    for i in range(0, len(probes), 32):
        out += [np.asarray(lp.full_dist.data if hasattr(lp.full_dist, "data") else lp.full_dist)
                for lp in batch_logprobs(model, probes[i:i + 32])]
    return out


def divergence(aligned, base, probes):
    """Mean over probes of the summed token-wise KL(base || aligned)."""
    if aligned.config.vocab_size != base.config.vocab_size:
        raise ShapeError(f"vocab sizes differ: {aligned.config.vocab_size} vs "
                         f"{base.config.vocab_size}")
    return divergence_from_dists(_dists(base, probes), _dists(aligned, probes))


def pref_loglik(model, pairs):
    """Per-pair log pi(y+ | x)."""
    items = [(p.prompt, p.preferred) for p in pairs]
    out = []
    for i in range(0, len(items), 32):
        for lp in batch_logprobs(model, items[i:i + 32]):
            r = lp.realized
            out.append(float(np.sum(r.data if hasattr(r, "data") else r)))
    return np.asarray(out)


def pref_loglik_drop(model, base, pairs):
    """Mean decrease of log pi(y+ | x) relative to ``base`` (positive = lower)."""
    if not pairs:
        raise EvaluationError("no pairs")
    return float(np.mean(pref_loglik(base, pairs) - pref_loglik(model, pairs)))


def evaluate(model, base, tasks, probes, pairs, method="", exclude_ids=()):
    return EvalReport(method=method,
                      accuracy=accuracy(model, tasks, exclude_ids),
                      mean_seq_kl=divergence(model, base, probes),
                      pref_loglik_drop=pref_loglik_drop(model, base, pairs),
                      n_tasks=len(tasks), n_probes=len(probes))


def write_comparison(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "accuracy", "mean_seq_kl", "pref_loglik_drop"])
        for r in reports:
            w.writerow([r.method, repr(r.accuracy), repr(r.mean_seq_kl), repr(r.pref_loglik_drop)])


@dataclass
class HackingReport:
    drop_rank_only: float
    drop_full: float
    tkl_rank_only: float
    tkl_full: float

    @property
    def rank_only_drops_more(self):
        return self.drop_rank_only > self.drop_full


def _mean_tkl(model, base, pairs):
    probes = [(p.prompt, p.preferred) for p in pairs]
    return divergence_from_dists(_dists(base, probes), _dists(model, probes))


def hacking_probe(aligned_rank_only, aligned_full, base, held_out_pairs):
    """Compare how far each model lowers log pi(y+ | x) and how far it drifts on y+."""
    pairs = list(held_out_pairs)
    return HackingReport(
        drop_rank_only=pref_loglik_drop(aligned_rank_only, base, pairs),
        drop_full=pref_loglik_drop(aligned_full, base, pairs),
        tkl_rank_only=_mean_tkl(aligned_rank_only, base, pairs),
        tkl_full=_mean_tkl(aligned_full, base, pairs),
    )


# ------------------------------------------------------------ significance


class Significance(NamedTuple):
    se: float
    delta: float
    adjusted_delta: float
    significant: bool


def adjusted_delta(score1, score2, n):
    """Margin of ``score1`` over ``score2`` after subtracting 1.96 standard errors.

    ``SE = sqrt(score1 * (1 - score2) / n)``, taken as written: the variance
    term mixes the two scores and is not the pooled-proportion SE.
    Significant only when the adjusted margin is strictly positive.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    for s in (score1, score2):
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"score {s} outside [0, 1]")
    se = math.sqrt(score1 * (1.0 - score2) / n)
    delta = score1 - score2
    adj = delta - 1.96 * se
    return Significance(se, delta, adj, adj > 0)
