"""Numerical checks of the ranking-loss gradient analysis.

Norms are Euclidean over the full flattened parameter vector. ``M`` is
measured per instance as the largest ``||grad log pi(t_j | .)||`` over every
response token, so both bounds are exactly checkable:

    ||grad L_rank|| <= beta * M * sum_i (L+_i + L-_i)
    ||grad L_dpo||  <= beta * M * (|y+| + |y-|)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError
from .losses import dpo_loss, rrpo_loss, rrpo_rank_loss
from .rng import derive_seed
from .spans import PreferencePair, SpanEntry, span_slices, validate
from .toylm import EOS, ToyLM, ToyModelConfig, batch_logprobs, snapshot

# small model used for the Monte-Carlo instances
INSTANCE_MODEL = dict(vocab_size=16, embed_dim=8, context_len=48, depth=1)


# ------------------------------------------------------ finite differences


def rel_error(analytic, numeric, tiny=1e-12):
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|, tiny)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), tiny)
    return float(np.max(np.abs(a - n)) / scale)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` at array ``x`` (``x`` is restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_gradient(fn, *arrays, eps=1e-6):
    """Normwise relative error between autodiff and central differences.

    ``fn`` maps Tensors built from ``arrays`` to a scalar Tensor. The
    gradients of all inputs are compared as one concatenated vector.
    """
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    grads = ad.backward(fn(*leaves))

    def value():
        return fn(*(ad.Tensor(l.data) for l in leaves)).item()

    analytic = [grads.get(l, np.zeros_like(l.data)).ravel() for l in leaves]
    numeric = [numeric_grad(value, l.data, eps).ravel() for l in leaves]
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


# ------------------------------------------------------------- instances


@dataclass
class GradInstance:
    """A policy, a frozen reference and one span-annotated pair."""

    policy: ToyLM
    reference: ToyLM
    pair: PreferencePair
    beta: float = 0.1


def _flat_grad(model, loss):
    ad.backward(loss)
    return model.grad_flat()


def _scores(inst):
    pol = batch_logprobs(inst.policy, [(inst.pair.prompt, inst.pair.preferred),
                                       (inst.pair.prompt, inst.pair.non_preferred)])
    ref = batch_logprobs(inst.reference, [(inst.pair.prompt, inst.pair.preferred),
                                          (inst.pair.prompt, inst.pair.non_preferred)])
    return pol[0], pol[1], ref[0], ref[1]


def _span_sum(realized, slices):
    return ad.sum_(ad.stack([ad.sum_(realized[lo:hi]) for lo, hi in slices]))


def token_gradients(inst):
    """Per-token ``grad log pi(t_j | .)`` for both responses (two lists of arrays)."""
    pp, pn, _, _ = _scores(inst)
    out = []
    for lp in (pp, pn):
        out.append([_flat_grad(inst.policy, lp.realized[j]) for j in range(len(lp))])
    return out


def margin_gradient(inst, validate_pair=True):
    """Autodiff gradient of the refined margin ``u`` w.r.t. all parameters."""
    if validate_pair and validate(inst.pair):
        raise ConfigurationError(f"invalid pair: {validate(inst.pair)}")
    pp, pn, rp, rn = _scores(inst)
    pair = inst.pair
    u = (_span_sum(pp.realized, span_slices(pair, "preferred"))
         - _span_sum(pn.realized, span_slices(pair, "non_preferred"))
         - float(sum(rp.realized[lo:hi].sum() for lo, hi in span_slices(pair, "preferred")))
         + float(sum(rn.realized[lo:hi].sum() for lo, hi in span_slices(pair, "non_preferred")))
         ) * inst.beta
    return _flat_grad(inst.policy, u)


def assembled_margin_gradient(inst, token_grads=None):
    """``beta * sum_i (sum_{j in span+_i} g+_j - sum_{j in span-_i} g-_j)``, term by term."""
    g_pos, g_neg = token_grads if token_grads is not None else token_gradients(inst)
    total = np.zeros(inst.policy.n_params)
    for (lo_p, hi_p), (lo_n, hi_n) in zip(span_slices(inst.pair, "preferred"),
                                          span_slices(inst.pair, "non_preferred")):
        for j in range(lo_p, hi_p):
            total += g_pos[j]
        for j in range(lo_n, hi_n):
            total -= g_neg[j]
    return inst.beta * total


def verify_margin_gradient(inst, validate_pair=True):
    """Max relative error between the autodiff margin gradient and its assembly."""
    return rel_error(margin_gradient(inst, validate_pair), assembled_margin_gradient(inst))


# ----------------------------------------------------------------- bounds


def bounds_from_lengths(beta, M, span_lengths, len_pos, len_neg):
    """``(bound_rank, bound_dpo)`` from exact per-span lengths ``[(L+_i, L-_i)]``."""
    rank = beta * M * sum(a + b for a, b in span_lengths)
    dpo = beta * M * (len_pos + len_neg)
    return rank, dpo


@dataclass
class GradBoundReport:
    measured_norm_dpo: float
    measured_norm_rrpo_rank: float
    measured_norm_rrpo: float
    bound_dpo: float
    bound_rrpo_rank: float
    M: float
    span_lengths: list = field(default_factory=list)
    len_pos: int = 0
    len_neg: int = 0
    alpha: float = 0.0
    beta: float = 0.0

    @property
    def n_spans(self):
        return len(self.span_lengths)

    @property
    def coverage(self):
        return sum(a + b for a, b in self.span_lengths) / (self.len_pos + self.len_neg)

    @property
    def rank_below_dpo(self):
        return self.measured_norm_rrpo_rank < self.measured_norm_dpo

    @property
    def rrpo_below_rank(self):
        return self.measured_norm_rrpo < self.measured_norm_rrpo_rank

    @property
    def ordering_holds(self):
        return self.rrpo_below_rank and self.rank_below_dpo

    @property
    def rank_bound_holds(self):
        return self.measured_norm_rrpo_rank <= self.bound_rrpo_rank

    @property
    def dpo_bound_holds(self):
        return self.measured_norm_dpo <= self.bound_dpo

    CSV_FIELDS = ("measured_norm_dpo", "measured_norm_rrpo_rank", "measured_norm_rrpo",
                  "bound_dpo", "bound_rrpo_rank", "M", "span_lengths", "len_pos", "len_neg",
                  "n_spans", "coverage", "alpha", "beta", "rank_bound_holds", "dpo_bound_holds",
                  "rank_below_dpo", "rrpo_below_rank", "ordering_holds")

    def row(self):
        out = []
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            if name == "span_lengths":
                v = ";".join(f"{a}+{b}" for a, b in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(v)
        return out


def bound_report(inst, beta=None, alpha=0.05):
    """Measured gradient norms for DPO, refined rank and full RRPO against the bounds."""
    beta = inst.beta if beta is None else beta
    pair = inst.pair
    g_pos, g_neg = token_gradients(inst)
    M = max(float(np.linalg.norm(g)) for g in g_pos + g_neg)

    norms = {}
    for name in ("dpo", "rank", "rrpo"):
        pp, pn, rp, rn = _scores(inst)
        if name == "dpo":
            loss = dpo_loss(pp, pn, rp, rn, beta).loss
        elif name == "rank":
            loss = rrpo_rank_loss(pair, pp, pn, rp, rn, beta).loss
        else:
            loss = rrpo_loss(pair, pp, pn, rp, rn, alpha, beta).loss
        norms[name] = float(np.linalg.norm(_flat_grad(inst.policy, loss)))

    lengths = [(s.pref[1] - s.pref[0] + 1, s.nonpref[1] - s.nonpref[0] + 1) for s in pair.spans]
    b_rank, b_dpo = bounds_from_lengths(beta, M, lengths, len(pair.preferred),
                                        len(pair.non_preferred))
    return GradBoundReport(norms["dpo"], norms["rank"], norms["rrpo"], b_dpo, b_rank, M,
                           lengths, len(pair.preferred), len(pair.non_preferred), alpha, beta)


def random_pair(rng, vocab_size, coverage_max, pair_id="inst"):
    """A valid pair whose spans cover at most ``coverage_max`` of both responses.

    Both responses end with a shared EOS token. Without any shared token
    after the last span, every shared token is a common prefix whose terms
    cancel in the DPO margin, and DPO coincides with the refined rank loss.

    ``coverage_max >= 1`` yields the degenerate case: one span covering each
    whole response.
    """
    lo_tok = 4
    if vocab_size < lo_tok + 2:
        raise ConfigurationError("need at least two non-reserved tokens to build differing phrases")
    prompt = rng.integers(lo_tok, vocab_size, size=int(rng.integers(3, 7))).tolist()

    def phrase(n):
        return rng.integers(lo_tok, vocab_size, size=n).tolist()

    def differing(a, n):
        b = phrase(n)
        while b == a:
            b = phrase(n)
        return b

    if coverage_max >= 1.0:
        pos = phrase(int(rng.integers(3, 10)))
        neg = differing(pos, int(rng.integers(3, 10)))
        return PreferencePair(pair_id, prompt, pos, neg,
                              [SpanEntry(1, (1, len(pos)), (1, len(neg)))])
    if coverage_max <= 0:
        raise ConfigurationError("span_coverage_max must be positive")

    n_spans = int(rng.integers(1, 4))
    lens = [(int(rng.integers(1, 4)), int(rng.integers(1, 4))) for _ in range(n_spans)]
    covered = sum(a + b for a, b in lens)
    # 2 * n_out + covered >= covered / coverage_max
    n_out = max(n_spans, math.ceil(covered * (1 - coverage_max) / (2 * coverage_max)))
    n_out += int(rng.integers(0, 4))
    outside = phrase(n_out)
    gaps = sorted(rng.choice(n_out + 1, size=n_spans, replace=False).tolist())

    pos, neg, entries, prev = [], [], [], 0
    for i, (g, (lp, ln)) in enumerate(zip(gaps, lens)):
        pos += outside[prev:g]
        neg += outside[prev:g]
        a = phrase(lp)
        b = differing(a, ln)
        entries.append(SpanEntry(i + 1, (len(pos) + 1, len(pos) + lp), (len(neg) + 1, len(neg) + ln)))
        pos += a
        neg += b
        prev = g
    # responses end with a shared EOS, as decoded answers do
    pos += outside[prev:] + [EOS]
    neg += outside[prev:] + [EOS]
    return PreferencePair(pair_id, prompt, pos, neg, entries)


def make_instance(seed, span_coverage_max=0.3, beta=0.1, alpha=0.05, train_steps=None,
                  model_kwargs=None):
    """Seeded instance: fresh reference, policy moved by a few RRPO gradient steps.

    At policy = reference the TKL gradient vanishes, so the policy is first
    moved along the descent direction of the full loss, as it would be
    during training.
    """
    rng = np.random.default_rng(derive_seed(seed, "grad-instance"))
    cfg = ToyModelConfig(**{**INSTANCE_MODEL, **(model_kwargs or {}),
                            "seed": int(rng.integers(2**31))})
    policy = ToyLM(cfg)
    pair = random_pair(rng, cfg.vocab_size, span_coverage_max, pair_id=f"inst-{seed}")
    reference = snapshot(policy)
    inst = GradInstance(policy, reference, pair, beta)
    steps = int(rng.integers(1, 6)) if train_steps is None else train_steps
    lr = float(rng.uniform(0.05, 0.3))
    for _ in range(steps):
        pp, pn, rp, rn = _scores(inst)
        g = _flat_grad(policy, rrpo_loss(pair, pp, pn, rp, rn, alpha, beta).loss)
        policy.set_flat(policy.get_flat() - lr * g)
    return inst


@dataclass
class OrderingResult:
    frac_rank_below_dpo: float
    frac_rrpo_below_rank: float
    frac_both: float
    frac_rank_bound: float
    frac_dpo_bound: float
    reports: list

    def summary(self):
        return (f"instances={len(self.reports)} "
                f"rank<dpo={self.frac_rank_below_dpo:.4f} "
                f"rrpo<rank={self.frac_rrpo_below_rank:.4f} "
                f"both={self.frac_both:.4f} "
                f"rank_bound={self.frac_rank_bound:.4f} dpo_bound={self.frac_dpo_bound:.4f}")


def ordering_experiment(n_instances, span_coverage_max, seed, alpha=0.05, beta=0.1):
    """Fractions of seeded instances on which each norm inequality holds."""
    if n_instances < 1:
        raise ConfigurationError("n_instances must be >= 1")
    reports = [bound_report(make_instance(derive_seed(seed, "ordering", i), span_coverage_max,
                                          beta=beta, alpha=alpha), alpha=alpha)
               for i in range(n_instances)]
    n = len(reports)
    return OrderingResult(
        sum(r.rank_below_dpo for r in reports) / n,
        sum(r.rrpo_below_rank for r in reports) / n,
        sum(r.ordering_holds for r in reports) / n,
        sum(r.rank_bound_holds for r in reports) / n,
        sum(r.dpo_bound_holds for r in reports) / n,
        reports,
    )


def write_reports(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("instance",) + GradBoundReport.CSV_FIELDS)
        for i, r in enumerate(reports):
            w.writerow([i] + r.row())
