"""Preference-optimization objectives over per-token log-probabilities.

All kernels take the policy and reference :class:`TokenLogProbs` of the
preferred (``pos``) and non-preferred (``neg``) response. Policy fields may
be graph :class:`~rrpo.autodiff.Tensor` objects, in which case the returned
:class:`LossBreakdown` carries a differentiable ``loss``; reference fields
are always treated as constants.

Methods: ``DPO``, ``DDPO``, ``TDPO``, ``DPA``, ``RRPO_RANK`` (refined
sub-sequence ranking only) and ``RRPO`` (ranking + token-wise KL on the
preferred response).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError

METHODS = ("DPO", "DDPO", "TDPO", "DPA", "RRPO_RANK", "RRPO")


@dataclass
class TokenLogProbs:
    """Log-probabilities of one response under one model.

    ``realized[j]`` is log pi(t_j | x, t_<j); ``full_dist[j]`` is the whole
    log-distribution over the vocabulary at position j.
    """

    realized: object
    full_dist: object = None
    side: str | None = None
    source: str | None = None
    tokens: np.ndarray | None = None

    def __len__(self):
        return int(np.shape(_val(self.realized))[0])

    def detached(self):
        return TokenLogProbs(_val(self.realized).copy(),
                             None if self.full_dist is None else _val(self.full_dist).copy(),
                             self.side, "reference", self.tokens)

    def check(self, atol=1e-9):
        """Raise ``ValueError`` if the row-normalisation or realized/full invariants fail."""
        if self.full_dist is None:
            return
        full = _val(self.full_dist)
        sums = np.exp(full).sum(axis=-1)
        if not np.allclose(sums, 1.0, rtol=0, atol=atol):
            raise ValueError("full_dist rows do not sum to one")
        if self.tokens is not None:
            picked = full[np.arange(len(self.tokens)), self.tokens]
            if not np.array_equal(picked, _val(self.realized)):
                raise ValueError("realized log-probs disagree with full_dist")


@dataclass(frozen=True)
class LossConfig:
    method: str = "RRPO"
    alpha: float = 0.05
    beta: float = 0.1
    gamma: float = 1.0
    # which response's TKL stays live in TDPO; the other is stop-gradient
    tdpo_live: str = "non_preferred"

    def __post_init__(self):
        object.__setattr__(self, "method", self.method.upper())
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.alpha >= 0:
            raise ConfigurationError("alpha must be >= 0")
        if not self.beta > 0:
            raise ConfigurationError("beta must be > 0")
        if not self.gamma >= 1:
            raise ConfigurationError("gamma must be >= 1")
        if self.tdpo_live not in ("non_preferred", "preferred"):
            raise ConfigurationError("tdpo_live must be 'non_preferred' or 'preferred'")

    @property
    def refined(self):
        return self.method in ("RRPO", "RRPO_RANK", "DPA", "DDPO")


@dataclass
class LossBreakdown:
    method: str
    total: float
    rank_term: float
    tkl_term: float
    per_span_margins: list = field(default_factory=list)
    total_margin: float = 0.0
    loss: Tensor | None = field(default=None, repr=False, compare=False)


# ------------------------------------------------------------------ helpers


def _val(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _lengths_match(pol, ref, n=None):
    lp, lr = len(pol), len(ref)
    if lp != lr or (n is not None and lp != n):
        raise ShapeError(f"log-prob lengths differ: policy {lp}, reference {lr}, expected {n}")


def _logratio_sum(pol, ref, weights):
    """sum_j w_j (log pi_theta(t_j) - log pi_ref(t_j)) as a graph node."""
    _lengths_match(pol, ref, len(weights))
    diff = ad.as_tensor(pol.realized) - _val(ref.realized)
    return ad.sum_(diff * weights)


def _tkl(ref_full, pol_full):
    if ref_full is None or pol_full is None:
        raise ShapeError("token-wise KL needs full per-position distributions")
    ref = _val(ref_full)
    if ref.shape != np.shape(_val(pol_full)):
        raise ShapeError(f"TKL shape mismatch: reference {ref.shape}, "
                         f"policy {np.shape(_val(pol_full))}")
    return ad.sum_(np.exp(ref) * (ad.as_tensor(ref) - ad.as_tensor(pol_full)))


def _tkl_or_nan(ref, pol):
    if ref.full_dist is None or pol.full_dist is None:
        return float("nan")
    return float(_tkl(ref.full_dist, pol.full_dist).data)


def _masks(pair):
    from .spans import span_mask
    return span_mask(pair, "preferred"), span_mask(pair, "non_preferred")


def _require_spans(pair, method):
    from .spans import check
    check(pair, method)


# -------------------------------------------------------------- public API


def subseq_reward(policy, reference, span, beta):
    """beta * sum over the 1-based inclusive ``span`` of the policy/reference log-ratio."""
    start, end = span
    n = len(policy)
    _lengths_match(policy, reference)
    if not (1 <= start <= end <= n):
        raise IndexError(f"span [{start},{end}] outside response of length {n}")
    pol = _val(policy.realized)[start - 1:end]
    ref = _val(reference.realized)[start - 1:end]
    return beta * float(np.sum(pol - ref))


def total_margin(pair, pol_pos, pol_neg, ref_pos, ref_neg, beta):
    """Refined reward margin ``(u, [u_i])`` with u_i = r(y+_i) - r(y-_i)."""
    _require_spans(pair, "RRPO")
    margins = [subseq_reward(pol_pos, ref_pos, s.pref, beta)
               - subseq_reward(pol_neg, ref_neg, s.nonpref, beta)
               for s in pair.spans]
    return sum(margins), margins


def tkl(reference_full_dists, policy_full_dists):
    """Sum over positions of KL(reference || policy)."""
    return float(_tkl(reference_full_dists, policy_full_dists).data)


def dpo_loss(pol_pos, pol_neg, ref_pos, ref_neg, beta):
    ones_p = np.ones(len(pol_pos))
    ones_n = np.ones(len(pol_neg))
    margin = (_logratio_sum(pol_pos, ref_pos, ones_p)
              - _logratio_sum(pol_neg, ref_neg, ones_n)) * beta
    loss = -ad.log_sigmoid(margin)
    return LossBreakdown("DPO", loss.item(), loss.item(), _tkl_or_nan(ref_pos, pol_pos),
                         [], margin.item(), loss)


def rrpo_rank_loss(pair, pol_pos, pol_neg, ref_pos, ref_neg, beta):
    _require_spans(pair, "RRPO_RANK")
    u, loss, per_span = _rank_core(pair, pol_pos, pol_neg, ref_pos, ref_neg, beta)
    return LossBreakdown("RRPO_RANK", loss.item(), loss.item(), _tkl_or_nan(ref_pos, pol_pos),
                         per_span, u.item(), loss)


def _rank_core(pair, pol_pos, pol_neg, ref_pos, ref_neg, beta):
    m_pos, m_neg = _masks(pair)
    # beta applied once to the summed raw margins
    u = (_logratio_sum(pol_pos, ref_pos, m_pos) - _logratio_sum(pol_neg, ref_neg, m_neg)) * beta
    _, per_span = total_margin(pair, pol_pos, pol_neg, ref_pos, ref_neg, beta)
    return u, -ad.log_sigmoid(u), per_span


def rrpo_loss(pair, pol_pos, pol_neg, ref_pos, ref_neg, alpha, beta):
    """Refined ranking loss plus ``alpha`` times TKL over the preferred response."""
    _require_spans(pair, "RRPO")
    u, rank, per_span = _rank_core(pair, pol_pos, pol_neg, ref_pos, ref_neg, beta)
    kl = _tkl(ref_pos.full_dist, pol_pos.full_dist)
    loss = rank + kl * alpha
    return LossBreakdown("RRPO", loss.item(), rank.item(), kl.item(), per_span, u.item(), loss)


def ddpo_loss(pair, pol_pos, pol_neg, ref_pos, ref_neg, beta, gamma):
    """DPO with length-normalised log-probs that up-weight differing tokens by gamma."""
    _require_spans(pair, "DDPO")
    m_pos, m_neg = _masks(pair)
    w_pos = (1.0 + (gamma - 1.0) * m_pos) / len(m_pos)
    w_neg = (1.0 + (gamma - 1.0) * m_neg) / len(m_neg)
    margin = (_logratio_sum(pol_pos, ref_pos, w_pos) - _logratio_sum(pol_neg, ref_neg, w_neg)) * beta
    loss = -ad.log_sigmoid(margin)
    return LossBreakdown("DDPO", loss.item(), loss.item(), _tkl_or_nan(ref_pos, pol_pos),
                         [], margin.item(), loss)


def tdpo_loss(pol_pos, pol_neg, ref_pos, ref_neg, alpha, beta, live="non_preferred"):
    """DPO margin minus ``alpha * (beta*TKL(live) - sg(beta*TKL(other)))``.

    With the default ``live="non_preferred"`` the TKL of the non-preferred
    response keeps its gradient and the preferred response's TKL enters as a
    stop-gradient constant.
    """
    ones_p = np.ones(len(pol_pos))
    ones_n = np.ones(len(pol_neg))
    reward = (_logratio_sum(pol_pos, ref_pos, ones_p)
              - _logratio_sum(pol_neg, ref_neg, ones_n)) * beta
    kl_pos = _tkl(ref_pos.full_dist, pol_pos.full_dist)
    kl_neg = _tkl(ref_neg.full_dist, pol_neg.full_dist)
    live_kl, frozen_kl = (kl_neg, kl_pos) if live == "non_preferred" else (kl_pos, kl_neg)
    inner = reward - (live_kl * beta - frozen_kl.detach() * beta) * alpha
    loss = -ad.log_sigmoid(inner)
    return LossBreakdown("TDPO", loss.item(), loss.item(), kl_pos.item(), [], reward.item(), loss)


def dpa_loss(pair, pol_pos, pol_neg, ref_pos, ref_neg, alpha):
    """Phrase-level ranking on policy probabilities only, plus alpha * TKL(y+).

    Each phrase contributes -log(P+ / (P+ + P-)) = -log sigmoid(log P+ - log P-),
    averaged over phrases.
    """
    _require_spans(pair, "DPA")
    pos = ad.as_tensor(pol_pos.realized)
    neg = ad.as_tensor(pol_neg.realized)
    terms, margins = [], []
    for s in pair.spans:
        diff = ad.sum_(pos[s.pref[0] - 1:s.pref[1]]) - ad.sum_(neg[s.nonpref[0] - 1:s.nonpref[1]])
        margins.append(diff.item())
        terms.append(-ad.log_sigmoid(diff))
    rank = ad.mean(ad.stack(terms))
    kl = _tkl(ref_pos.full_dist, pol_pos.full_dist)
    loss = rank + kl * alpha
    return LossBreakdown("DPA", loss.item(), rank.item(), kl.item(), margins, sum(margins), loss)


def compute_loss(cfg, pair, pol_pos, pol_neg, ref_pos, ref_neg):
    """Dispatch on ``cfg.method``."""
    m = cfg.method
    if m == "DPO":
        return dpo_loss(pol_pos, pol_neg, ref_pos, ref_neg, cfg.beta)
    if m == "RRPO_RANK":
        return rrpo_rank_loss(pair, pol_pos, pol_neg, ref_pos, ref_neg, cfg.beta)
    if m == "RRPO":
        return rrpo_loss(pair, pol_pos, pol_neg, ref_pos, ref_neg, cfg.alpha, cfg.beta)
    if m == "DDPO":
        return ddpo_loss(pair, pol_pos, pol_neg, ref_pos, ref_neg, cfg.beta, cfg.gamma)
    if m == "TDPO":
        return tdpo_loss(pol_pos, pol_neg, ref_pos, ref_neg, cfg.alpha, cfg.beta, cfg.tdpo_live)
    if m == "DPA":
        return dpa_loss(pair, pol_pos, pol_neg, ref_pos, ref_neg, cfg.alpha)
    raise ConfigurationError(f"unknown method {m!r}")


def batch_loss(cfg, pairs, pol_pos, pol_neg, ref_pos, ref_neg):
    """Mean loss over a batch of pairs. Returns ``(loss_tensor, breakdowns)``."""
    if not pairs:
        raise ConfigurationError("empty batch")
    parts = [compute_loss(cfg, p, a, b, c, d)
             for p, a, b, c, d in zip(pairs, pol_pos, pol_neg, ref_pos, ref_neg)]
    loss = ad.mean(ad.stack([b.loss for b in parts]))
    return loss, parts
