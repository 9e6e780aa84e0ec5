"""Direct-formula reference implementations, scalar ``math`` only.

Inputs are plain lists: realized log-probs per token, full log-distributions
as lists of rows, spans as 1-based inclusive ``(start, end)`` tuples.
Nothing here imports the package.
"""

import math


def log_sigmoid(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def seq_sum(xs, lo=1, hi=None):
    hi = len(xs) if hi is None else hi
    return math.fsum(xs[lo - 1:hi])


def span_reward(pol, ref, span, beta):
    s, e = span
    return beta * (seq_sum(pol, s, e) - seq_sum(ref, s, e))


def kl_rows(ref_rows, pol_rows):
    total = []
    for r, p in zip(ref_rows, pol_rows):
        for a, b in zip(r, p):
            total.append(math.exp(a) * (a - b))
    return math.fsum(total)


def dpo(pp, pn, rp, rn, beta):
    m = beta * (seq_sum(pp) - seq_sum(rp)) - beta * (seq_sum(pn) - seq_sum(rn))
    return -log_sigmoid(m)


def margin(spans, pp, pn, rp, rn, beta):
    """Per-span beta placement, then summed."""
    parts = [span_reward(pp, rp, sp, beta) - span_reward(pn, rn, sn, beta) for sp, sn in spans]
    return math.fsum(parts), parts


def rrpo_rank(spans, pp, pn, rp, rn, beta):
    return -log_sigmoid(margin(spans, pp, pn, rp, rn, beta)[0])


def rrpo(spans, pp, pn, rp, rn, ref_rows_pos, pol_rows_pos, alpha, beta):
    return rrpo_rank(spans, pp, pn, rp, rn, beta) + alpha * kl_rows(ref_rows_pos, pol_rows_pos)


def _covered(spans_one_side, n):
    inside = [False] * n
    for s, e in spans_one_side:
        for j in range(s - 1, e):
            inside[j] = True
    return inside


def ddpo(spans, pp, pn, rp, rn, beta, gamma):
    def weighted(pol, ref, side_spans):
        inside = _covered(side_spans, len(pol))
        same = math.fsum(p - r for p, r, i in zip(pol, ref, inside) if not i)
        diff = math.fsum(p - r for p, r, i in zip(pol, ref, inside) if i)
        return (same + gamma * diff) / len(pol)

    m = beta * (weighted(pp, rp, [s for s, _ in spans]) - weighted(pn, rn, [s for _, s in spans]))
    return -log_sigmoid(m)


def tdpo(pp, pn, rp, rn, kl_pos, kl_neg, alpha, beta):
    reward = beta * (seq_sum(pp) - seq_sum(rp)) - beta * (seq_sum(pn) - seq_sum(rn))
    return -log_sigmoid(reward - alpha * (beta * kl_neg - beta * kl_pos))


def dpa(spans, pp, pn, ref_rows_pos, pol_rows_pos, alpha):
    terms = []
    for (s1, e1), (s2, e2) in spans:
        p_pos = math.exp(seq_sum(pp, s1, e1))
        p_neg = math.exp(seq_sum(pn, s2, e2))
        terms.append(-math.log(p_pos / (p_pos + p_neg)))
    return math.fsum(terms) / len(terms) + alpha * kl_rows(ref_rows_pos, pol_rows_pos)


def se_adjusted(s1, s2, n):
    se = math.sqrt(s1 * (1 - s2) / n)
    return se, s1 - s2, (s1 - s2) - 1.96 * se
