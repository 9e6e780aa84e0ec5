"""Finite-difference and oracle sweeps used by unit and acceptance tests."""

import numpy as np

import oracles
from cases import random_case
from rrpo import autodiff as ad
from rrpo.gradcheck import check_gradient, numeric_grad, rel_error
from rrpo.losses import (TokenLogProbs, ddpo_loss, dpa_loss, dpo_loss, rrpo_loss,
                         rrpo_rank_loss, tdpo_loss, tkl)

LOSS_METHODS = ("DPO", "RRPO_RANK", "RRPO", "DDPO", "TDPO", "DPA")


def _weighted(out, w):
    # scalarise an arbitrary-shaped output so every element matters
    return ad.sum_(out * w)


def primitive_cases():
    """name -> (builder(rng) -> (fn, arrays))."""

    def unary(op, lo=-2.0, hi=2.0, shape=(3, 4)):
        def build(rng):
            x = rng.uniform(lo, hi, shape)
            w = rng.normal(size=op(ad.Tensor(x)).shape)
            return (lambda a: _weighted(op(a), w)), [x]
        return build

    def binary(op, shape_a=(3, 4), shape_b=(3, 4)):
        def build(rng):
            a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
            w = rng.normal(size=np.broadcast_shapes(shape_a, shape_b))
            return (lambda x, y: _weighted(op(x, y), w)), [a, b]
        return build

    def matmul(rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 2))
        return (lambda x, y: _weighted(ad.matmul(x, y), w)), [a, b]

    def gather(rng):
        x = rng.normal(size=(4, 5))
        idx = rng.integers(0, 5, size=(4, 2))
        w = rng.normal(size=(4, 2))
        return (lambda a: _weighted(ad.gather(a, idx), w)), [x]

    def getitem(rng):
        x = rng.normal(size=(5, 3))
        idx = rng.integers(0, 5, size=4)
        w = rng.normal(size=(4, 3))
        return (lambda a: _weighted(a[idx], w) + ad.sum_(a[1:3] * 2.0)), [x]

    def stack(rng):
        a, b = rng.normal(size=3), rng.normal(size=3)
        w = rng.normal(size=(2, 3))
        return (lambda x, y: _weighted(ad.stack([x, y]), w)), [a, b]

    def division(rng):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda x, y: _weighted(x / y, w)), [a, b]

    return {
        "add": binary(ad.add),
        "add_broadcast": binary(ad.add, (3, 4), (4,)),
        "mul": binary(ad.mul),
        "mul_broadcast": binary(ad.mul, (3, 1), (1, 4)),
        "div": division,
        "neg": unary(ad.neg),
        "power": unary(lambda a: ad.power(a, 3.0), 0.5, 2.0),
        "matmul": matmul,
        "exp": unary(ad.exp),
        "log": unary(ad.log, 0.3, 3.0),
        "sum": unary(lambda a: ad.sum_(a, axis=0)),
        "mean": unary(lambda a: ad.mean(a, axis=1)),
        "gather": gather,
        "softmax": unary(lambda a: ad.softmax(a, axis=-1), -3, 3),
        "log_softmax": unary(lambda a: ad.log_softmax(a, axis=-1), -3, 3),
        "sigmoid": unary(ad.sigmoid, -4, 4),
        "log_sigmoid": unary(ad.log_sigmoid, -4, 4),
        "reshape": unary(lambda a: ad.reshape(a, (4, 3))),
        "transpose": unary(lambda a: ad.transpose(a)),
        "getitem": getitem,
        "relu": unary(ad.relu),
        "tanh": unary(ad.tanh),
        "stack": stack,
    }


def primitive_errors(n=100, seed=0):
    out = {}
    for k, (name, build) in enumerate(primitive_cases().items()):
        rng = np.random.default_rng([seed, k])
        out[name] = max(check_gradient(*_unpack(build(rng))) for _ in range(n))
    return out


def _unpack(built):
    fn, arrays = built
    return (fn, *arrays)


def _loss_value(method, case, pol, ref, alpha, beta, gamma):
    pp, pn = pol
    rp, rn = ref
    if method == "DPO":
        return dpo_loss(pp, pn, rp, rn, beta)
    if method == "RRPO_RANK":
        return rrpo_rank_loss(case.pair, pp, pn, rp, rn, beta)
    if method == "RRPO":
        return rrpo_loss(case.pair, pp, pn, rp, rn, alpha, beta)
    if method == "DDPO":
        return ddpo_loss(case.pair, pp, pn, rp, rn, beta, gamma)
    if method == "TDPO":
        return tdpo_loss(pp, pn, rp, rn, alpha, beta)
    return dpa_loss(case.pair, pp, pn, rp, rn, alpha)


def loss_gradient_error(method, case, alpha=0.3, beta=0.7, gamma=2.0, eps=1e-6):
    """Autodiff gradient w.r.t. policy logits against central differences."""
    ref = case.ref()
    leaves = [ad.Tensor(z, requires_grad=True) for z in case.pol_logits]
    grads = ad.backward(_loss_value(method, case, case.pol_from(leaves), ref,
                                    alpha, beta, gamma).loss)
    frozen_pos = case.pol_arrays()[0].full_dist

    def value():
        pol = case.pol_arrays()
        if method == "TDPO":
            # the preferred-side KL is a stop-gradient term: hold it fixed
            pol[0] = TokenLogProbs(pol[0].realized, frozen_pos, tokens=pol[0].tokens)
        return _loss_value(method, case, pol, ref, alpha, beta, gamma).total

    analytic = np.concatenate([grads[leaf].ravel() for leaf in leaves])
    numeric = np.concatenate([numeric_grad(value, z, eps).ravel() for z in case.pol_logits])
    return rel_error(analytic, numeric)


def fd_case(rng):
    # small vocabulary and short responses keep central differences cheap
    return random_case(rng, vocab=6, coverage=rng.uniform(0.45, 0.8))


def loss_gradient_errors(n=100, seed=0):
    out = {}
    for k, method in enumerate(LOSS_METHODS):
        rng = np.random.default_rng([seed, 100 + k])
        out[method] = max(loss_gradient_error(method, fd_case(rng)) for _ in range(n))
    return out


def oracle_value(method, case, alpha, beta, gamma):
    pp, pn = [lp.realized.tolist() for lp in case.pol_arrays()]
    rp, rn = [lp.realized.tolist() for lp in case.ref()]
    pol_rows = case.pol_arrays()[0].full_dist.tolist()
    ref_rows = case.ref()[0].full_dist.tolist()
    spans = case.spans_1based()
    if method == "DPO":
        return oracles.dpo(pp, pn, rp, rn, beta)
    if method == "RRPO_RANK":
        return oracles.rrpo_rank(spans, pp, pn, rp, rn, beta)
    if method == "RRPO":
        return oracles.rrpo(spans, pp, pn, rp, rn, ref_rows, pol_rows, alpha, beta)
    if method == "DDPO":
        return oracles.ddpo(spans, pp, pn, rp, rn, beta, gamma)
    if method == "TDPO":
        kl_neg = oracles.kl_rows(case.ref()[1].full_dist.tolist(),
                                 case.pol_arrays()[1].full_dist.tolist())
        return oracles.tdpo(pp, pn, rp, rn, oracles.kl_rows(ref_rows, pol_rows), kl_neg,
                            alpha, beta)
    return oracles.dpa(spans, pp, pn, ref_rows, pol_rows, alpha)


def oracle_differences(n=100, seed=0):
    out = {}
    for k, method in enumerate(LOSS_METHODS):
        rng = np.random.default_rng([seed, 200 + k])
        worst = 0.0
        for _ in range(n):
            case = random_case(rng, vocab=7)
            alpha, beta, gamma = rng.uniform(0, 1), rng.uniform(0.05, 1), rng.uniform(1, 4)
            got = _loss_value(method, case, case.pol_arrays(), case.ref(), alpha, beta, gamma).total
            worst = max(worst, abs(got - oracle_value(method, case, alpha, beta, gamma)))
        out[method] = worst
    return out


__all__ = ["primitive_errors", "loss_gradient_errors", "oracle_differences", "tkl"]
