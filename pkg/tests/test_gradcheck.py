import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrpo import autodiff as ad
from rrpo.errors import ConfigurationError
from rrpo.gradcheck import (GradBoundReport, GradInstance, _flat_grad, _scores, bound_report,
                            bounds_from_lengths, make_instance, margin_gradient, ordering_experiment,
                            random_pair, verify_margin_gradient, write_reports)
from rrpo.losses import dpo_loss, rrpo_rank_loss
from rrpo.spans import PreferencePair, SpanEntry, validate
from rrpo.toylm import EOS, ToyLM, ToyModelConfig, snapshot


@pytest.mark.parametrize("seed", range(5))
def test_margin_gradient_matches_term_by_term_assembly(seed):
    inst = make_instance(seed, span_coverage_max=0.4)
    assert verify_margin_gradient(inst) < 1e-8


def test_symmetric_spans_at_rest_give_zero_margin_gradient():
    model = ToyLM(ToyModelConfig(vocab_size=16, embed_dim=8, context_len=32, seed=4))
    # the span and everything before it agree; the responses differ only afterwards
    pair = PreferencePair("sym", (2, 5, 6), (7, 8, 9, 10, EOS), (7, 8, 9, 11, EOS),
                          [SpanEntry(1, (2, 3), (2, 3))])
    inst = GradInstance(model, snapshot(model), pair, 0.1)
    g = margin_gradient(inst, validate_pair=False)
    assert np.max(np.abs(g)) < 1e-10
    with pytest.raises(ConfigurationError):
        margin_gradient(inst)


def test_full_coverage_margin_gradient_is_dpo_margin_gradient():
    inst = make_instance(3, span_coverage_max=1.0)
    assert len(inst.pair.spans) == 1
    pp, pn, _, _ = _scores(inst)
    dpo_grad = _flat_grad(inst.policy, (ad.sum_(pp.realized) - ad.sum_(pn.realized)) * inst.beta)
    assert np.allclose(margin_gradient(inst), dpo_grad, rtol=0, atol=1e-14)


def test_bounds_from_lengths_example():
    rank, dpo = bounds_from_lengths(0.1, 1.2, [(3, 3), (3, 3)], 20, 20)
    assert rank == pytest.approx(1.44, abs=1e-12)
    assert dpo == pytest.approx(4.8, abs=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_bounds_hold_on_instances(seed):
    rep = bound_report(make_instance(100 + seed, span_coverage_max=0.3))
    assert rep.M > 0
    assert rep.rank_bound_holds and rep.dpo_bound_holds
    assert rep.bound_rrpo_rank < rep.bound_dpo


def test_full_coverage_is_degenerate():
    inst = make_instance(7, span_coverage_max=1.0)
    rep = bound_report(inst)
    assert rep.bound_rrpo_rank == rep.bound_dpo
    assert rep.measured_norm_rrpo_rank == pytest.approx(rep.measured_norm_dpo, rel=1e-9)
    pp, pn, rp, rn = _scores(inst)
    a = dpo_loss(pp, pn, rp, rn, inst.beta)
    b = rrpo_rank_loss(inst.pair, pp, pn, rp, rn, inst.beta)
    assert abs(a.total - b.total) < 1e-10
    ga = _flat_grad(inst.policy, a.loss)
    gb = _flat_grad(inst.policy, b.loss)
    assert np.max(np.abs(ga - gb)) < 1e-10


def test_alpha_zero_makes_rrpo_and_rank_norms_identical():
    rep = bound_report(make_instance(11), alpha=0.0)
    assert rep.measured_norm_rrpo == rep.measured_norm_rrpo_rank


def test_ordering_experiment_small_run(tmp_path):
    res = ordering_experiment(6, 0.3, seed=2)
    assert len(res.reports) == 6
    assert res.frac_rank_bound == res.frac_dpo_bound == 1.0
    for f in (res.frac_rank_below_dpo, res.frac_rrpo_below_rank, res.frac_both):
        assert 0.0 <= f <= 1.0
    assert "rank<dpo=" in res.summary()
    path = tmp_path / "g.csv"
    write_reports(res.reports, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["instance", *GradBoundReport.CSV_FIELDS]
    assert len(rows) == 7


def test_ordering_experiment_is_deterministic():
    a = ordering_experiment(2, 0.3, seed=9)
    b = ordering_experiment(2, 0.3, seed=9)
    assert [r.row() for r in a.reports] == [r.row() for r in b.reports]


def test_ordering_experiment_needs_instances():
    with pytest.raises(ConfigurationError):
        ordering_experiment(0, 0.3, seed=0)


def test_random_pair_needs_two_free_tokens():
    with pytest.raises(ConfigurationError):
        random_pair(np.random.default_rng(0), 5, 0.3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_random_pairs_respect_coverage(seed, cov):
    pair = random_pair(np.random.default_rng(seed), 16, cov)
    assert validate(pair, "RRPO") == []
    covered = sum(s.pref[1] - s.pref[0] + 1 + s.nonpref[1] - s.nonpref[0] + 1 for s in pair.spans)
    assert covered / (len(pair.preferred) + len(pair.non_preferred)) <= cov + 1e-12
    assert pair.preferred[-1] == pair.non_preferred[-1] == EOS
