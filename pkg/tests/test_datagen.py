from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrpo.datagen import (CONCEPTS, EOS, FIRST, MASK, MODES, NO, THE, THEN, YES, FrameSequence,
                          PerturbConfig, ScriptedResponder, SyntheticTask, build_pairs,
                          default_chunk_size, diff_spans, generate_tasks, language_prior, make_pair,
                          perturb, perturbation_plan, verify)
from rrpo.errors import ConfigurationError
from rrpo.spans import validate

MASK_MODES = [m for m in MODES if "Mask" in m]
SHUFFLE_MODES = [m for m in MODES if m != "None"]


def video(n=8, w=4, seed=0):
    rng = np.random.default_rng(seed)
    return FrameSequence(tuple(tuple(int(x) for x in rng.integers(14, 64, w)) for _ in range(n)))


# ------------------------------------------------------------------ perturb


def test_mode_none_is_identity():
    v = video()
    assert perturb(v, PerturbConfig("None", seed=3)) == v


def test_global_shuffle_swaps_two_chunks():
    v = FrameSequence(tuple((100 + i, 14, 15, 16) for i in range(8)))
    swapped = None
    for seed in range(50):
        # independent replay: two chunks, one permutation draw
        if np.random.default_rng(seed).permutation(2).tolist() == [1, 0]:
            swapped = seed
            break
    out = perturb(v, PerturbConfig("GS", chunk_size=4, seed=swapped))
    assert [f[0] - 100 for f in out.frames] == [4, 5, 6, 7, 0, 1, 2, 3]


@pytest.mark.parametrize("mode", MASK_MODES)
def test_mask_fraction_per_frame_over_1000_seeds(mode):
    for width in (4, 8):
        v = video(w=width, seed=width)
        for seed in range(1000):
            out = perturb(v, PerturbConfig(mode, seed=seed))
            for f in out.frames:
                frac = f.count(MASK) / width
                assert 0.25 <= frac <= 0.50


@pytest.mark.parametrize("mode", SHUFFLE_MODES)
def test_shuffles_preserve_frames(mode):
    v = video(seed=1)
    for seed in range(50):
        masked, order = perturbation_plan(v, PerturbConfig(mode, seed=seed))
        assert sorted(order) == list(range(v.n_frames))
        out = perturb(v, PerturbConfig(mode, seed=seed))
        assert (out.n_frames, out.width) == (v.n_frames, v.width)
        if "Mask" not in mode:
            assert Counter(out.frames) == Counter(v.frames)


def test_local_shuffle_stays_within_chunks():
    v = video()
    for seed in range(30):
        _, order = perturbation_plan(v, PerturbConfig("LS", chunk_size=3, seed=seed))
        for pos, src in enumerate(order):
            assert pos // 3 == src // 3


def test_whole_frame_masking_variant():
    v = video()
    out = perturb(v, PerturbConfig("Mask", seed=4, whole_frame_mask=True))
    full = [all(s == MASK for s in f) for f in out.frames]
    untouched = [f == g for f, g in zip(out.frames, v.frames)]
    assert all(a or b for a, b in zip(full, untouched))
    assert 2 <= sum(full) <= 4


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(MODES), st.integers(0, 2**63 - 1), st.integers(0, 9))
def test_perturb_is_deterministic(mode, seed, vseed):
    v = video(seed=vseed)
    cfg = PerturbConfig(mode, seed=seed)
    assert perturb(v, cfg) == perturb(v, cfg)


def test_perturb_config_errors():
    with pytest.raises(ConfigurationError):
        perturb(video(), PerturbConfig("GS", chunk_size=9))
    with pytest.raises(ConfigurationError):
        PerturbConfig("Blur")
    with pytest.raises(ConfigurationError):
        PerturbConfig(mask_frac_range=(0.6, 0.4))
    with pytest.raises(ConfigurationError):
        FrameSequence(((1, 2, 3),))


def test_default_chunk_size():
    assert default_chunk_size(8) == 2
    assert default_chunk_size(16) == 4
    assert default_chunk_size(3) == 2


# ------------------------------------------------------------------ responder


def test_clean_video_gives_ground_truth():
    responder = ScriptedResponder()
    for task in generate_tasks(60, seed=1):
        assert responder(task, task.video) == list(task.answer)


def test_fully_masked_video_falls_back_on_the_prior():
    full = PerturbConfig("Mask", mask_frac_range=(1.0, 1.0), seed=5)
    for task in generate_tasks(30, seed=2):
        blind = perturb(task.video, full)
        assert all(s == MASK for f in blind.frames for s in f)
        a = ScriptedResponder()(task, blind)
        assert a == ScriptedResponder()(task, blind)
        assert verify(task, a) == "wrong"
        if task.task_type == "BinaryQA":
            assert a[0] == task.distractors[0]
        else:
            wrong = [t for t in a if t in CONCEPTS and t not in task.answer]
            assert wrong and set(wrong) <= set(task.distractors)


def test_wrong_answer_rate_under_rs_mask():
    tasks = generate_tasks(1000, seed=3)
    _, summary = build_pairs(tasks, PerturbConfig("RS-Mask", seed=3), dedup=False)
    rate = (summary.generated - summary.discarded_correct) / summary.generated
    assert 0.4 <= rate <= 0.9


def test_language_prior_ties_go_to_lowest_id():
    task = generate_tasks(1, seed=0)[0]
    task = SyntheticTask(task.id, task.task_type, task.question, task.answer, task.video,
                         (40, 30, 40, 30, 50), task.options, task.subject)
    assert language_prior(task, k=2) == [30, 40]
    assert language_prior(task, exclude=(30,)) == [40]


# ------------------------------------------------------------------ verify


def test_verify_examples():
    tasks = {t.task_type: t for t in generate_tasks(3, seed=4)}
    for t in tasks.values():
        assert verify(t, t.answer) == "correct"
    open_task = tasks["OpenEnded"]
    a, b = [x for x in open_task.answer if x in CONCEPTS]
    other = next(c for c in CONCEPTS if c not in (a, b))
    assert verify(open_task, [FIRST, THE, a, THEN, THE, other, EOS]) == "wrong"
    assert verify(open_task, [FIRST, THE, b, THEN, THE, a, EOS]) == "correct"
    binary = tasks["BinaryQA"]
    flipped = YES if binary.answer[0] == NO else NO
    assert verify(binary, [flipped, EOS]) == "wrong"


# ------------------------------------------------------------------ pairs


def test_always_correct_responder_keeps_nothing():
    tasks = generate_tasks(50, seed=5)
    pairs, summary = build_pairs(tasks, PerturbConfig("RS-Mask"), ScriptedResponder(always_correct=True))
    assert pairs == [] and summary.discarded_correct == 50


def test_single_differing_phrase_fixture():
    base = generate_tasks(3, seed=6)[2]
    a, b, c, d = CONCEPTS[:4]
    task = SyntheticTask("fix", "OpenEnded", base.question, (FIRST, THE, THEN, THE, a, b, EOS),
                         base.video, base.distractors)
    wrong = [FIRST, THE, THEN, THE, c, d, EOS]
    pairs, summary = build_pairs([task], PerturbConfig("None"), lambda t, v: wrong)
    assert summary.kept == 1
    (pair,) = pairs
    assert [(s.phrase_id, s.pref, s.nonpref) for s in pair.spans] == [(1, (5, 6), (5, 6))]
    assert pair.preferred == task.answer and pair.non_preferred == tuple(wrong)


def test_dedup_matches_distinct_keys_over_1000_tasks():
    tasks = generate_tasks(1000, seed=7)
    cfg = PerturbConfig("RS-Mask", seed=7)
    raw, _ = build_pairs(tasks, cfg, dedup=False)
    pairs, summary = build_pairs(tasks, cfg)
    assert len(pairs) == len({p.concept_key for p in raw})
    assert summary.kept + summary.discarded_correct + summary.dedup_removed == 1000
    assert all(validate(p) == [] for p in pairs)


def test_build_pairs_is_order_independent():
    tasks = generate_tasks(120, seed=8)
    cfg = PerturbConfig("RS-Mask", seed=8)
    assert build_pairs(tasks, cfg)[0] == build_pairs(tasks[::-1], cfg)[0]


def test_diff_spans_for_unequal_lengths():
    (span,) = diff_spans([4, 20, 5, 3], [4, 30, 31, 5, 3])
    assert span.pref == (2, 2) and span.nonpref == (2, 3)
    # a pure insertion borrows one shared neighbour
    (span,) = diff_spans([4, 5, 3], [4, 20, 5, 3])
    assert span.pref == (1, 1) and span.nonpref == (1, 2)


def test_make_pair_concept_key():
    task = next(t for t in generate_tasks(6, seed=9) if t.task_type == "MCQ")
    wrong_opt = next(o for o in task.options if o not in task.answer)
    pair = make_pair(task, [task.answer[0], wrong_opt, EOS])
    assert len(pair.concept_key) == 2 and pair.concept_key[0] != pair.concept_key[1]
    assert validate(pair) == []
