"""Synthetic self-alignment data: symbolic videos, perturbations and pairs.

A video is a short list of frames, each a fixed-width row of symbol ids.
Concept symbols sit among background symbols. Perturbations mask a share of
every frame's slots and/or shuffle frame order. A scripted responder answers
correctly from clean videos and falls back on a language prior (the most
frequent concept in the task's distractor vocabulary) when the evidence it
needs is no longer visible. Wrong answers become non-preferred responses.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import spans as spans_mod
from .errors import ConfigurationError
from .rng import derive_seed, make_rng
from .spans import PreferencePair, SpanEntry, make_concept_key
from .toylm import BOS, EOS, MASK, PAD

# ----------------------------------------------------------------- vocabulary

SEP, Q_MCQ, Q_BIN, Q_OPEN, YES, NO, ANS, THE, THEN, FIRST = range(4, 14)
BACKGROUND = tuple(range(14, 20))
CONCEPT_NAMES = (
    "dog", "cat", "ball", "car", "cup", "door", "hand", "box", "tree", "bird",
    "chair", "book", "phone", "bike", "hat", "apple", "knife", "shoe", "lamp", "key",
    "run", "jump", "open", "close", "throw", "catch", "sit", "stand", "push", "pull",
    "red", "blue", "green", "big", "small", "left", "right", "up", "down", "fast",
    "slow", "water", "fire", "rock",
)
FIRST_CONCEPT = 20
CONCEPTS = tuple(range(FIRST_CONCEPT, FIRST_CONCEPT + len(CONCEPT_NAMES)))
VOCAB_SIZE = FIRST_CONCEPT + len(CONCEPT_NAMES)

TOKEN_NAMES = {PAD: "<pad>", MASK: "<mask>", BOS: "<bos>", EOS: "<eos>", SEP: "<sep>",
               Q_MCQ: "<mcq>", Q_BIN: "<bin>", Q_OPEN: "<open>", YES: "yes", NO: "no",
               ANS: "answer", THE: "the", THEN: "then", FIRST: "first"}
TOKEN_NAMES.update({b: f"bg{i}" for i, b in enumerate(BACKGROUND)})
TOKEN_NAMES.update({c: n for c, n in zip(CONCEPTS, CONCEPT_NAMES)})

TASK_TYPES = ("MCQ", "BinaryQA", "OpenEnded")
MODES = ("None", "RS", "LS", "GS", "Mask", "LS-Mask", "GS-Mask", "RS-Mask")


def is_concept(tok):
    return FIRST_CONCEPT <= tok < VOCAB_SIZE


def detokenize(tokens):
    return " ".join(TOKEN_NAMES.get(int(t), str(t)) for t in tokens)


# -------------------------------------------------------------------- types


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple
    mask_symbol: int = MASK

    def __post_init__(self):
        frames = tuple(tuple(int(s) for s in f) for f in self.frames)
        object.__setattr__(self, "frames", frames)
        widths = {len(f) for f in frames}
        if len(widths) > 1:
            raise ConfigurationError("all frames must have the same width")
        if frames and next(iter(widths)) < 4:
            raise ConfigurationError("frame width must be at least 4")

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def width(self):
        return len(self.frames[0]) if self.frames else 0

    def tokens(self):
        return [s for f in self.frames for s in f]

    def as_array(self):
        return np.asarray(self.frames, dtype=np.int64).reshape(self.n_frames, self.width)


@dataclass(frozen=True)
class PerturbConfig:
    mode: str = "RS-Mask"
    mask_frac_range: tuple = (0.25, 0.50)
    chunk_size: int | None = None
    seed: int = 0
    whole_frame_mask: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown perturbation mode {self.mode!r}")
        lo, hi = self.mask_frac_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigurationError("mask_frac_range must satisfy 0 <= min <= max <= 1")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ConfigurationError("chunk_size must be positive")

    @property
    def masks(self):
        return "Mask" in self.mode

    @property
    def shuffle(self):
        return self.mode.split("-")[0] if self.mode.split("-")[0] in ("RS", "LS", "GS") else None


@dataclass(frozen=True)
class SyntheticTask:
    id: str
    task_type: str
    question: tuple
    answer: tuple
    video: FrameSequence
    distractors: tuple
    options: tuple = ()
    # concept queried in a BinaryQA task
    subject: int | None = None

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ConfigurationError(f"unknown task type {self.task_type!r}")
        if self.task_type == "MCQ":
            if len(self.options) < 2:
                raise ConfigurationError("MCQ needs at least two options")
            if answer_concepts(self.answer)[0] not in self.options:
                raise ConfigurationError("MCQ answer must be one of the options")

    def prompt(self, video=None):
        v = self.video if video is None else video
        return [BOS] + v.tokens() + list(self.question) + [SEP]


def answer_concepts(tokens):
    return [int(t) for t in tokens if is_concept(int(t))]


# ------------------------------------------------------------ perturbations


def default_chunk_size(n_frames):
    return max(2, math.ceil(n_frames / 4))


def _chunks(n, size):
    return [list(range(i, min(i + size, n))) for i in range(0, n, size)]


def perturbation_plan(video, cfg):
    """``(masked_slots, order)`` drawn for ``video``; masks index input frames."""
    n, w = video.n_frames, video.width
    size = cfg.chunk_size or default_chunk_size(n)
    if cfg.shuffle in ("LS", "GS") and size > n:
        raise ConfigurationError(f"chunk_size {size} exceeds frame count {n}")
    rng = np.random.default_rng(cfg.seed)
    masked = [[] for _ in range(n)]
    if cfg.masks:
        lo, hi = cfg.mask_frac_range
        frac = rng.uniform(lo, hi)
        if cfg.whole_frame_mask:
            k = min(max(round(frac * n), math.ceil(lo * n)), math.floor(hi * n))
            for f in sorted(rng.choice(n, size=k, replace=False).tolist()):
                masked[f] = list(range(w))
        else:
            kmin, kmax = math.ceil(lo * w - 1e-12), math.floor(hi * w + 1e-12)
            if kmin > kmax:
                raise ConfigurationError(f"no slot count of a width-{w} frame lies in {cfg.mask_frac_range}")
            k = min(max(round(frac * w), kmin), kmax)
            for f in range(n):
                masked[f] = sorted(rng.choice(w, size=k, replace=False).tolist())
    order = list(range(n))
    if cfg.shuffle == "RS":
        order = rng.permutation(n).tolist()
    elif cfg.shuffle == "LS":
        order = [i for c in _chunks(n, size) for i in (np.asarray(c)[rng.permutation(len(c))]).tolist()]
    elif cfg.shuffle == "GS":
        chunks = _chunks(n, size)
        order = [i for j in rng.permutation(len(chunks)).tolist() for i in chunks[j]]
    return masked, order


def perturb(video, cfg):
    """Mask slots and/or shuffle frames; deterministic in ``(cfg.seed, video)``."""
    if cfg.mode == "None":
        return video
    masked, order = perturbation_plan(video, cfg)
    frames = [list(f) for f in video.frames]
    for f, slots in enumerate(masked):
        for s in slots:
            frames[f][s] = video.mask_symbol
    return FrameSequence(tuple(tuple(frames[i]) for i in order), video.mask_symbol)


# --------------------------------------------------------------- task maker


def _prior_weights():
    # Zipf-like language prior over concepts
    ranks = np.arange(1, len(CONCEPTS) + 1)
    w = 1.0 / ranks
    return w / w.sum()


def _draw_distractors(rng, exclude, n=6):
    pool = [c for c in CONCEPTS if c not in exclude]
    w = _prior_weights()[[CONCEPTS.index(c) for c in pool]]
    return tuple(int(c) for c in rng.choice(pool, size=n, replace=True, p=w / w.sum()))


def _place(rng, frames, concept, frame_ids):
    for f in frame_ids:
        frames[f][int(rng.integers(len(frames[f])))] = concept


def make_task(task_id, task_type, rng, n_frames=8, width=4, n_options=3):
    frames = [[int(b) for b in rng.choice(BACKGROUND, size=width)] for _ in range(n_frames)]
    half = n_frames // 2
    options, subject = (), None
    if task_type == "OpenEnded":
        a, b = (int(c) for c in rng.choice(CONCEPTS, size=2, replace=False))
        _place(rng, frames, a, range(half))
        _place(rng, frames, b, range(half, n_frames))
        question = (Q_OPEN,)
        answer = (FIRST, THE, a, THEN, THE, b, EOS)
        distractors = _draw_distractors(rng, {a, b})
    elif task_type == "MCQ":
        opts = [int(c) for c in rng.choice(CONCEPTS, size=n_options, replace=False)]
        a = opts[int(rng.integers(n_options))]
        _place(rng, frames, a, sorted(rng.choice(n_frames, size=half, replace=False).tolist()))
        options = tuple(opts)
        question = (Q_MCQ,) + options
        answer = (ANS, a, EOS)
        # the prior can only pick among the wrong options
        wrong = [o for o in opts if o != a]
        w = _prior_weights()[[CONCEPTS.index(o) for o in wrong]]
        distractors = tuple(int(c) for c in rng.choice(wrong, size=4, p=w / w.sum()))
    elif task_type == "BinaryQA":
        subject = int(rng.choice(CONCEPTS))
        present = bool(rng.integers(2))
        if present:
            _place(rng, frames, subject, sorted(rng.choice(n_frames, size=half, replace=False).tolist()))
        question = (Q_BIN, subject)
        answer = (YES if present else NO, EOS)
        distractors = (NO if present else YES,)
    else:
        raise ConfigurationError(f"unknown task type {task_type!r}")
    return SyntheticTask(task_id, task_type, question, answer,
                         FrameSequence(tuple(tuple(f) for f in frames)), distractors, options, subject)


def generate_tasks(n, seed, prefix="task", mix=TASK_TYPES):
    """``n`` tasks with ids ``f"{prefix}-{i:05d}"``; types cycle through ``mix``."""
    tasks = []
    for i in range(n):
        tid = f"{prefix}-{i:05d}"
        rng = make_rng(seed, "task", tid)
        tasks.append(make_task(tid, mix[i % len(mix)], rng))
    return tasks


# ---------------------------------------------------------------- responder


def language_prior(task, exclude=(), k=1):
    """Most frequent distractors (ties to the lowest id), skipping ``exclude``."""
    counts = Counter(t for t in task.distractors if t not in exclude)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return ranked[:k]


@dataclass
class ScriptedResponder:
    """Deterministic stand-in for the model being aligned.

    A concept counts as seen when at least ``ceil(visibility * n)`` of its
    ``n`` clean occurrences remain unmasked in the frame range the question
    depends on. Absence can only be asserted when more than half of all slots
    are visible. Unseen evidence is replaced by the language prior.
    """

    visibility: float = 0.75
    always_correct: bool = False
    calls: int = field(default=0, repr=False)

    def _seen(self, task, video, concept, frame_range):
        clean = sum(f.count(concept) for f in (task.video.frames[i] for i in frame_range))
        shown = sum(f.count(concept) for f in (video.frames[i] for i in frame_range))
        return clean > 0 and shown >= math.ceil(self.visibility * clean)

    def __call__(self, task, video):
        self.calls += 1
        if self.always_correct or video == task.video:
            return list(task.answer)
        n = video.n_frames
        if task.task_type == "OpenEnded":
            half = n // 2
            ans = list(task.answer)
            a, b = answer_concepts(task.answer)
            miss = []
            if not self._seen(task, video, a, range(half)):
                miss.append(2)
            if not self._seen(task, video, b, range(half, n)):
                miss.append(5)
            guesses = language_prior(task, k=len(miss))
            for pos, g in zip(miss, guesses):
                ans[pos] = g
            return ans
        if task.task_type == "MCQ":
            (a,) = answer_concepts(task.answer)
            if self._seen(task, video, a, range(n)):
                return list(task.answer)
            return [ANS, language_prior(task)[0], EOS]
        # BinaryQA
        if task.answer[0] == YES:
            if self._seen(task, video, task.subject, range(n)):
                return list(task.answer)
        else:
            visible = sum(s != video.mask_symbol for f in video.frames for s in f)
            if visible > 0.5 * n * video.width:
                return list(task.answer)
        return [task.distractors[0], EOS]


def scripted_responder(task, video, visibility=0.75):
    return ScriptedResponder(visibility=visibility)(task, video)


# ------------------------------------------------------------- verification


def _strip(tokens):
    out = [int(t) for t in tokens]
    while out and out[-1] in (EOS, PAD):
        out.pop()
    return out


def verify(task, answer):
    """``"correct"`` or ``"wrong"`` by exact matching on answer tokens."""
    ans = _strip(answer)
    if task.task_type == "BinaryQA":
        yn = [t for t in ans if t in (YES, NO)]
        ok = len(yn) == 1 and yn[0] == task.answer[0]
    elif task.task_type == "MCQ":
        ok = answer_concepts(ans) == answer_concepts(task.answer)
    else:
        got, want = answer_concepts(ans), answer_concepts(task.answer)
        ok = len(got) == len(want) and Counter(got) == Counter(want)
    return "correct" if ok else "wrong"


# ------------------------------------------------------------ pair building


def diff_spans(pos, neg):
    """Span entries marking where two responses differ (1-based, inclusive)."""
    pos, neg = list(pos), list(neg)
    if len(pos) == len(neg):
        runs, start = [], None
        for j, (a, b) in enumerate(zip(pos, neg)):
            if a != b and start is None:
                start = j
            elif a == b and start is not None:
                runs.append((start, j - 1))
                start = None
        if start is not None:
            runs.append((start, len(pos) - 1))
        return [SpanEntry(i + 1, (s + 1, e + 1), (s + 1, e + 1)) for i, (s, e) in enumerate(runs)]
    pre = 0
    while pre < min(len(pos), len(neg)) and pos[pre] == neg[pre]:
        pre += 1
    suf = 0
    while (suf < min(len(pos), len(neg)) - pre
           and pos[len(pos) - 1 - suf] == neg[len(neg) - 1 - suf]):
        suf += 1
    lo = pre
    hi_p, hi_n = len(pos) - suf, len(neg) - suf
    if hi_p <= lo or hi_n <= lo:
        # one side is a pure insertion; widen the phrase by one shared token
        if lo > 0:
            lo -= 1
        else:
            hi_p, hi_n = hi_p + 1, hi_n + 1
    return [SpanEntry(1, (lo + 1, hi_p), (lo + 1, hi_n))]


def _concept_key(task, pos, neg, spans):
    if task.task_type == "BinaryQA":
        subj = TOKEN_NAMES[task.subject]
        return make_concept_key(f"{subj} {TOKEN_NAMES[pos[0]]}", f"{subj} {TOKEN_NAMES[neg[0]]}")
    right = " ".join(detokenize(pos[s.pref[0] - 1:s.pref[1]]) for s in spans)
    wrong = " ".join(detokenize(neg[s.nonpref[0] - 1:s.nonpref[1]]) for s in spans)
    return make_concept_key(right, wrong)


def make_pair(task, wrong_answer):
    pos, neg = list(task.answer), [int(t) for t in wrong_answer]
    entries = diff_spans(pos, neg)
    return PreferencePair(id=task.id, prompt=task.prompt(), preferred=pos, non_preferred=neg,
                          spans=entries, concept_key=_concept_key(task, pos, neg, entries))


@dataclass
class BuildSummary:
    generated: int = 0
    discarded_correct: int = 0
    dedup_removed: int = 0
    kept: int = 0

    def as_dict(self):
        return {"generated": self.generated, "discarded_correct": self.discarded_correct,
                "dedup_removed": self.dedup_removed, "kept": self.kept}


def _respond(responder, task, video):
    from .toylm import ToyLM, greedy_decode
    if isinstance(responder, ToyLM):
        return greedy_decode(responder, task.prompt(video), max_len=len(task.answer) + 2)
    return responder(task, video)


def build_pairs(tasks, cfg, responder=None, dedup=True):
    """Perturb, respond, verify; keep wrong answers as non-preferred responses.

    Returns ``(pairs, summary)``. Each task gets its own perturbation seed
    derived from ``(cfg.seed, task.id)``; output is ordered by task id.
    """
    responder = responder if responder is not None else ScriptedResponder()
    summary = BuildSummary(generated=len(tasks))
    pairs = []
    for task in sorted(tasks, key=lambda t: t.id):
        video = perturb(task.video, replace(cfg, seed=derive_seed(cfg.seed, "perturb", task.id)))
        answer = _respond(responder, task, video)
        if verify(task, answer) == "correct":
            summary.discarded_correct += 1
            continue
        pair = make_pair(task, answer)
        if spans_mod.validate(pair):
            # unusable answer (e.g. identical tokens but judged wrong); treat as discarded
            summary.discarded_correct += 1
            continue
        pairs.append(pair)
    if dedup:
        before = len(pairs)
        pairs = spans_mod.dedup(pairs)
        summary.dedup_removed = before - len(pairs)
    summary.kept = len(pairs)
    return pairs, summary
