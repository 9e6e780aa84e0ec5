"""Span-annotated preference pairs.

Span ranges are stored 1-based and inclusive, ``1 <= start <= end <= len(y)``.
Phrase id 0 is reserved for tokens that belong to no span, and a phrase
keeps the same id on the preferred and the non-preferred response.

Dataset files are JSON lines, one pair per line::

    {"id": "t0007", "prompt_tokens": [...], "preferred_tokens": [...],
     "non_preferred_tokens": [...],
     "spans": [{"phrase_id": 1, "pref": [5, 5], "nonpref": [5, 5]}],
     "concept_key": ["dog", "cat"]}

``pref``/``nonpref`` are 1-based inclusive [start, end] ranges into the
preferred and non-preferred token lists respectively.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import FormatError, ValidationError

REFINED_METHODS = frozenset({"RRPO", "RRPO_RANK", "DPA", "DDPO"})

_FIELDS = ("id", "prompt_tokens", "preferred_tokens", "non_preferred_tokens",
           "spans", "concept_key")


@dataclass(frozen=True)
class SpanEntry:
    """One phrase: its id and its 1-based inclusive range on each side.

    An empty range marks a phrase missing from that side (always invalid).
    """

    phrase_id: int
    pref: tuple
    nonpref: tuple


@dataclass(frozen=True)
class PreferencePair:
    id: str
    prompt: tuple
    preferred: tuple
    non_preferred: tuple
    spans: tuple = ()
    concept_key: tuple = ()

    def __post_init__(self):
        # normalise containers so pairs hash and compare by value
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "preferred", tuple(int(t) for t in self.preferred))
        object.__setattr__(self, "non_preferred", tuple(int(t) for t in self.non_preferred))
        object.__setattr__(self, "spans", tuple(
            s if isinstance(s, SpanEntry)
            else SpanEntry(int(s["phrase_id"]), tuple(s["pref"] or ()), tuple(s["nonpref"] or ()))
            for s in self.spans))
        object.__setattr__(self, "concept_key", tuple(self.concept_key))


def normalize_concept(text):
    return re.sub(r"\s+", " ", str(text).strip().lower())


def make_concept_key(correct, incorrect):
    return (normalize_concept(correct), normalize_concept(incorrect))


# -------------------------------------------------------------- validation


def _range_problems(rng, length, side, pid):
    s, e = rng
    if not (1 <= s <= e <= length):
        return [f"out of bounds: phrase {pid} {side} range [{s},{e}] for length {length}"]
    return []


def _overlaps(ranges):
    found = []
    ordered = sorted(ranges)
    for i, (s1, e1, p1) in enumerate(ordered):
        for s2, e2, p2 in ordered[i + 1:]:
            if s2 > e1:
                break
            found.append((p1, p2))
    return found


def validate(pair, method=None):
    """Return the list of violated invariants; an empty list means ok.

    Zero-span pairs are accepted unless ``method`` is one of the refined
    losses (RRPO, RRPO_RANK, DPA, DDPO).
    """
    return list(_validate(pair, None if method is None else method.upper()))


@lru_cache(maxsize=65536)
def _validate(pair, method):
    problems = []
    if not pair.preferred or not pair.non_preferred:
        problems.append("empty response")
    if tuple(pair.preferred) == tuple(pair.non_preferred):
        problems.append("identical responses")
    if not pair.prompt:
        problems.append("empty prompt")

    ids = [s.phrase_id for s in pair.spans]
    if any(i <= 0 for i in ids):
        problems.append("non-positive phrase id (0 is reserved for ignored tokens)")
    if len(set(ids)) != len(ids):
        problems.append("duplicate phrase id")

    n_pos, n_neg = len(pair.preferred), len(pair.non_preferred)
    pos_ranges, neg_ranges = [], []
    for s in pair.spans:
        if not s.pref or not s.nonpref:
            side = "preferred" if s.pref else "non-preferred"
            problems.append(f"unmatched phrase: {s.phrase_id} appears on the {side} side only")
            continue
        if len(s.pref) != 2 or len(s.nonpref) != 2:
            problems.append(f"malformed range for phrase {s.phrase_id}")
            continue
        p = _range_problems(s.pref, n_pos, "pref", s.phrase_id)
        q = _range_problems(s.nonpref, n_neg, "nonpref", s.phrase_id)
        problems += p + q
        if not p:
            pos_ranges.append((*s.pref, s.phrase_id))
        if not q:
            neg_ranges.append((*s.nonpref, s.phrase_id))
    for side, ranges in (("pref", pos_ranges), ("nonpref", neg_ranges)):
        for a, b in _overlaps(ranges):
            problems.append(f"overlap: phrases {a} and {b} on {side} side")

    if method in REFINED_METHODS and not pair.spans:
        problems.append(f"no spans: {method} needs at least one differing span")

    if pair.spans and not problems:
        outside_pos = [t for t, k in zip(pair.preferred, _phrase_ids(pos_ranges, n_pos)) if k == 0]
        outside_neg = [t for t, k in zip(pair.non_preferred, _phrase_ids(neg_ranges, n_neg)) if k == 0]
        if outside_pos != outside_neg:
            problems.append("structure mismatch: tokens outside spans differ")
    return tuple(problems)


def check(pair, method=None):
    """Raise :class:`ValidationError` listing every violation."""
    problems = validate(pair, method)
    if problems:
        raise ValidationError(f"pair {pair.id!r} is invalid: " + "; ".join(problems),
                              problems, pair_id=pair.id)
    return pair


def _phrase_ids(ranges, length):
    out = [0] * length
    for s, e, pid in ranges:
        for j in range(s - 1, e):
            out[j] = pid
    return out


def to_phrase_ids(pair):
    """Per-position phrase ids for (preferred, non_preferred); 0 outside spans."""
    check(pair)
    pos = _phrase_ids([(*s.pref, s.phrase_id) for s in pair.spans], len(pair.preferred))
    neg = _phrase_ids([(*s.nonpref, s.phrase_id) for s in pair.spans], len(pair.non_preferred))
    return pos, neg


@lru_cache(maxsize=65536)
def _masks(pair):
    pos, neg = to_phrase_ids(pair)
    out = ((np.asarray(pos) > 0).astype(np.float64), (np.asarray(neg) > 0).astype(np.float64))
    for m in out:
        m.flags.writeable = False
    return out


def span_mask(pair, side):
    """0/1 float mask of span membership over one response."""
    return _masks(pair)[0 if side == "preferred" else 1]


def span_slices(pair, side):
    """0-based half-open ``(lo, hi)`` per span, in span-table order."""
    key = "pref" if side == "preferred" else "nonpref"
    return [(getattr(s, key)[0] - 1, getattr(s, key)[1]) for s in pair.spans]


def dedup(pairs):
    """Keep the first pair for every distinct concept_key."""
    seen, out = set(), []
    for p in pairs:
        key = tuple(p.concept_key)
        if key in seen:
            continue
        seen.add(key)
        out.append(p)
    return out


# -------------------------------------------------------------------- I/O


def pair_to_record(pair):
    return {
        "id": pair.id,
        "prompt_tokens": list(pair.prompt),
        "preferred_tokens": list(pair.preferred),
        "non_preferred_tokens": list(pair.non_preferred),
        "spans": [{"phrase_id": s.phrase_id, "pref": list(s.pref), "nonpref": list(s.nonpref)}
                  for s in pair.spans],
        "concept_key": list(pair.concept_key),
    }


def pair_from_record(rec):
    if set(rec) != set(_FIELDS):
        raise FormatError(f"record fields {sorted(rec)} differ from {sorted(_FIELDS)}")
    for name in ("prompt_tokens", "preferred_tokens", "non_preferred_tokens"):
        if not all(isinstance(t, int) and not isinstance(t, bool) for t in rec[name]):
            raise FormatError(f"{name} must contain integer token ids")
    return PreferencePair(
        id=str(rec["id"]),
        prompt=rec["prompt_tokens"],
        preferred=rec["preferred_tokens"],
        non_preferred=rec["non_preferred_tokens"],
        spans=[SpanEntry(int(s["phrase_id"]), tuple(s["pref"] or ()), tuple(s["nonpref"] or ()))
               for s in rec["spans"]],
        concept_key=tuple(rec["concept_key"]),
    )


def dumps_pair(pair):
    return json.dumps(pair_to_record(pair), ensure_ascii=False, separators=(",", ":"))


def write_dataset(pairs, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(dumps_pair(p) + "\n")


def read_dataset(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            pairs.append(pair_from_record(rec))
    return pairs


def dataset_hash(pairs):
    h = hashlib.sha256()
    for p in pairs:
        h.update(dumps_pair(p).encode("utf-8") + b"\n")
    return h.hexdigest()


@dataclass
class DatasetReport:
    """Per-pair validation diagnostics for a whole dataset."""

    problems: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.problems


def validate_dataset(pairs, method=None):
    report = DatasetReport()
    for p in pairs:
        found = validate(p, method)
        if found:
            report.problems[p.id] = found
    return report
