"""RTTM timelines, hypothesis construction, and collar-aware DER scoring.

All interval arithmetic runs on an integer 0.1 ms grid, so set operations are
exact and the hand-computable cases come out bit-for-bit.

Scoring excludes a collar around each point where the reference switches from
one speaker to another, and (by default) any region where reference speakers
overlap. Speech onsets and offsets get no collar: there is no speaker
transition there to forgive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.optimize

from .errors import FormatError, InvalidInputError
from .features import SadMark

UNITS_PER_S = 10000  # 0.1 ms grid
DEFAULT_COLLAR_S = 0.25


class TimelineEntry(NamedTuple):
    conversation_id: str
    start_s: float
    end_s: float
    speaker: str


@dataclass(frozen=True)
class DerResult:
    scored_time_s: float
    speaker_error_time_s: float
    missed_time_s: float
    false_alarm_time_s: float
    der: float


def _q(t: float) -> int:
    return int(round(t * UNITS_PER_S))


# ------------------------------------------------------- interval set algebra
# intervals are sorted disjoint half-open [a, b) pairs on the integer grid

def _merge(intervals: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for a, b in sorted(intervals):
        if b <= a:
            continue
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def _intersect(xs: list[tuple[int, int]], ys: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    i = j = 0
    while i < len(xs) and j < len(ys):
        a = max(xs[i][0], ys[j][0])
        b = min(xs[i][1], ys[j][1])
        if a < b:
            out.append((a, b))
        if xs[i][1] <= ys[j][1]:
            i += 1
        else:
            j += 1
    return out


def _subtract(xs: list[tuple[int, int]], ys: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    j = 0
    for a, b in xs:
        cur = a
        while j < len(ys) and ys[j][1] <= cur:
            j += 1
        k = j
        while k < len(ys) and ys[k][0] < b:
            if ys[k][0] > cur:
                out.append((cur, ys[k][0]))
            cur = max(cur, ys[k][1])
            k += 1
        if cur < b:
            out.append((cur, b))
    return out


def _total(xs: list[tuple[int, int]]) -> int:
    return sum(b - a for a, b in xs)


# ------------------------------------------------------------------ timelines

def _validate_entries(entries: Sequence[TimelineEntry], what: str) -> str:
    if not entries:
        raise InvalidInputError(f"{what} timeline is empty")
    conv = entries[0].conversation_id
    for e in entries:
        if e.conversation_id != conv:
            raise InvalidInputError(
                f"{what} timeline mixes conversations {conv!r} and {e.conversation_id!r}")
        if not e.end_s > e.start_s:
            raise InvalidInputError(f"{what} entry {e} has end <= start")
    return conv


def _by_speaker(entries: Sequence[TimelineEntry]) -> dict[str, list[tuple[int, int]]]:
    out: dict[str, list[tuple[int, int]]] = {}
    for e in entries:
        out.setdefault(e.speaker, []).append((_q(e.start_s), _q(e.end_s)))
    return {s: _merge(iv) for s, iv in sorted(out.items())}


def _overlap_regions(per_speaker: Mapping[str, list[tuple[int, int]]]) -> list[tuple[int, int]]:
    bounds: list[tuple[int, int]] = []  # (point, +1/-1)
    for ivs in per_speaker.values():
        for a, b in ivs:
            bounds.append((a, 1))
            bounds.append((b, -1))
    bounds.sort()
    out, depth, start = [], 0, 0
    for p, d in bounds:
        was = depth
        depth += d
        if was < 2 <= depth:
            start = p
        elif was >= 2 > depth:
            out.append((start, p))
    return _merge(out)


def _transition_points(per_speaker: Mapping[str, list[tuple[int, int]]]) -> list[int]:
    points = sorted({p for ivs in per_speaker.values() for iv in ivs for p in iv})
    out = []
    for p in points:
        before = {s for s, ivs in per_speaker.items() if any(a < p <= b for a, b in ivs)}
        after = {s for s, ivs in per_speaker.items() if any(a <= p < b for a, b in ivs)}
        if before and after and before != after:
            out.append(p)
    return out


def _elements(per_ref, per_hyp, scored):
    """Decompose the scored regions into runs of constant (ref set, hyp set)."""
    ref_in = {s: _intersect(iv, scored) for s, iv in per_ref.items()}
    hyp_in = {s: _intersect(iv, scored) for s, iv in per_hyp.items()}
    points = sorted({p for iv in list(ref_in.values()) + list(hyp_in.values()) + [scored]
                     for ab in iv for p in ab})
    out = []
    for a, b in zip(points, points[1:]):
        mid_containing = [(a, b)]
        if not _intersect([(a, b)], scored):
            continue
        r = frozenset(s for s, iv in ref_in.items() if _intersect(iv, mid_containing))
        h = frozenset(s for s, iv in hyp_in.items() if _intersect(iv, mid_containing))
        out.append((b - a, r, h))
    return out


def optimal_speaker_mapping(
    ref: Sequence[TimelineEntry],
    hyp: Sequence[TimelineEntry],
    scored_regions: Sequence[tuple[float, float]],
) -> dict[str, str]:
    """One-to-one hypothesis-label to reference-speaker map maximizing the
    total overlap inside the scored regions; labels with no useful overlap
    stay unmapped."""
    scored = _merge([(_q(a), _q(b)) for a, b in scored_regions])
    return _mapping_on_grid(_by_speaker(ref), _by_speaker(hyp), scored)


def _mapping_on_grid(per_ref, per_hyp, scored) -> dict[str, str]:
    ref_names = sorted(per_ref)
    hyp_names = sorted(per_hyp)
    overlap = np.zeros((len(ref_names), len(hyp_names)))
    for i, r in enumerate(ref_names):
        for j, h in enumerate(hyp_names):
            overlap[i, j] = _total(_intersect(_intersect(per_ref[r], per_hyp[h]), scored))
    if overlap.size == 0:
        return {}
    rows, cols = scipy.optimize.linear_sum_assignment(overlap, maximize=True)
    return {hyp_names[j]: ref_names[i]
            for i, j in zip(rows, cols) if overlap[i, j] > 0}


def compute_der(
    ref: Sequence[TimelineEntry],
    hyp: Sequence[TimelineEntry],
    sad: Sequence[SadMark],
    collar_s: float = DEFAULT_COLLAR_S,
    ignore_overlap: bool = True,
) -> DerResult:
    """Score one conversation's hypothesis against its reference.

    scored regions = SAD speech, minus a +-collar_s window around every
    internal speaker transition, minus reference overlap when ignore_overlap.
    miss is scored reference time with no hypothesis, false alarm is scored
    hypothesis time outside reference speech, and speaker error is scored time
    where the optimally mapped labels disagree. The denominator is the scored
    reference speech time.
    """
    conv = _validate_entries(ref, "reference")
    if hyp:
        hconv = _validate_entries(hyp, "hypothesis")
        if hconv != conv:
            raise InvalidInputError(f"hypothesis is for {hconv!r}, reference for {conv!r}")
    if collar_s < 0:
        raise InvalidInputError("collar must be nonnegative")
    if not sad:
        raise InvalidInputError("no speech activity marks given")
    for m in sad:
        if m.conversation_id != conv:
            raise InvalidInputError(f"speech mark for {m.conversation_id!r}, reference for {conv!r}")
    speech = _merge([(_q(m.start_s), _q(m.end_s)) for m in sad])

    per_ref = _by_speaker(ref)
    per_hyp = _by_speaker(hyp) if hyp else {}
    qc = _q(collar_s)
    collars = _merge([(p - qc, p + qc) for p in _transition_points(per_ref)])
    scored = _subtract(speech, collars)
    if ignore_overlap:
        scored = _subtract(scored, _overlap_regions(per_ref))

    elements = _elements(per_ref, per_hyp, scored)
    scored_time = sum(n for n, r, _ in elements if r)
    if scored_time == 0:
        raise InvalidInputError(f"{conv}: no scorable reference speech")
    mapping = _mapping_on_grid(per_ref, per_hyp, scored)

    miss = fa = err = 0
    for n, r, h in elements:
        if r and not h:
            miss += n
        elif h and not r:
            fa += n
        elif r and h and not any(mapping.get(lab) in r for lab in h):
            err += n
    u = UNITS_PER_S
    # der is the ratio of the reported second-valued components, so the
    # identity der * scored == miss + fa + err survives the unit conversion
    return DerResult(scored_time / u, err / u, miss / u, fa / u,
                     (miss / u + fa / u + err / u) / (scored_time / u))


# ------------------------------------------------------ hypothesis timelines

def build_hypothesis(segments, labels, conversation_id=None, prefix="spk") -> list[TimelineEntry]:
    """Turn labeled (possibly overlapping) segments into a hard timeline.

    Consecutive same-label segments merge when they touch or overlap. Where
    two different-label segments overlap, each keeps its half up to the
    overlap midpoint. Nested different-label segments have no midpoint rule
    and are rejected.
    """
    segments = list(segments)
    labels = list(labels)
    if len(segments) != len(labels):
        raise InvalidInputError(f"{len(segments)} segments but {len(labels)} labels")
    if not segments:
        return []
    conv = conversation_id if conversation_id is not None else segments[0].conversation_id
    order = sorted(range(len(segments)), key=lambda i: (segments[i].start_s, segments[i].end_s))
    out: list[TimelineEntry] = []
    cur_start = segments[order[0]].start_s
    cur_end = segments[order[0]].end_s
    cur_label = labels[order[0]]
    for i in order[1:]:
        seg, lab = segments[i], labels[i]
        if lab == cur_label and seg.start_s <= cur_end:
            cur_end = max(cur_end, seg.end_s)
            continue
        if seg.start_s < cur_end:  # different labels fighting over a region
            if seg.end_s < cur_end:
                raise InvalidInputError(
                    f"segment [{seg.start_s}, {seg.end_s}] nested inside [{cur_start}, {cur_end}] "
                    "with a different label")
            boundary = (seg.start_s + cur_end) / 2.0
        else:
            boundary = cur_end
        out.append(TimelineEntry(conv, cur_start, boundary, f"{prefix}{cur_label}"))
        cur_start = boundary if seg.start_s < cur_end else seg.start_s
        cur_end = seg.end_s
        cur_label = lab
    out.append(TimelineEntry(conv, cur_start, cur_end, f"{prefix}{cur_label}"))
    return out


def speaker_counts(entries: Sequence[TimelineEntry]) -> dict[str, int]:
    out: dict[str, set] = {}
    for e in entries:
        out.setdefault(e.conversation_id, set()).add(e.speaker)
    return {c: len(s) for c, s in sorted(out.items())}


def by_conversation(entries: Sequence[TimelineEntry]) -> dict[str, list[TimelineEntry]]:
    out: dict[str, list[TimelineEntry]] = {}
    for e in entries:
        out.setdefault(e.conversation_id, []).append(e)
    return dict(sorted(out.items()))


# -------------------------------------------------------------------- RTTM io

def write_rttm(entries: Sequence[TimelineEntry], path) -> None:
    """Speaker lines sorted by conversation, onset, speaker; times to 1 ms."""
    rows = sorted(entries, key=lambda e: (e.conversation_id, e.start_s, e.end_s, e.speaker))
    with open(path, "w", encoding="utf-8") as fh:
        for e in rows:
            fh.write(f"SPEAKER {e.conversation_id} 1 {e.start_s:.3f} "
                     f"{e.end_s - e.start_s:.3f} <NA> <NA> {e.speaker} <NA> <NA>\n")


def read_rttm(path) -> list[TimelineEntry]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith(";;"):
                continue
            fields = line.split()
            if len(fields) != 10 or fields[0] != "SPEAKER":
                raise FormatError(f"{path}:{ln}: expected a 10-field SPEAKER line")
            try:
                tbeg, tdur = float(fields[3]), float(fields[4])
            except ValueError:
                raise FormatError(f"{path}:{ln}: non-numeric time fields") from None
            if tdur <= 0:
                raise FormatError(f"{path}:{ln}: duration must be positive, got {fields[4]}")
            out.append(TimelineEntry(fields[1], tbeg, tbeg + tdur, fields[7]))
    return out


def write_speaker_counts(path, counts: Mapping[str, int]) -> None:
    """Plain "conversation count" lines, sorted by conversation id."""
    with open(path, "w", encoding="utf-8") as fh:
        for conv in sorted(counts):
            k = counts[conv]
            if k < 1:
                raise InvalidInputError(f"speaker count for {conv!r} must be positive, got {k}")
            fh.write(f"{conv} {k}\n")


def read_speaker_counts(path) -> dict[str, int]:
    out: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2 or not fields[1].isdigit() or int(fields[1]) < 1:
                raise FormatError(f"{path}:{ln}: expected 'conversation count'")
            if fields[0] in out:
                raise FormatError(f"{path}:{ln}: duplicate conversation {fields[0]!r}")
            out[fields[0]] = int(fields[1])
    return out


# --------------------------------------------------------------------- report

def der_report(results: Mapping[str, DerResult],
               counts: Mapping[str, int] | None = None) -> str:
    """Plain-text per-conversation table, a time-weighted total, and (when
    speaker counts are given) a breakdown over 2, 3, and 4-or-more speakers."""
    if not results:
        raise InvalidInputError("no results to report")

    def weighted(rs: list[DerResult]) -> DerResult:
        scored = sum(r.scored_time_s for r in rs)
        err = sum(r.speaker_error_time_s for r in rs)
        miss = sum(r.missed_time_s for r in rs)
        fa = sum(r.false_alarm_time_s for r in rs)
        return DerResult(scored, err, miss, fa, (err + miss + fa) / scored)

    def fmt(name: str, r: DerResult) -> str:
        return (f"{name} {r.scored_time_s:.3f} {r.missed_time_s:.3f} "
                f"{r.false_alarm_time_s:.3f} {r.speaker_error_time_s:.3f} {r.der:.4f}")

    lines = ["conversation scored miss fa spkerr der"]
    for conv in sorted(results):
        lines.append(fmt(conv, results[conv]))
    lines.append(fmt("TOTAL", weighted(list(results.values()))))
    if counts is not None:
        groups = {"2spk": [], "3spk": [], "4+spk": []}
        for conv in sorted(results):
            k = counts.get(conv)
            if k is None:
                raise InvalidInputError(f"no speaker count for conversation {conv!r}")
            if k >= 4:
                groups["4+spk"].append(results[conv])
            elif k in (2, 3):
                groups[f"{k}spk"].append(results[conv])
        for name, rs in groups.items():
            if rs:
                lines.append(fmt(f"GROUP-{name}", weighted(rs)))
    return "\n".join(lines) + "\n"
