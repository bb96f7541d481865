"""Multi-talker scoring: word edit counts, cpWER and collar-aware DER.

cpWER concatenates nothing in practice: each reference speaker is aligned
against one hypothesis stream under the error-minimizing one-to-one
assignment (the smaller side padded with empty streams), and the summed
errors are divided by the total reference words.

DER follows time-weighted scoring: at every instant the reference may have
any number of active speakers (overlap is scored fully), a collar of
+/- `collar` seconds around every merged reference segment boundary is
excluded, and with `ignore_edges` the spans before the first and after the
last reference speech are excluded as well.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, UndefinedRateError

Segment = tuple[str, float, float]  # (speaker_label, onset_s, offset_s)
SegmentSet = list


@dataclass
class ErrorCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def total(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        if self.ref_words == 0:
            raise UndefinedRateError("error rate undefined with zero reference words")
        return self.total / self.ref_words

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_words + other.ref_words,
        )


_WORD_JUNK = re.compile(r"[^a-z0-9']+")


def normalize_words(words: Sequence[str]) -> list[str]:
    """Lowercase, strip everything but [a-z0-9'], drop words left empty."""
    out = []
    for w in words:
        w = _WORD_JUNK.sub("", w.lower())
        if w:
            out.append(w)
    return out


def edit_ops(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> ErrorCounts:
    """Minimal unit-cost alignment counts; ties prefer substitution over a
    (deletion, insertion) pair."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (ri != hyp[j - 1])
            cost[i, j] = min(diag, cost[i - 1, j] + 1, cost[i, j - 1] + 1)

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorCounts(subs, dels, ins, n)


@dataclass
class CpwerResult:
    rate: float
    assignment: list[tuple[str | None, int | None]]
    counts: ErrorCounts


def cpwer(refs: Mapping[str, Sequence[Hashable]], hyps: Sequence[Sequence[Hashable]]) -> CpwerResult:
    """Minimum-permutation WER across speakers.

    refs maps speaker labels to reference sequences; hyps is an unlabeled
    list of hypothesis streams. The smaller side is padded with empty
    streams. Pair cost is the total edit errors, which is additive, so the
    Hungarian assignment attains the exhaustive-permutation minimum.
    """
    ref_names = list(refs.keys())
    total_ref = sum(len(refs[k]) for k in ref_names)
    if not ref_names or total_ref == 0:
        raise UndefinedRateError("cpwer undefined: no reference words")

    n = max(len(ref_names), len(hyps))
    ref_seqs = [list(refs[k]) for k in ref_names] + [[] for _ in range(n - len(ref_names))]
    hyp_seqs = [list(h) for h in hyps] + [[] for _ in range(n - len(hyps))]

    pair = [[edit_ops(r, h) for h in hyp_seqs] for r in ref_seqs]
    cost = np.array([[pair[i][j].total for j in range(n)] for i in range(n)], dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)

    counts = ErrorCounts(ref_words=total_ref)
    assignment: list[tuple[str | None, int | None]] = []
    for i, j in zip(rows, cols):
        c = pair[i][j]
        counts.substitutions += c.substitutions
        counts.deletions += c.deletions
        counts.insertions += c.insertions
        name = ref_names[i] if i < len(ref_names) else None
        hyp_idx = int(j) if j < len(hyps) else None
        if name is not None or hyp_idx is not None:
            assignment.append((name, hyp_idx))
    return CpwerResult(counts.total / total_ref, assignment, counts)


@dataclass
class DerResult:
    rate: float
    miss: float
    false_alarm: float
    confusion: float
    scored_ref_time: float
    mapping: list[tuple[str, str]]


def _merge_by_speaker(segments: Sequence[Segment]) -> dict[str, list[tuple[float, float]]]:
    by_spk: dict[str, list[tuple[float, float]]] = {}
    for spk, on, off in segments:
        if off <= on:
            raise ContractError(f"segment for {spk!r} has offset {off} <= onset {on}")
        by_spk.setdefault(spk, []).append((float(on), float(off)))
    for spk, segs in by_spk.items():
        segs.sort()
        merged = [segs[0]]
        for on, off in segs[1:]:
            if on <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], off))
            else:
                merged.append((on, off))
        by_spk[spk] = merged
    return by_spk


def der(ref: Sequence[Segment], hyp: Sequence[Segment], collar: float = 0.0,
        ignore_edges: bool = False) -> DerResult:
    """Time-weighted diarization error rate.

    Returns (rate, miss, false_alarm, confusion) as fractions of the scored
    reference speech time. The reference-to-hypothesis speaker mapping
    maximizes co-active scored time; it is solved exhaustively for up to 8
    speakers per side and cross-checked against the Hungarian solution.
    """
    ref_by = _merge_by_speaker(ref)
    hyp_by = _merge_by_speaker(hyp)
    if not ref_by:
        raise UndefinedRateError("der undefined: empty reference")

    ref_spks = sorted(ref_by)
    hyp_spks = sorted(hyp_by)

    excluded: list[tuple[float, float]] = []
    if collar > 0.0:
        for segs in ref_by.values():
            for on, off in segs:
                excluded.append((on - collar, on + collar))
                excluded.append((off - collar, off + collar))
    first_on = min(s[0][0] for s in ref_by.values())
    last_off = max(s[-1][1] for s in ref_by.values())

    points: set[float] = set()
    for segs in list(ref_by.values()) + list(hyp_by.values()):
        for on, off in segs:
            points.update((on, off))
    for on, off in excluded:
        points.update((on, off))
    points.update((first_on, last_off))
    grid = sorted(points)

    def active(by: dict[str, list[tuple[float, float]]], spk: str, a: float, b: float) -> bool:
        return any(on <= a and b <= off for on, off in by[spk])

    n_r, n_h = len(ref_spks), len(hyp_spks)
    overlap = np.zeros((n_r, n_h))
    cells: list[tuple[float, np.ndarray, np.ndarray]] = []
    for a, b in zip(grid, grid[1:]):
        if b <= a:
            continue
        mid_a, mid_b = a, b
        if ignore_edges and (mid_b <= first_on or mid_a >= last_off):
            continue
        if any(mid_a >= eon and mid_b <= eoff for eon, eoff in excluded):
            continue
        # grid construction guarantees each cell is fully in or out of every span
        r_act = np.array([active(ref_by, s, a, b) for s in ref_spks])
        h_act = np.array([active(hyp_by, s, a, b) for s in hyp_spks])
        if not r_act.any() and not h_act.any():
            continue
        dur = b - a
        cells.append((dur, r_act, h_act))
        overlap += dur * np.outer(r_act, h_act)

    scored_ref = sum(dur * r.sum() for dur, r, _ in cells)
    if scored_ref <= 0.0:
        raise UndefinedRateError("der undefined: zero scored reference time")

    rows, cols = linear_sum_assignment(-overlap)
    hung_total = overlap[rows, cols].sum()
    mapping_pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if overlap[i, j] > 0.0]

    if n_r <= 8 and n_h <= 8:
        best, best_pairs = _exhaustive_mapping(overlap)
        if not np.isclose(best, hung_total):
            raise ContractError(
                f"speaker-mapping cross-check failed: exhaustive {best} vs hungarian {hung_total}"
            )
        mapping_pairs = best_pairs

    mapped = {(i, j): True for i, j in mapping_pairs}
    miss = fa = conf = 0.0
    for dur, r_act, h_act in cells:
        n_ref_t = int(r_act.sum())
        n_hyp_t = int(h_act.sum())
        n_corr = sum(1 for i, j in mapped if r_act[i] and h_act[j])
        miss += dur * max(0, n_ref_t - n_hyp_t)
        fa += dur * max(0, n_hyp_t - n_ref_t)
        conf += dur * (min(n_ref_t, n_hyp_t) - n_corr)

    mapping = [(ref_spks[i], hyp_spks[j]) for i, j in mapping_pairs]
    return DerResult(
        rate=(miss + fa + conf) / scored_ref,
        miss=miss / scored_ref,
        false_alarm=fa / scored_ref,
        confusion=conf / scored_ref,
        scored_ref_time=scored_ref,
        mapping=mapping,
    )


def _exhaustive_mapping(overlap: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    n_r, n_h = overlap.shape
    best = -1.0
    best_pairs: list[tuple[int, int]] = []
    if n_r <= n_h:
        for perm in itertools.permutations(range(n_h), n_r):
            total = sum(overlap[i, j] for i, j in enumerate(perm))
            if total > best:
                best = total
                best_pairs = [(i, j) for i, j in enumerate(perm) if overlap[i, j] > 0.0]
    else:
        for perm in itertools.permutations(range(n_r), n_h):
            total = sum(overlap[i, j] for j, i in enumerate(perm))
            if total > best:
                best = total
                best_pairs = [(i, j) for j, i in enumerate(perm) if overlap[i, j] > 0.0]
    return best, best_pairs
