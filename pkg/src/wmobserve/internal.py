"""Key-holding observer: per-key calibration, argmax attribution, linkage, usage tallies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyTestSet, InsufficientNulls, SizeMismatch
from .registry import DetectorBank
from .toylm import TokenSeq

UNATTRIBUTED = -1
MIN_NULLS = 100


class Link(str, Enum):
    LINKED = "LINKED"
    UNLINKED = "UNLINKED"
    UNDECIDED = "UNDECIDED"


@dataclass(frozen=True)
class CalibrationTable:
    thresholds: tuple[float, ...]
    target_fpr: float
    null_sample_count: int
    calibration_fpr: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.thresholds)


@dataclass
class AttributionReport:
    n_entities: int
    samples_per_entity: int
    top1_tpr_at_fpr: float
    confusion: np.ndarray
    unattributed: np.ndarray
    per_key_fpr: list[float] = field(default_factory=list)
    misattribution_rate: float = 0.0
    argmax_accuracy: float = 0.0

    @property
    def unattributed_count(self) -> int:
        return int(self.unattributed.sum())

    def to_dict(self) -> dict:
        return {
            "n_entities": self.n_entities,
            "samples_per_entity": self.samples_per_entity,
            "top1_tpr_at_fpr": self.top1_tpr_at_fpr,
            "unattributed_count": self.unattributed_count,
            "misattribution_rate": self.misattribution_rate,
            "argmax_accuracy": self.argmax_accuracy,
            "per_key_fpr": list(self.per_key_fpr),
            "confusion": self.confusion.tolist(),
            "unattributed_per_entity": self.unattributed.tolist(),
        }


def order_statistic_rank(n: int, target_fpr: float) -> int:
    """1-based rank ``ceil((1 - alpha)(N + 1))`` clamped to N, in exact arithmetic."""
    alpha = Fraction(target_fpr).limit_denominator(10**12)
    return min(n, math.ceil((1 - alpha) * (n + 1)))


def threshold_from_nulls(null_scores: Sequence[float], target_fpr: float) -> float:
    """Conservative threshold: with the strict rule ``s > tau`` at most
    ``alpha * N`` calibration nulls are flagged, whatever their distribution."""
    if not 0.0 < target_fpr < 1.0:
        raise ValueError(f"target_fpr must lie in (0, 1), got {target_fpr}")
    s = np.sort(np.asarray(null_scores, dtype=np.float64))
    if s.size == 0:
        raise InsufficientNulls("no null scores")
    return float(s[order_statistic_rank(s.size, target_fpr) - 1])


def cross_key_nulls(scores: np.ndarray, labels: np.ndarray) -> list[np.ndarray]:
    """For each key, the scores of outputs produced by every other entity."""
    labels = np.asarray(labels)
    return [scores[labels != e, e] for e in range(scores.shape[1])]


def calibrate_from_scores(null_scores: Sequence[np.ndarray], target_fpr: float,
                          min_nulls: int = MIN_NULLS) -> CalibrationTable:
    counts = [len(s) for s in null_scores]
    if not counts or min(counts) < min_nulls:
        raise InsufficientNulls(f"need >= {min_nulls} null scores per key, got {counts}")
    taus = tuple(threshold_from_nulls(s, target_fpr) for s in null_scores)
    fprs = tuple(float(np.mean(np.asarray(s) > t)) for s, t in zip(null_scores, taus))
    return CalibrationTable(taus, target_fpr, min(counts), fprs)


def calibrate(bank: DetectorBank, null_tokens: np.ndarray, null_labels: np.ndarray,
              target_fpr: float, min_nulls: int = MIN_NULLS) -> CalibrationTable:
    """Per-key thresholds from outputs generated under the other keys."""
    scores = bank.score_matrix(null_tokens)
    return calibrate_from_scores(cross_key_nulls(scores, null_labels), target_fpr, min_nulls)


def score_all(bank: DetectorBank, x: TokenSeq) -> np.ndarray:
    return bank.score_matrix([x])[0]


def attribute(sv: Sequence[float]) -> int:
    """Argmax entity; ties go to the lowest entity id."""
    return int(np.argmax(np.asarray(sv, dtype=np.float64)))


def attribute_thresholded(sv: Sequence[float], cal: CalibrationTable) -> int:
    sv = np.asarray(sv, dtype=np.float64)
    if sv.shape[0] != len(cal.thresholds):
        raise SizeMismatch(f"{sv.shape[0]} scores vs {len(cal.thresholds)} thresholds")
    e = attribute(sv)
    return e if sv[e] > cal.thresholds[e] else UNATTRIBUTED


def attribute_matrix(scores: np.ndarray, cal: CalibrationTable) -> np.ndarray:
    """Row-wise ``attribute_thresholded``."""
    if scores.shape[1] != len(cal.thresholds):
        raise SizeMismatch(f"{scores.shape[1]} scores vs {len(cal.thresholds)} thresholds")
    best = np.argmax(scores, axis=1)
    taus = np.asarray(cal.thresholds)
    hit = scores[np.arange(len(best)), best] > taus[best]
    return np.where(hit, best, UNATTRIBUTED)


def evaluate_attribution(bank: DetectorBank, cal: CalibrationTable, tokens: np.ndarray,
                         labels: np.ndarray) -> AttributionReport:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyTestSet("no test outputs")
    n = len(bank)
    scores = bank.score_matrix(tokens)
    pred = attribute_matrix(scores, cal)
    confusion = np.zeros((n, n), dtype=np.int64)
    unattributed = np.zeros(n, dtype=np.int64)
    for y, p in zip(labels, pred):
        if p == UNATTRIBUTED:
            unattributed[y] += 1
        else:
            confusion[y, p] += 1
    taus = np.asarray(cal.thresholds)
    per_key_fpr = [float(np.mean(s > taus[e])) if len(s) else 0.0
                   for e, s in enumerate(cross_key_nulls(scores, labels))]
    per_entity = np.bincount(labels, minlength=n)
    return AttributionReport(
        n_entities=n,
        samples_per_entity=int(per_entity.max()),
        top1_tpr_at_fpr=float(np.mean(pred == labels)),
        confusion=confusion,
        unattributed=unattributed,
        per_key_fpr=per_key_fpr,
        misattribution_rate=float(np.mean((pred != labels) & (pred != UNATTRIBUTED))),
        argmax_accuracy=float(np.mean(np.argmax(scores, axis=1) == labels)),
    )


def link(x_i: TokenSeq, x_j: TokenSeq, bank: DetectorBank, cal: CalibrationTable) -> Link:
    a, b = attribute_matrix(bank.score_matrix([x_i, x_j]), cal)
    if a == UNATTRIBUTED or b == UNATTRIBUTED:
        return Link.UNDECIDED
    return Link.LINKED if a == b else Link.UNLINKED


@dataclass
class UsageTable:
    """Thresholded attribution counts; column ``n`` holds UNATTRIBUTED."""

    bucket_starts: list[float]
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_entity(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def monitor_usage(stream: Iterable[tuple[float, TokenSeq]], bank: DetectorBank, cal: CalibrationTable,
                  bucket: float, start: float | None = None, end: float | None = None) -> UsageTable:
    """Tally attributions per entity per time bucket of width ``bucket``.

    Buckets are aligned at ``start`` (default: the earliest timestamp). When
    both ``start`` and ``end`` are given every bucket in range is present,
    even if empty.
    """
    if not bucket > 0:
        raise ValueError("bucket width must be positive")
    items = list(stream)
    n = len(bank)
    if not items and (start is None or end is None):
        return UsageTable([], np.zeros((0, n + 1), dtype=np.int64))
    times = np.array([t for t, _ in items], dtype=np.float64)
    origin = float(start) if start is not None else float(times.min())
    idx = np.floor((times - origin) / bucket).astype(np.int64)
    n_buckets = int(idx.max()) + 1 if items else 0
    if end is not None:
        n_buckets = max(n_buckets, int(math.ceil((end - origin) / bucket)))
    if items and idx.min() < 0:
        raise ValueError("timestamp before start")
    counts = np.zeros((n_buckets, n + 1), dtype=np.int64)
    if items:
        pred = attribute_matrix(bank.score_matrix([x for _, x in items]), cal)
        cols = np.where(pred == UNATTRIBUTED, n, pred)
        np.add.at(counts, (idx, cols), 1)
    return UsageTable([origin + b * bucket for b in range(n_buckets)], counts)
