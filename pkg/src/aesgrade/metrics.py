"""Agreement metrics over run records: confusion matrix, QWK, exact match."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from .corpus import SCORE_LEVELS

K = len(SCORE_LEVELS)


class MetricsError(ValueError):
    pass


class DegenerateKappaWarning(UserWarning):
    """Expected disagreement is zero, so kappa is undefined; 1.0 is reported."""


@dataclass(frozen=True)
class ConfusionMatrix:
    """6x6 counts, rows = human score, columns = predicted score (both 1-based levels)."""

    counts: np.ndarray
    n_failed: int = 0

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts)
        if counts.shape != (K, K):
            raise MetricsError(f"confusion matrix must be {K}x{K}, got {counts.shape}")
        if (counts < 0).any() or not np.all(np.equal(np.mod(counts, 1), 0)):
            raise MetricsError("confusion counts must be non-negative integers")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))

    def cell(self, human: int, predicted: int) -> int:
        return int(self.counts[human - 1, predicted - 1])

    @classmethod
    def from_pairs(cls, human: Iterable[int], predicted: Iterable[int], n_failed: int = 0) -> "ConfusionMatrix":
        counts = np.zeros((K, K), dtype=np.int64)
        for h, p in zip(human, predicted, strict=True):
            if h not in SCORE_LEVELS or p not in SCORE_LEVELS:
                raise MetricsError(f"score pair ({h}, {p}) outside 1..6")
            counts[h - 1, p - 1] += 1
        return cls(counts, n_failed)


def confusion_matrix(records: Sequence) -> ConfusionMatrix:
    """Tally completed run records; failed ones are excluded and counted."""
    ok = [r for r in records if r.status == "ok"]
    failed = len(records) - len(ok)
    if not ok:
        raise MetricsError(f"no completed records to score ({failed} failed)")
    return ConfusionMatrix.from_pairs([r.human_score for r in ok], [r.predicted_score for r in ok], failed)


def _require_nonempty(m: ConfusionMatrix) -> None:
    if m.n < 1:
        raise MetricsError("confusion matrix is empty")


def quadratic_weights(k: int = K) -> np.ndarray:
    idx = np.arange(k)
    return (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2


def qwk_detail(m: ConfusionMatrix) -> tuple[float, bool]:
    """Return ``(kappa, degenerate)``.

    ``degenerate`` is set when expected disagreement is zero, i.e. both raters
    used one and the same category throughout; kappa is then reported as 1.0.
    """
    _require_nonempty(m)
    observed = m.counts.astype(float)
    n = observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    w = quadratic_weights()
    denom = float((w * expected).sum())
    if denom == 0.0:
        return 1.0, True
    return 1.0 - float((w * observed).sum()) / denom, False


def qwk(m: ConfusionMatrix) -> float:
    value, degenerate = qwk_detail(m)
    if degenerate:
        warnings.warn("expected disagreement is zero; reporting QWK = 1.0", DegenerateKappaWarning,
                      stacklevel=2)
    return value


def round_half_up(value: float, places: int) -> Decimal:
    q = Decimal(1).scaleb(-places)
    return Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP)


def exact_match(m: ConfusionMatrix) -> float:
    """Percentage of predictions equal to the human score, rounded half-up to 2 decimals."""
    _require_nonempty(m)
    return float(round_half_up(m.trace / m.n * 100.0, 2))


def format_pct(value: float | None, places: int) -> str:
    if value is None:
        return "n/a"
    return f"{round_half_up(value, places)}%"


@dataclass(frozen=True)
class LevelRow:
    level: int
    total: int
    correct: int

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.total * 100.0 if self.total else None

    def to_dict(self) -> dict:
        return {"level": self.level, "total": self.total, "correct": self.correct, "accuracy": self.accuracy}


def per_level_breakdown(m: ConfusionMatrix) -> list[LevelRow]:
    rows = m.counts.sum(axis=1)
    return [LevelRow(lv, int(rows[lv - 1]), m.cell(lv, lv)) for lv in SCORE_LEVELS]


def improvement_delta(before: float, after: float) -> float:
    """Relative change from ``before`` to ``after``, in percent."""
    if before == 0:
        raise ZeroDivisionError("baseline value is zero; relative improvement undefined")
    return (after - before) / before * 100.0


@dataclass(frozen=True)
class MetricsReport:
    architecture: str
    shot_mode: str
    qwk: float | None
    exact_match: float | None
    per_level: tuple[LevelRow, ...] = ()
    n: int = 0
    n_failed: int = 0
    qwk_degenerate: bool = False

    @property
    def condition(self) -> tuple[str, str]:
        return self.architecture, self.shot_mode

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "shot_mode": self.shot_mode,
            "qwk": self.qwk,
            "qwk_degenerate": self.qwk_degenerate,
            "exact_match": self.exact_match,
            "n": self.n,
            "n_failed": self.n_failed,
            "per_level": [r.to_dict() for r in self.per_level],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rows = tuple(LevelRow(int(r["level"]), int(r["total"]), int(r["correct"])) for r in d.get("per_level") or [])
        return cls(d["architecture"], d["shot_mode"], d.get("qwk"), d.get("exact_match"), rows,
                   int(d.get("n", sum(r.total for r in rows))), int(d.get("n_failed", 0)),
                   bool(d.get("qwk_degenerate", False)))


def compute_metrics(records: Sequence, architecture: str, shot_mode: str) -> MetricsReport:
    m = confusion_matrix(records)
    value, degenerate = qwk_detail(m)
    return MetricsReport(architecture, shot_mode, value, exact_match(m), tuple(per_level_breakdown(m)),
                         m.n, m.n_failed, degenerate)
