"""Survival data model and evaluation metrics.

Risk scores follow the convention that a *higher* score means an *earlier*
expected event. A pair ``(i, j)`` is comparable when ``i`` had an observed
event and ``j`` was still under observation afterwards (``t_j > t_i``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import (
    AllGridPointsDegenerate,
    EmptyGrid,
    LengthMismatch,
    NoComparablePairs,
    NoEvents,
)

__all__ = [
    "SurvivalRecord",
    "SurvivalDataset",
    "ConcordanceResult",
    "TdAucCurve",
    "KaplanMeierEstimate",
    "comparable_pairs",
    "concordance_index",
    "td_auc",
    "default_grid",
    "kaplan_meier",
]

STRICT = "STRICT"
HALF = "HALF"
TIE_POLICIES = (STRICT, HALF)


@dataclass(frozen=True)
class SurvivalRecord:
    event: bool
    time: float

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time <= 0:
            raise ValueError(f"survival time must be positive and finite, got {self.time!r}")


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Event indicators and observed times for ``N`` patients.

    Parameters
    ----------
    event : array of bool, shape (N,)
        True when the event (recurrence) was observed.
    time : array of float, shape (N,)
        Time to event when ``event`` is true, otherwise time under observation.
    """

    event: np.ndarray
    time: np.ndarray

    def __post_init__(self):
        event = np.asarray(self.event).astype(bool).ravel()
        time = np.asarray(self.time, dtype=np.float64).ravel()
        if event.shape != time.shape:
            raise LengthMismatch(f"{event.size} event flags but {time.size} times")
        if event.size < 1:
            raise ValueError("a survival dataset needs at least one record")
        if not np.all(np.isfinite(time)) or np.any(time <= 0):
            raise ValueError("survival times must be positive and finite")
        event.setflags(write=False)
        time.setflags(write=False)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "time", time)

    @classmethod
    def from_records(cls, records: Iterable[SurvivalRecord]) -> "SurvivalDataset":
        records = list(records)
        return cls([r.event for r in records], [r.time for r in records])

    def records(self) -> list[SurvivalRecord]:
        return [SurvivalRecord(bool(e), float(t)) for e, t in zip(self.event, self.time)]

    def subset(self, index) -> "SurvivalDataset":
        return SurvivalDataset(self.event[index], self.time[index])

    def __len__(self) -> int:
        return self.event.size

    def __eq__(self, other):
        if not isinstance(other, SurvivalDataset):
            return NotImplemented
        return np.array_equal(self.event, other.event) and np.array_equal(self.time, other.time)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())


@dataclass(frozen=True)
class ConcordanceResult:
    c_index: float
    num_comparable_pairs: int
    num_concordant: float


@dataclass(frozen=True)
class TdAucCurve:
    grid: np.ndarray
    auc_at: np.ndarray
    mean_auc: float
    skipped_times: list = field(default_factory=list)


@dataclass(frozen=True)
class KaplanMeierEstimate:
    """Right-continuous step function ``S(t)``; equals 1 before the first jump."""

    times: np.ndarray
    survival: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="right") - 1
        values = np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)
        return values if values.ndim else float(values)

    def left_limit(self, t):
        """``S(t-)``, the survival probability just before ``t``."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="left") - 1
        values = np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)
        return values if values.ndim else float(values)


def _check_scores(dataset: SurvivalDataset, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size != len(dataset):
        raise LengthMismatch(f"{scores.size} scores for {len(dataset)} patients")
    if not np.all(np.isfinite(scores)):
        raise ValueError("risk scores must be finite")
    return scores


def comparable_pairs(dataset: SurvivalDataset) -> list[tuple[int, int]]:
    """All ordered pairs ``(i, j)`` with ``event[i]`` and ``time[j] > time[i]``.

    Pairs are sorted by ``i`` then ``j``.
    """
    mask = dataset.event[:, None] & (dataset.time[None, :] > dataset.time[:, None])
    ii, jj = np.nonzero(mask)
    return list(zip(ii.tolist(), jj.tolist()))


def concordance_index(
    dataset: SurvivalDataset,
    scores: Sequence[float],
    tie_policy: str = HALF,
) -> ConcordanceResult:
    """Harrell-style concordance between risk scores and observed outcomes.

    Parameters
    ----------
    dataset : SurvivalDataset
    scores : array-like, shape (N,)
        Predicted risk; higher means earlier event.
    tie_policy : {"HALF", "STRICT"}
        ``STRICT`` credits a comparable pair only when ``o_i > o_j``.
        ``HALF`` additionally credits 0.5 when ``o_i == o_j``.

    Raises
    ------
    NoComparablePairs
        If no pair satisfies ``event[i]`` and ``time[j] > time[i]``.
    LengthMismatch
        If ``scores`` is not aligned with ``dataset``.
    """
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"unknown tie policy {tie_policy!r}")
    scores = _check_scores(dataset, scores)
    time = dataset.time
    events = np.flatnonzero(dataset.event)

    n_pairs = 0
    n_greater = 0
    n_tied = 0
    # blocks of event rows keep the boolean matrices bounded for large N
    for start in range(0, events.size, 512):
        rows = events[start:start + 512]
        later = time[None, :] > time[rows, None]
        diff = scores[rows, None] - scores[None, :]
        n_pairs += int(later.sum())
        n_greater += int((later & (diff > 0)).sum())
        n_tied += int((later & (diff == 0)).sum())

    if n_pairs == 0:
        raise NoComparablePairs("no comparable pairs: need an event followed by a longer observed time")
    concordant = n_greater + 0.5 * n_tied if tie_policy == HALF else float(n_greater)
    return ConcordanceResult(concordant / n_pairs, n_pairs, concordant)


def kaplan_meier(dataset: SurvivalDataset, target: str = "EVENT") -> KaplanMeierEstimate:
    """Product-limit estimate of the event (or censoring) survival function.

    With ``target="CENSORING"`` the roles of events and censorings are
    swapped, giving the censoring distribution used for IPCW.
    """
    if target not in ("EVENT", "CENSORING"):
        raise ValueError(f"unknown target {target!r}")
    event = dataset.event if target == "EVENT" else ~dataset.event
    uniq, inverse = np.unique(dataset.time, return_inverse=True)
    n_events = np.bincount(inverse, weights=event.astype(float), minlength=uniq.size)
    n_total = np.bincount(inverse, minlength=uniq.size)
    at_risk = n_total[::-1].cumsum()[::-1]
    factors = 1.0 - n_events / at_risk
    return KaplanMeierEstimate(uniq, np.cumprod(factors))


def default_grid(dataset: SurvivalDataset, n_points: int = 20) -> np.ndarray:
    """Equally spaced quantiles of observed times, kept strictly inside (min, max)."""
    levels = np.arange(1, n_points + 1) / (n_points + 1)
    grid = np.unique(np.quantile(dataset.time, levels))
    lo, hi = dataset.time.min(), dataset.time.max()
    return grid[(grid > lo) & (grid < hi)]


def td_auc(
    dataset: SurvivalDataset,
    scores: Sequence[float],
    grid: Sequence[float] | None = None,
    weighting: str = "NONE",
) -> TdAucCurve:
    """Cumulative/dynamic AUC evaluated on a grid of times.

    At time ``t`` the cases are patients with an observed event at or before
    ``t`` and the controls are patients still event-free after ``t``. Ties in
    score get half credit. Grid points without cases or without controls are
    dropped and listed in ``skipped_times``.

    With ``weighting="IPCW"`` each case is weighted by the inverse of the
    Kaplan-Meier censoring survival just before its event time.
    """
    if weighting not in ("NONE", "IPCW"):
        raise ValueError(f"unknown weighting {weighting!r}")
    scores = _check_scores(dataset, scores)
    if dataset.n_events == 0:
        raise NoEvents("time-dependent AUC needs at least one event")
    grid = default_grid(dataset) if grid is None else np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise EmptyGrid("evaluation grid is empty")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("evaluation grid must be strictly increasing")

    time, event = dataset.time, dataset.event
    if weighting == "IPCW":
        censoring = kaplan_meier(dataset, "CENSORING")
        g = censoring.left_limit(time)
        case_weight = np.where(g > 0, 1.0 / np.where(g > 0, g, 1.0), 0.0)
    else:
        case_weight = np.ones_like(time)

    kept, values, skipped = [], [], []
    for t in grid:
        cases = np.flatnonzero(event & (time <= t))
        controls = np.flatnonzero(time > t)
        w = case_weight[cases]
        if cases.size == 0 or controls.size == 0 or w.sum() <= 0:
            skipped.append(float(t))
            continue
        diff = scores[cases, None] - scores[None, controls]
        credit = (diff > 0).sum(axis=1) + 0.5 * (diff == 0).sum(axis=1)
        values.append(float(w @ credit) / (w.sum() * controls.size))
        kept.append(float(t))

    if not kept:
        raise AllGridPointsDegenerate(
            "every grid time lacks cases or controls; choose times strictly inside "
            f"({time.min():g}, {time.max():g})"
        )
    auc = np.array(values)
    return TdAucCurve(np.array(kept), auc, float(auc.mean()), skipped)
